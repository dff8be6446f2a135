# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Differentiable operations.

Each function here runs the matching kernel from kernels.py on the
values of its Variable arguments, pushes a node onto their tape, and
returns the output Variable.  The node's closure calls the backward
kernel.  Operations which make a discrete choice (max/min selection,
ReLU gating, the l2 norm guard) note it on the tape so that gradient
checks can tell when a perturbation crossed a kink.
"""

__all__ = ['conv2d', 'maxpool2d', 'avgpool2d', 'channel_reduce',
           'l2_normalize', 'sigmoid', 'relu', 'dense', 'flatten',
           'multiply', 'add', 'subtract', 'concat_channels', 'total',
           'softmax_cross_entropy']

import numpy as np
from paranoid.decorators import accepts, returns, ensures
from paranoid.types import Natural1, Set, Positive, Maybe, Tuple
from . import kernels as K
from .autodiff import Variable
from .types import Window, Labels, Logits
from .exceptions import ShapeError
from .settings import Settings

def _rank(op, name, v, *ranks):
    if v.value.ndim not in ranks:
        raise ShapeError(op, name + " rank", " or ".join(map(str, ranks)), v.value.ndim)

def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad

@accepts(Variable, Variable, Variable, K.ConvSpec)
@returns(Variable)
@ensures("return.shape[:2] == (x.shape[0], spec.out_channels)")
def conv2d(x, weights, bias, spec):
    _rank("conv2d", "input", x, 4)
    _rank("conv2d", "weights", weights, 4)
    _rank("conv2d", "bias", bias, 1)
    out = K.conv2d(x.value, weights.value, bias.value, spec)
    def vjp(g, needs):
        dx, dw, db = K.conv2d_backward(g, x.value, weights.value, spec)
        return dx if needs[0] else None, dw, db
    return x.tape.push("conv2d", out, (x, weights, bias), vjp)

@accepts(Variable, Window, Window)
@returns(Variable)
def maxpool2d(x, window, stride):
    _rank("maxpool2d", "input", x, 4)
    tape = x.tape
    out = K.maxpool2d(x.value, window, stride)
    if tape.record:
        tape.note(K.maxpool2d_argmax(x.value, window, stride))
    def vjp(g, needs):
        return (K.maxpool2d_backward(g, x.value, window, stride),)
    return tape.push("maxpool2d", out, (x,), vjp)

@accepts(Variable, Natural1)
@returns(Variable)
def avgpool2d(x, factor):
    """Mean over non-overlapping factor x factor windows."""
    _rank("avgpool2d", "input", x, 4)
    out = K.avgpool2d(x.value, factor)
    def vjp(g, needs):
        return (K.avgpool2d_backward(g, x.value, factor),)
    return x.tape.push("avgpool2d", out, (x,), vjp)

@accepts(Variable, Set(["max", "min", "mean"]))
@returns(Variable)
@ensures("return.shape == (x.shape[0], 1) + x.shape[2:]")
def channel_reduce(x, mode):
    _rank("channel_reduce", "input", x, 4)
    tape = x.tape
    out = K.channel_reduce(x.value, mode)
    if tape.record and mode != "mean":
        tape.note(K.channel_arg_extremum(x.value, mode))
    def vjp(g, needs):
        return (K.channel_reduce_backward(g, x.value, mode),)
    return tape.push("channel_reduce_" + mode, out, (x,), vjp)

@accepts(Variable, Maybe(Positive))
@returns(Variable)
@ensures("return.shape == x.shape")
def l2_normalize(x, epsilon=None):
    """Per-sample l2 normalization.  `epsilon` defaults to the
    `l2_epsilon` setting."""
    _rank("l2_normalize", "input", x, 1, 2, 3, 4)
    eps = Settings.get('l2_epsilon') if epsilon is None else epsilon
    tape = x.tape
    out = K.l2_normalize_per_sample(x.value, eps)
    if tape.record:
        norms = np.linalg.norm(x.value.reshape(len(x.value), -1).astype(np.float64), axis=1)
        tape.note(norms > eps)
    def vjp(g, needs):
        return (K.l2_normalize_backward(g, x.value, eps),)
    return tape.push("l2_normalize", out, (x,), vjp)

@accepts(Variable)
@returns(Variable)
@ensures("np.all(return.value > 0) and np.all(return.value < 1)")
def sigmoid(x):
    _rank("sigmoid", "input", x, 1, 2, 3, 4)
    out = K.sigmoid(x.value)
    def vjp(g, needs):
        return (g*out*(1 - out),)
    return x.tape.push("sigmoid", out, (x,), vjp)

@accepts(Variable)
@returns(Variable)
@ensures("return.shape == x.shape")
def relu(x):
    _rank("relu", "input", x, 1, 2, 3, 4)
    tape = x.tape
    out = K.relu(x.value)
    active = x.value > 0
    if tape.record:
        tape.note(active)
    def vjp(g, needs):
        return (np.where(active, g, 0).astype(x.value.dtype),)
    return tape.push("relu", out, (x,), vjp)

@accepts(Variable, Variable, Variable)
@returns(Variable)
def dense(x, weights, bias):
    _rank("dense", "input", x, 2)
    _rank("dense", "weights", weights, 2)
    _rank("dense", "bias", bias, 1)
    out = K.dense(x.value, weights.value, bias.value)
    def vjp(g, needs):
        return K.dense_backward(g, x.value, weights.value)
    return x.tape.push("dense", out, (x, weights, bias), vjp)

@accepts(Variable)
@returns(Variable)
@ensures("return.shape == (x.shape[0], int(np.prod(x.shape[1:])))")
def flatten(x):
    _rank("flatten", "input", x, 4)
    out = K.flatten(x.value)
    def vjp(g, needs):
        return (g.reshape(x.value.shape),)
    return x.tape.push("flatten", out, (x,), vjp)

def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "broadcast", a.shape, b.shape)

@accepts(Variable, Variable)
@returns(Variable)
@ensures("return.shape == np.broadcast_shapes(a.shape, b.shape)")
def multiply(a, b):
    """Elementwise product with numpy broadcasting, e.g. a (B,1,H,W)
    gate times a (B,C,H,W) feature map."""
    _broadcast_shape("multiply", a, b)
    out = np.asarray(a.value*b.value)
    def vjp(g, needs):
        return (_unbroadcast(g*b.value, a.value.shape) if needs[0] else None,
                _unbroadcast(g*a.value, b.value.shape) if needs[1] else None)
    return a.tape.push("multiply", out, (a, b), vjp)

@accepts(Variable, Variable)
@returns(Variable)
def add(a, b):
    _broadcast_shape("add", a, b)
    def vjp(g, needs):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)
    return a.tape.push("add", np.asarray(a.value + b.value), (a, b), vjp)

@accepts(Variable, Variable)
@returns(Variable)
def subtract(a, b):
    _broadcast_shape("subtract", a, b)
    def vjp(g, needs):
        return _unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)
    return a.tape.push("subtract", np.asarray(a.value - b.value), (a, b), vjp)

@accepts(Variable, Variable)
@returns(Variable)
@ensures("return.shape[1] == a.shape[1] + b.shape[1]")
def concat_channels(a, b):
    """Stack two feature maps along the channel axis."""
    if a.value.ndim != 4 or b.value.ndim != 4:
        raise ShapeError("concat_channels", "rank", 4, (a.value.ndim, b.value.ndim))
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError("concat_channels", "batch/height/width", a.shape, b.shape)
    c = a.shape[1]
    def vjp(g, needs):
        return g[:, :c], g[:, c:]
    return a.tape.push("concat", np.concatenate([a.value, b.value], axis=1), (a, b), vjp)

@accepts(Variable)
@returns(Variable)
@ensures("return.shape == ()")
def total(x):
    """Sum of every element, as a scalar."""
    out = np.asarray(x.value.sum(dtype=np.float64), dtype=x.value.dtype)
    def vjp(g, needs):
        return (np.broadcast_to(g, x.value.shape).astype(x.value.dtype),)
    return x.tape.push("sum", out, (x,), vjp)

@accepts(Variable, Labels)
@returns(Tuple(Variable, Logits))
@ensures("return[0].shape == ()")
def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy loss as a scalar Variable, and the softmax
    probabilities as a plain array."""
    _rank("softmax_cross_entropy", "logits", logits, 2)
    loss, probs = K.softmax_cross_entropy(logits.value, labels)
    def vjp(g, needs):
        return (g*K.softmax_cross_entropy_backward(probs, labels),)
    out = np.asarray(loss, dtype=logits.value.dtype)
    return logits.tape.push("softmax_cross_entropy", out, (logits,), vjp), probs
