# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Numeric kernels on dense NCHW arrays.

Every kernel here is a pure function of numpy arrays.  The forward
kernels come with the matching backward kernels (vector-Jacobian
products) which the tape in autodiff.py composes.  Convolutions and
reductions accumulate in float64 and cast back to the input's element
type.
"""

__all__ = ['ConvSpec', 'conv2d', 'conv2d_backward', 'maxpool2d',
           'maxpool2d_backward', 'avgpool2d', 'avgpool2d_backward',
           'channel_reduce', 'channel_reduce_backward',
           'l2_normalize_per_sample', 'l2_normalize_backward', 'sigmoid',
           'relu', 'dense', 'dense_backward', 'flatten',
           'softmax', 'softmax_cross_entropy', 'softmax_cross_entropy_backward',
           'conv_output_size', 'maxpool2d_argmax', 'channel_arg_extremum']

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from paranoid.decorators import accepts, returns, ensures, paranoidclass
from paranoid.types import Natural1, Self, Set, Positive, Tuple, Number
from .types import Tensor, FeatureMap, Logits, Labels, Window
from .exceptions import ShapeError, NonFiniteError, LabelError

_ACC = np.float64

@paranoidclass
class ConvSpec:
    """Hyperparameters of a square two dimensional convolution.

    `padding` is "same" (zero padding so that a stride-1 convolution
    preserves height and width; for even kernels the extra row and
    column go on the bottom and right) or "valid" (no padding).
    """
    @accepts(Self, Natural1, Natural1, Natural1, Natural1, Set(["same", "valid"]))
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding="same"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
    @staticmethod
    def _test(v):
        Natural1().test(v.in_channels)
        Natural1().test(v.out_channels)
        Natural1().test(v.kernel)
        Natural1().test(v.stride)
        assert v.padding in ["same", "valid"], "Invalid padding"
    @staticmethod
    def _generate():
        yield ConvSpec(1, 1, 1, 1, "valid")
        yield ConvSpec(2, 3, 3)
        yield ConvSpec(1, 2, 2, 1, "same")
        yield ConvSpec(3, 1, 3, 2, "valid")
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)
    def parameter_count(self):
        return self.out_channels*self.in_channels*self.kernel**2 + self.out_channels
    def to_dict(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}
    def __eq__(self, other):
        return isinstance(other, ConvSpec) and self.to_dict() == other.to_dict()
    def __repr__(self):
        return "ConvSpec(%i, %i, %i, stride=%i, padding=%r)" % (
            self.in_channels, self.out_channels, self.kernel, self.stride, self.padding)

def conv_output_size(size, kernel, stride, padding):
    """Output extent and (before, after) zero padding along one axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1)*stride + kernel - size, 0)
        return out, (total // 2, total - total // 2)
    if size < kernel:
        raise ShapeError("conv2d", "height/width", ">= %i" % kernel, size)
    return (size - kernel)//stride + 1, (0, 0)

def _check_finite(op, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("%s: input contains nan or inf" % op)

def _windows(kernel, stride, out_h, out_w):
    """Iterate over the (i, j) kernel offsets and the strided input slice
    each offset sees."""
    for i in range(kernel):
        for j in range(kernel):
            yield i, j, (slice(None), slice(None),
                         slice(i, i + stride*(out_h - 1) + 1, stride),
                         slice(j, j + stride*(out_w - 1) + 1, stride))

def _conv_geometry(x, spec):
    _, _, h, w = x.shape
    out_h, pad_h = conv_output_size(h, spec.kernel, spec.stride, spec.padding)
    out_w, pad_w = conv_output_size(w, spec.kernel, spec.stride, spec.padding)
    return out_h, out_w, pad_h, pad_w

def _check_conv_shapes(x, weights, bias, spec):
    if x.shape[1] != spec.in_channels:
        raise ShapeError("conv2d", "input channels", spec.in_channels, x.shape[1])
    if weights.shape != spec.weight_shape():
        raise ShapeError("conv2d", "weights", spec.weight_shape(), weights.shape)
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError("conv2d", "bias", (spec.out_channels,), bias.shape)

@accepts(FeatureMap, Tensor(4), Tensor(1), ConvSpec)
@returns(FeatureMap)
@ensures("return.shape[:2] == (x.shape[0], spec.out_channels)")
@ensures("spec.padding == 'same' and spec.stride == 1 --> return.shape[2:] == x.shape[2:]")
def conv2d(x, weights, bias, spec):
    """Cross-correlate `x` with `weights` and add `bias`.

    The result has shape (B, outC, H', W') with H' and W' given by
    conv_output_size.  Offsets of the kernel are visited one at a
    time, so memory stays proportional to the input even for the large
    kernels of the backbone.
    """
    _check_conv_shapes(x, weights, bias, spec)
    _check_finite("conv2d", x, weights, bias)
    out_h, out_w, pad_h, pad_w = _conv_geometry(x, spec)
    xp = np.pad(x.astype(_ACC), ((0, 0), (0, 0), pad_h, pad_w))
    w = weights.astype(_ACC)
    # Accumulate as (outC, B, H', W') so tensordot output needs no transpose
    out = np.zeros((spec.out_channels, x.shape[0], out_h, out_w), dtype=_ACC)
    for i, j, window in _windows(spec.kernel, spec.stride, out_h, out_w):
        out += np.tensordot(w[:, :, i, j], xp[window], axes=([1], [1]))
    out += bias.astype(_ACC)[:, None, None, None]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3)).astype(x.dtype)

@accepts(FeatureMap, FeatureMap, Tensor(4), ConvSpec)
@returns(Tuple(FeatureMap, Tensor(4), Tensor(1)))
@ensures("return[0].shape == x.shape and return[1].shape == weights.shape")
def conv2d_backward(grad, x, weights, spec):
    """Gradients of conv2d with respect to input, weights and bias."""
    _check_conv_shapes(x, weights, None, spec)
    out_h, out_w, pad_h, pad_w = _conv_geometry(x, spec)
    if grad.shape != (x.shape[0], spec.out_channels, out_h, out_w):
        raise ShapeError("conv2d_backward", "grad", (x.shape[0], spec.out_channels, out_h, out_w), grad.shape)
    xp = np.pad(x.astype(_ACC), ((0, 0), (0, 0), pad_h, pad_w))
    w = weights.astype(_ACC)
    g = grad.astype(_ACC)
    dxp = np.zeros_like(xp)
    dw = np.zeros(w.shape, dtype=_ACC)
    for i, j, window in _windows(spec.kernel, spec.stride, out_h, out_w):
        dw[:, :, i, j] = np.tensordot(g, xp[window], axes=([0, 2, 3], [0, 2, 3]))
        # (B, H', W', inC) -> (B, inC, H', W')
        dxp[window] += np.moveaxis(np.tensordot(g, w[:, :, i, j], axes=([1], [0])), 3, 1)
    db = g.sum(axis=(0, 2, 3))
    dx = dxp[:, :, pad_h[0]:pad_h[0] + x.shape[2], pad_w[0]:pad_w[0] + x.shape[3]]
    return (np.ascontiguousarray(dx).astype(x.dtype), dw.astype(weights.dtype),
            db.astype(weights.dtype))

def _pool_view(x, window, stride, op):
    wh, ww = window
    if x.shape[2] < wh:
        raise ShapeError(op, "height", ">= %i" % wh, x.shape[2])
    if x.shape[3] < ww:
        raise ShapeError(op, "width", ">= %i" % ww, x.shape[3])
    # Floor semantics: trailing partial windows are dropped
    view = sliding_window_view(x, window, axis=(2, 3))[:, :, ::stride[0], ::stride[1]]
    return view.reshape(view.shape[:4] + (wh*ww,))

@accepts(FeatureMap, Window, Window)
@returns(FeatureMap)
@ensures("return.shape[2] == (x.shape[2] - window[0])//stride[0] + 1")
@ensures("return.shape[3] == (x.shape[3] - window[1])//stride[1] + 1")
def maxpool2d(x, window, stride):
    """Maximum over each window; output extents follow floor semantics."""
    return _pool_view(x, window, stride, "maxpool2d").max(axis=4)

@accepts(FeatureMap, Window, Window)
def maxpool2d_argmax(x, window, stride):
    """Index, in scan order within each window, of the first maximum."""
    return _pool_view(x, window, stride, "maxpool2d").argmax(axis=4)

@accepts(FeatureMap, FeatureMap, Window, Window)
@returns(FeatureMap)
@ensures("return.shape == x.shape")
def maxpool2d_backward(grad, x, window, stride):
    """Route each output gradient to the first maximum of its window.

    Ties therefore resolve deterministically to the earliest position
    in row-major scan order.
    """
    arg = _pool_view(x, window, stride, "maxpool2d").argmax(axis=4)
    if grad.shape != arg.shape:
        raise ShapeError("maxpool2d_backward", "grad", arg.shape, grad.shape)
    b, c, oh, ow = np.indices(arg.shape)
    rows = oh*stride[0] + arg // window[1]
    cols = ow*stride[1] + arg % window[1]
    dx = np.zeros(x.shape, dtype=_ACC)
    np.add.at(dx, (b, c, rows, cols), grad)
    return dx.astype(x.dtype)

@accepts(FeatureMap, Natural1)
@returns(FeatureMap)
def avgpool2d(x, factor):
    """Mean over non-overlapping factor x factor windows (floor semantics)."""
    view = _pool_view(x, (factor, factor), (factor, factor), "avgpool2d")
    return view.astype(_ACC).mean(axis=4).astype(x.dtype)

@accepts(FeatureMap, FeatureMap, Natural1)
@returns(FeatureMap)
@ensures("return.shape == x.shape")
def avgpool2d_backward(grad, x, factor):
    expected = x.shape[:2] + (x.shape[2]//factor, x.shape[3]//factor)
    if grad.shape != expected:
        raise ShapeError("avgpool2d_backward", "grad", expected, grad.shape)
    h, w = grad.shape[2]*factor, grad.shape[3]*factor
    dx = np.zeros(x.shape, dtype=x.dtype)
    spread = np.repeat(np.repeat(grad, factor, axis=2), factor, axis=3)
    dx[:, :, :h, :w] = spread/factor**2
    return dx

@accepts(FeatureMap, Set(["max", "min", "mean"]))
@returns(FeatureMap(channels=1))
@ensures("return.shape == (x.shape[0], 1) + x.shape[2:]")
@ensures("x.shape[1] == 1 --> np.array_equal(return, x)")
def channel_reduce(x, mode):
    """Collapse the channel axis by max, min or mean at each pixel."""
    if mode == "max":
        return x.max(axis=1, keepdims=True)
    if mode == "min":
        return x.min(axis=1, keepdims=True)
    if x.shape[1] == 1:
        return x.copy()
    return x.astype(_ACC).mean(axis=1, keepdims=True).astype(x.dtype)

@accepts(FeatureMap, Set(["max", "min"]))
def channel_arg_extremum(x, mode):
    """Channel index of the first maximum (or minimum) at each pixel."""
    return (x.argmax if mode == "max" else x.argmin)(axis=1)[:, None]

@accepts(FeatureMap, FeatureMap, Set(["max", "min", "mean"]))
@returns(FeatureMap)
@ensures("return.shape == x.shape")
def channel_reduce_backward(grad, x, mode):
    """Gradient of channel_reduce; max and min go to the first
    arg-extremum in channel order."""
    if grad.shape != (x.shape[0], 1) + x.shape[2:]:
        raise ShapeError("channel_reduce_backward", "grad", (x.shape[0], 1) + x.shape[2:], grad.shape)
    if mode == "mean":
        return np.broadcast_to(grad/x.shape[1], x.shape).astype(x.dtype)
    arg = (x.argmax if mode == "max" else x.argmin)(axis=1)
    dx = np.zeros_like(x)
    np.put_along_axis(dx, arg[:, None], grad, axis=1)
    return dx

def _sample_norms(x):
    flat = x.reshape(x.shape[0], -1).astype(_ACC)
    return np.sqrt(np.einsum('bi,bi->b', flat, flat))

@accepts(Tensor, Positive)
@returns(Tensor)
@ensures("return.shape == x.shape")
@ensures("np.allclose(np.linalg.norm(return.reshape(len(x), -1)[np.linalg.norm(x.reshape(len(x), -1), axis=1) > epsilon], axis=1), 1, atol=1e-5)")
def l2_normalize_per_sample(x, epsilon=1e-12):
    """Scale every batch element to unit l2 norm.

    The norm of element b is taken over all of its values (every
    channel and position), and output[b] = x[b] / max(|x[b]|, epsilon),
    so an all-zero sample stays zero.
    """
    norms = np.maximum(_sample_norms(x), epsilon)
    scale = norms.reshape((-1,) + (1,)*(x.ndim - 1))
    return (x.astype(_ACC)/scale).astype(x.dtype)

@accepts(Tensor, Tensor, Positive)
@returns(Tensor)
@ensures("return.shape == x.shape")
def l2_normalize_backward(grad, x, epsilon=1e-12):
    """Gradient of l2_normalize_per_sample.

    Where the norm n exceeds epsilon this is (g - y<g,y>)/n with y the
    normalized sample, i.e. the projection orthogonal to x; below it
    the map is linear with slope 1/epsilon.
    """
    if grad.shape != x.shape:
        raise ShapeError("l2_normalize_backward", "grad", x.shape, grad.shape)
    norms = _sample_norms(x)
    shape = (-1,) + (1,)*(x.ndim - 1)
    active = (norms > epsilon).reshape(shape)
    n = np.maximum(norms, epsilon).reshape(shape)
    g = grad.astype(_ACC)
    y = x.astype(_ACC)/n
    radial = np.einsum('bi,bi->b', g.reshape(len(g), -1), y.reshape(len(y), -1)).reshape(shape)
    dx = np.where(active, (g - y*radial)/n, g/n)
    return dx.astype(x.dtype)

@accepts(Tensor)
@returns(Tensor)
@ensures("return.shape == x.shape")
@ensures("np.all(return > 0) and np.all(return < 1)")
def sigmoid(x):
    """Logistic function, kept strictly inside (0,1) for every element
    type (saturated values are pulled in by one ulp)."""
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1/(1 + e), e/(1 + e)).astype(x.dtype)
    low = np.finfo(x.dtype).tiny
    high = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    return np.clip(out, low, high)

@accepts(Tensor)
@returns(Tensor)
@ensures("return.shape == x.shape")
@ensures("np.all(return >= 0)")
def relu(x):
    return np.maximum(x, 0).astype(x.dtype)

@accepts(Tensor(2), Tensor(2), Tensor(1))
@returns(Tensor(2))
@ensures("return.shape == (x.shape[0], weights.shape[1])")
def dense(x, weights, bias):
    """Affine map x @ weights + bias."""
    if x.shape[1] != weights.shape[0]:
        raise ShapeError("dense", "input features", weights.shape[0], x.shape[1])
    if bias.shape != (weights.shape[1],):
        raise ShapeError("dense", "bias", (weights.shape[1],), bias.shape)
    _check_finite("dense", x, weights, bias)
    return (x.astype(_ACC) @ weights.astype(_ACC) + bias).astype(x.dtype)

@accepts(Tensor(2), Tensor(2), Tensor(2))
@returns(Tuple(Tensor(2), Tensor(2), Tensor(1)))
def dense_backward(grad, x, weights):
    if x.shape[1] != weights.shape[0]:
        raise ShapeError("dense_backward", "input features", weights.shape[0], x.shape[1])
    if grad.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError("dense_backward", "grad", (x.shape[0], weights.shape[1]), grad.shape)
    g = grad.astype(_ACC)
    return ((g @ weights.T.astype(_ACC)).astype(x.dtype),
            (x.T.astype(_ACC) @ g).astype(weights.dtype),
            g.sum(axis=0).astype(weights.dtype))

@accepts(FeatureMap)
@returns(Tensor(2))
@ensures("return.shape == (x.shape[0], x.shape[1]*x.shape[2]*x.shape[3])")
def flatten(x):
    return x.reshape(x.shape[0], -1)

@accepts(Logits)
@returns(Logits)
@ensures("np.allclose(return.sum(axis=1), 1, atol=1e-6)")
def softmax(logits):
    """Row-wise softmax, stabilized by subtracting the row maximum."""
    _check_finite("softmax", logits)
    z = np.exp(logits.astype(_ACC) - logits.max(axis=1, keepdims=True))
    return (z/z.sum(axis=1, keepdims=True)).astype(logits.dtype)

@accepts(Logits, Labels)
@returns(Tuple(Number, Logits))
@ensures("np.allclose(return[1].sum(axis=1), 1, atol=1e-6)")
@ensures("return[0] >= 0")
def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label].

    Returns the loss and the softmax probabilities.  The maximum logit
    is subtracted from each row first, so large logits do not
    overflow.
    """
    if labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", "labels", (logits.shape[0],), labels.shape)
    if np.any(labels >= logits.shape[1]):
        raise LabelError("softmax_cross_entropy: labels must lie in [0, %i), got %s" %
                         (logits.shape[1], labels.max()))
    _check_finite("softmax_cross_entropy", logits)
    z = logits.astype(_ACC) - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    log_probs = z - lse[:, None]
    loss = -log_probs[np.arange(len(labels)), labels].mean()
    return float(max(loss, 0.0)), np.exp(log_probs).astype(logits.dtype)

@accepts(Logits, Labels)
@returns(Logits)
def softmax_cross_entropy_backward(probabilities, labels):
    """Gradient of the mean loss with respect to the logits."""
    if labels.shape != (probabilities.shape[0],):
        raise ShapeError("softmax_cross_entropy_backward", "labels", (probabilities.shape[0],), labels.shape)
    if np.any(labels >= probabilities.shape[1]):
        raise LabelError("softmax_cross_entropy_backward: label out of range")
    g = probabilities.astype(_ACC).copy()
    g[np.arange(len(labels)), labels] -= 1
    return (g/len(labels)).astype(probabilities.dtype)
