# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Reverse-mode automatic differentiation on a recorded tape.

A Tape is rebuilt on every forward pass (define-by-run).  Each
differentiable operation in ops.py pushes one node holding the ids of
its inputs and a closure computing the vector-Jacobian product from
the forward values it saved.  Because nodes are appended as they are
created, the tape is always in topological order and backward() is a
single reverse sweep.
"""

__all__ = ['Parameters', 'Variable', 'Tape', 'backward']

import hashlib
from collections import OrderedDict
import numpy as np
from paranoid.decorators import accepts, returns, ensures, paranoidclass
from paranoid.types import Self, String, Maybe, Boolean, Dict, Unchecked
from .types import Tensor
from .exceptions import EngineError, PreconditionError, ShapeError
from .settings import Settings

class Parameters:
    """Named parameter slots, each holding a value and a gradient.

    Iteration order is insertion order, which builders keep equal to
    the order layers appear in the network.
    """
    def __init__(self, values=None):
        self.values = OrderedDict()
        self.grads = OrderedDict()
        for k,v in (values or {}).items():
            self[k] = v
    @staticmethod
    def _generate():
        yield Parameters()
        yield Parameters({"w" : np.ones((2, 3)), "b" : np.zeros(3)})
    def __getitem__(self, name):
        return self.values[name]
    def __setitem__(self, name, value):
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
    def __contains__(self, name):
        return name in self.values
    def __iter__(self):
        return iter(self.values)
    def __len__(self):
        return len(self.values)
    def items(self):
        return self.values.items()
    def names(self):
        return list(self.values.keys())
    def count(self):
        """Number of scalar parameters."""
        return int(sum(v.size for v in self.values.values()))
    def copy(self):
        return Parameters({k : v.copy() for k,v in self.values.items()})
    def astype(self, dtype):
        return Parameters({k : v.astype(dtype) for k,v in self.values.items()})
    def equal(self, other):
        """Bit-for-bit equality of names, shapes, types and values."""
        return self.names() == other.names() and \
            all(self[k].dtype == other[k].dtype and np.array_equal(self[k], other[k])
                for k in self.names())

class _Node:
    __slots__ = ('op', 'inputs', 'vjp', 'requires_grad')
    def __init__(self, op, inputs, vjp, requires_grad):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.requires_grad = requires_grad

_FUZZ_TAPE = []

@paranoidclass
class Variable:
    """A value recorded on a tape.

    Variables are created by Tape.constant, Tape.watch, Tape.parameter
    and the operations in ops.py; they should not be constructed
    directly.  The wrapped value must not be modified in place.
    """
    def __init__(self, value, tape, index, requires_grad=False):
        self.value = value
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad
    @staticmethod
    def _test(v):
        assert isinstance(v.value, np.ndarray), "Variable must wrap an ndarray"
        assert np.issubdtype(v.value.dtype, np.floating), "Variable must be floating point"
        assert np.all(np.isfinite(v.value)), "Variable cannot contain nan or inf"
        assert isinstance(v.tape, Tape), "Variable must belong to a tape"
    @staticmethod
    def _generate():
        # All generated variables share one tape so that generated
        # arguments can be combined.
        if not _FUZZ_TAPE:
            _FUZZ_TAPE.append(Tape())
        tape = _FUZZ_TAPE[0]
        rng = np.random.default_rng(4)
        yield tape.watch(rng.standard_normal((2, 3, 4, 4)))
        yield tape.watch(np.full((1, 1, 3, 3), .5))
        yield tape.constant(rng.standard_normal((2, 3)))
        yield tape.constant(np.array(1.5))
    @property
    def shape(self):
        return self.value.shape
    @property
    def dtype(self):
        return self.value.dtype
    def __repr__(self):
        return "Variable(shape=%s, index=%s)" % (self.value.shape, self.index)
    def _lift(self, other):
        return other if isinstance(other, Variable) else \
            self.tape.constant(np.asarray(other, dtype=self.value.dtype))
    def __mul__(self, other):
        from . import ops
        return ops.multiply(self, self._lift(other))
    __rmul__ = __mul__
    def __add__(self, other):
        from . import ops
        return ops.add(self, self._lift(other))
    __radd__ = __add__
    def __sub__(self, other):
        from . import ops
        return ops.subtract(self, self._lift(other))

@paranoidclass
class Tape:
    """An ordered record of operations, their inputs, and saved values.

    `params` is the parameter registry: Tape.parameter(name) records
    the current value of slot `name` as a leaf, and backward() writes
    the gradient of every slot back into it (zero for slots the loss
    does not reach).  With `record=False` nothing is saved, which is
    what inference uses.
    """
    @accepts(Self, Maybe(Unchecked(Parameters)), Boolean)
    def __init__(self, params=None, record=True):
        self.params = params if params is not None else Parameters()
        self.record = record
        self.nodes = []
        self.named = OrderedDict()
        self._decisions = hashlib.sha1()
    @staticmethod
    def _test(v):
        assert isinstance(v.params, Parameters), "Tape needs a parameter registry"
        assert v.record in [True, False]
    @staticmethod
    def _generate():
        if not _FUZZ_TAPE:
            _FUZZ_TAPE.append(Tape())
        yield _FUZZ_TAPE[0]
    def _leaf(self, value, requires_grad, op):
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(Settings.dtype())
        if not self.record:
            return Variable(value, self, -1, False)
        self.nodes.append(_Node(op, (), None, requires_grad))
        return Variable(value, self, len(self.nodes) - 1, requires_grad)
    def constant(self, value):
        """Record a value which receives no gradient."""
        return self._leaf(value, False, "constant")
    def watch(self, value, name=None):
        """Record a leaf whose gradient backward() should report.

        If `name` is given the gradient is returned under that name.
        """
        v = self._leaf(value, True, "watch")
        if name is not None:
            self.named[name] = v
        return v
    def parameter(self, name):
        """Record the current value of parameter slot `name`."""
        if name not in self.params:
            raise EngineError("Unknown parameter %s" % name)
        if name in self.named:
            return self.named[name]
        return self.watch(self.params[name], name)
    def push(self, op, value, inputs, vjp):
        """Append the node for operation `op` and return its output.

        `vjp(grad, needs)` must return one gradient per input (or None
        for inputs where `needs` is False).
        """
        for v in inputs:
            if v.tape is not self:
                raise PreconditionError("%s: inputs were recorded on different tapes" % op)
        if not self.record:
            return Variable(value, self, -1, False)
        requires_grad = any(v.requires_grad for v in inputs)
        self.nodes.append(_Node(op, tuple(v.index for v in inputs),
                                vjp if requires_grad else None, requires_grad))
        return Variable(value, self, len(self.nodes) - 1, requires_grad)
    def note(self, decision):
        """Record a discrete decision taken during the forward pass
        (which argument won a max, which ReLUs were active)."""
        self._decisions.update(np.ascontiguousarray(decision).tobytes())
    def signature(self):
        """Digest of every decision noted so far.  Two forward passes
        with equal signatures evaluated the same smooth piece of the
        network."""
        return self._decisions.hexdigest()
    @accepts(Self, Variable)
    @returns(Dict(String, Tensor))
    @ensures("all(return[k].shape == self.params[k].shape for k in self.params)")
    def backward(self, loss):
        """Gradients of the scalar `loss` with respect to every parameter
        slot and every named watched leaf.

        Gradients are computed afresh on each call, so calling this
        twice gives identical results.
        """
        if not self.record:
            raise EngineError("Cannot differentiate a tape recorded with record=False")
        if loss.tape is not self:
            raise PreconditionError("backward: loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ShapeError("backward", "loss", "scalar", loss.value.shape)
        grads = [None]*len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            node = self.nodes[i]
            if grads[i] is None or node.vjp is None:
                continue
            needs = tuple(self.nodes[j].requires_grad for j in node.inputs)
            for j, g in zip(node.inputs, node.vjp(grads[i], needs)):
                if g is None or not self.nodes[j].requires_grad:
                    continue
                grads[j] = g if grads[j] is None else grads[j] + g
        result = OrderedDict()
        for name in self.params:
            result[name] = np.zeros_like(self.params[name])
        for name, v in self.named.items():
            g = grads[v.index]
            result[name] = np.array(g, dtype=v.value.dtype).reshape(v.value.shape) \
                if g is not None else np.zeros_like(v.value)
        for name in self.params:
            self.params.grads[name] = result[name]
        return dict(result)

def backward(tape, loss):
    """Populate and return the gradients of `loss` recorded on `tape`."""
    return tape.backward(loss)
