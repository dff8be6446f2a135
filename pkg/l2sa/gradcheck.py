# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Finite-difference certification of analytic gradients.

A Fragment is a small network piece built from the operations in
ops.py.  grad_check() evaluates it in 64-bit arithmetic on a random
input, reduces the output to a scalar with a fixed random projection,
and compares the tape's gradient with central differences

    n = (L(v + h) - L(v - h)) / 2h,    error = |a - n| / max(|a|, |n|, floor)

at randomly chosen coordinates of the input and of every parameter
block.  A coordinate whose +h and -h evaluations made different
discrete choices (a max changing hands, a ReLU switching) straddles a
non-differentiable point; it is counted as excluded rather than
compared.
"""

__all__ = ['Fragment', 'BlockResult', 'GradCheckReport', 'FRAGMENTS',
           'grad_check', 'certify']

import logging
from collections import OrderedDict

import numpy as np
from paranoid.decorators import accepts, returns, ensures, paranoidclass, paranoidconfig
from paranoid.types import Positive, Natural1, Integer, Maybe, List, String, Unchecked

from . import ops
from . import attention
from .autodiff import Tape, Parameters
from .kernels import ConvSpec
from .exceptions import ConfigError
from .settings import Settings

logger = logging.getLogger(__name__)

# Smallest denominator of the relative error
_FLOOR = 1e-8

@paranoidclass
class Fragment:
    """A network piece to certify.

    `build(x, params, shape)` returns the output Variable for input
    Variable `x` and a dict of parameter Variables.
    `parameter_shapes(shape)` gives the parameter blocks for an input
    of shape `shape`, and `sample_shape(rng)` draws a random small
    input shape.
    """
    def __init__(self, name, default_shape, build, parameter_shapes=None, sample_shape=None):
        self.name = name
        self.default_shape = tuple(default_shape)
        self.build = build
        self.parameter_shapes = parameter_shapes or (lambda shape : {})
        self.sample_shape = sample_shape or (lambda rng : self.default_shape)
    @staticmethod
    def _test(v):
        assert isinstance(v.name, str)
        assert callable(v.build) and callable(v.parameter_shapes)
    @staticmethod
    def _generate():
        yield FRAGMENTS["dense"]
        yield FRAGMENTS["relu"]
    def __repr__(self):
        return "Fragment(%r)" % self.name

class BlockResult:
    """Comparison results for one input or parameter block."""
    def __init__(self, name, max_error, checked, excluded):
        self.name = name
        self.max_error = max_error
        self.checked = checked
        self.excluded = excluded

@paranoidclass
class GradCheckReport:
    """Per-block maximum relative errors of one grad_check run."""
    def __init__(self, fragment, input_shape, tolerance, blocks, seed=0):
        self.fragment = fragment
        self.input_shape = tuple(input_shape)
        self.tolerance = tolerance
        self.blocks = list(blocks)
        self.seed = seed
    @staticmethod
    def _test(v):
        assert v.tolerance > 0
        assert all(isinstance(b, BlockResult) for b in v.blocks)
        assert all(b.max_error >= 0 for b in v.blocks)
    @property
    def passed(self):
        return all(b.max_error < self.tolerance for b in self.blocks)
    @property
    def excluded(self):
        return sum(b.excluded for b in self.blocks)
    @property
    def max_error(self):
        return max([b.max_error for b in self.blocks] + [0.0])
    def to_table(self):
        lines = ["fragment %s, input %s, tolerance %.1e, seed %i" %
                 (self.fragment, self.input_shape, self.tolerance, self.seed),
                 "%-10s %14s %8s %9s %7s" % ("block", "max_rel_error", "checked", "excluded", "status")]
        for b in self.blocks:
            lines.append("%-10s %14.3e %8i %9i %7s" %
                         (b.name, b.max_error, b.checked, b.excluded,
                          "pass" if b.max_error < self.tolerance else "FAIL"))
        lines.append("result: %s" % ("pass" if self.passed else "FAIL"))
        return "\n".join(lines)
    def to_kv(self):
        prefix = "%s.seed%i." % (self.fragment, self.seed)
        lines = [prefix + "input_shape = %s" % "x".join(map(str, self.input_shape)),
                 prefix + "tolerance = %g" % self.tolerance]
        for b in self.blocks:
            lines += [prefix + "%s.max_rel_error = %.6e" % (b.name, b.max_error),
                      prefix + "%s.checked = %i" % (b.name, b.checked),
                      prefix + "%s.excluded = %i" % (b.name, b.excluded)]
        lines.append(prefix + "passed = %s" % str(self.passed).lower())
        return "\n".join(lines)

def _map_shape(rng):
    return (int(rng.integers(1, 3)), int(rng.integers(1, 5)),
            int(rng.integers(4, 8)), int(rng.integers(4, 8)))

def _elementwise(name, op, default=(2, 3, 4, 4)):
    return Fragment(name, default, lambda x, p, s : op(x), sample_shape=_map_shape)

def _conv(name, kernel):
    return Fragment(name, (2, 3, 5, 5),
                    lambda x, p, s : ops.conv2d(x, p["weight"], p["bias"], ConvSpec(s[1], 2, kernel)),
                    lambda s : {"weight" : (2, s[1], kernel, kernel), "bias" : (2,)},
                    _map_shape)

def _block(name, forward, weight_channels, kernel=7, default=(2, 4, 8, 8)):
    return Fragment(name, default,
                    lambda x, p, s : forward(x, p),
                    lambda s : {"weight" : (1, weight_channels, kernel, kernel), "bias" : (1,)},
                    _map_shape)

def _softmax_ce(x, p, s):
    labels = np.arange(s[0]) % s[1]
    return ops.softmax_cross_entropy(x, labels)[0]

FRAGMENTS = OrderedDict((f.name, f) for f in [
    Fragment("dense", (3, 4),
             lambda x, p, s : ops.dense(x, p["weight"], p["bias"]),
             lambda s : {"weight" : (s[1], 3), "bias" : (3,)},
             lambda rng : (int(rng.integers(1, 5)), int(rng.integers(1, 6)))),
    _conv("conv2d", 3),
    _conv("conv2d_even", 2),
    _elementwise("sigmoid", ops.sigmoid),
    _elementwise("relu", ops.relu),
    _elementwise("l2_normalize", ops.l2_normalize),
    _elementwise("channel_max", lambda x : ops.channel_reduce(x, "max")),
    _elementwise("channel_min", lambda x : ops.channel_reduce(x, "min")),
    _elementwise("channel_mean", lambda x : ops.channel_reduce(x, "mean")),
    _elementwise("maxpool", lambda x : ops.maxpool2d(x, (2, 2), (2, 2))),
    _elementwise("avgpool", lambda x : ops.avgpool2d(x, 2)),
    Fragment("multiply", (2, 3, 4, 4),
             lambda x, p, s : ops.multiply(p["gate"], x),
             lambda s : {"gate" : (s[0], 1) + tuple(s[2:])},
             _map_shape),
    Fragment("softmax_ce", (4, 3), _softmax_ce,
             sample_shape=lambda rng : (int(rng.integers(1, 6)), int(rng.integers(2, 5)))),
    _block("l2sab", lambda x, p : attention.l2_sab_forward(x, attention.L2SabConfig(7), p), 1),
    _block("l2sab_unnormalized", lambda x, p : attention.l2sab_unnormalized(x, 7, p), 1),
    _block("cbam", lambda x, p : attention.cbam_spatial_forward(x, 7, p), 2),
])

def _run(fragment, shape, x, values):
    tape = Tape(Parameters(values))
    xv = tape.watch(x, "input")
    out = fragment.build(xv, {k : tape.parameter(k) for k in values}, shape)
    return tape, out

@accepts(Fragment, Maybe(Unchecked(tuple)), Positive,
         Natural1, Integer, Positive, Maybe(Unchecked(np.ndarray)), Positive)
@returns(GradCheckReport)
@ensures("return.tolerance == tolerance")
@paranoidconfig(unit_test=False)
def grad_check(fragment, input_shape=None, tolerance=1e-4, samples=20, seed=0,
               h=1e-5, x=None, floor=_FLOOR):
    """Compare the analytic and central-difference gradients of
    `fragment`, in 64-bit arithmetic whatever the `precision` setting.

    Up to `samples` coordinates are checked in each block.  The input
    is standard normal unless `x` is given; parameters are drawn from a
    normal distribution with standard deviation 0.5.  `floor` bounds
    the denominator of the relative error from below.  Failures are
    reported, not raised.
    """
    shape = tuple(x.shape) if x is not None else tuple(input_shape or fragment.default_shape)
    with Settings.override(precision='f64'):
        rng = np.random.default_rng(seed)
        x0 = np.array(x, dtype=np.float64) if x is not None else rng.standard_normal(shape)
        p0 = OrderedDict((k, .5*rng.standard_normal(s))
                         for k,s in fragment.parameter_shapes(shape).items())
        tape, out = _run(fragment, shape, x0, p0)
        projection = rng.standard_normal(out.shape)
        loss = ops.total(ops.multiply(out, tape.constant(projection)))
        analytic = tape.backward(loss)
        def objective(xv, pv):
            t, o = _run(fragment, shape, xv, pv)
            return float(np.sum(o.value*projection)), t.signature()
        blocks = []
        for name in ["input"] + list(p0):
            base = x0 if name == "input" else p0[name]
            chosen = rng.choice(base.size, min(samples, base.size), replace=False)
            worst, checked, excluded = 0.0, 0, 0
            for i in chosen:
                evals = []
                for delta in (h, -h):
                    value = base.copy()
                    value.flat[i] += delta
                    if name == "input":
                        evals.append(objective(value, p0))
                    else:
                        evals.append(objective(x0, OrderedDict(p0, **{name : value})))
                (lp, sp), (lm, sm) = evals
                if sp != sm:
                    excluded += 1
                    continue
                a = analytic[name].flat[i]
                n = (lp - lm)/(2*h)
                worst = max(worst, abs(a - n)/max(abs(a), abs(n), floor))
                checked += 1
            if excluded:
                logger.warning("%s: %i samples of block %s straddle a non-differentiable point" %
                               (fragment.name, excluded, name))
            blocks.append(BlockResult(name, worst, checked, excluded))
    return GradCheckReport(fragment.name, shape, tolerance, blocks, seed)

@accepts(Maybe(List(String)), Natural1, Positive, Natural1)
@returns(List(GradCheckReport))
@paranoidconfig(unit_test=False)
def certify(names=None, instances=20, tolerance=1e-4, samples=20):
    """Run grad_check on `instances` random small shapes of every named
    fragment (all of FRAGMENTS by default)."""
    names = list(FRAGMENTS) if names is None else names
    unknown = [n for n in names if n not in FRAGMENTS]
    if unknown:
        raise ConfigError("Unknown gradient check modules %s, expected one of %s" %
                          (", ".join(unknown), ", ".join(FRAGMENTS)))
    reports = []
    for name in names:
        fragment = FRAGMENTS[name]
        for seed in range(instances):
            shape = fragment.sample_shape(np.random.default_rng(seed))
            reports.append(grad_check(fragment, shape, tolerance, samples, seed))
    return reports
