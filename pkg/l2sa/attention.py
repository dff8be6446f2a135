# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Spatial attention blocks.

The l2-normalized spatial attention block (l2-SAB) computes a gate

    M(F) = sigmoid(conv_KxK(l2(maxc(F)) - l2(minc(F))))

where maxc and minc reduce across channels and l2 scales each sample
of the reduced map to unit norm.  The gated output is M(F)*F, with the
single-channel gate broadcast over every channel.  The CBAM spatial
block instead concatenates the channel max and channel mean maps and
convolves the pair with a two-channel kernel.
"""

__all__ = ['ATTENTION_KINDS', 'AttentionKind', 'L2SabConfig',
           'l2_sab_attention', 'l2_sab_forward', 'l2sab_unnormalized',
           'cbam_spatial_attention', 'cbam_spatial_forward',
           'attention_parameter_shapes', 'apply_attention']

from paranoid.decorators import accepts, returns, ensures, paranoidclass
from paranoid.types import Natural1, Positive, Self, Boolean, Dict, String, Set, Maybe
from . import ops
from .autodiff import Variable
from .kernels import ConvSpec
from .exceptions import PreconditionError, ShapeError
from .settings import Settings

# The attention variant at each site of a network
ATTENTION_KINDS = ("l2sab", "cbam_spatial", "l2sab_unnormalized", "none")

AttentionKind = Set(list(ATTENTION_KINDS))

@paranoidclass
class L2SabConfig:
    """Configuration of one l2-SAB block.

    `kernel` is the size K of the square single-channel convolution,
    `epsilon` the guard of the l2 normalization (None means the
    `l2_epsilon` setting), and `normalize=False` removes both l2
    layers, leaving sigmoid(conv(maxc(F) - minc(F))).
    """
    @accepts(Self, Natural1, Maybe(Positive), Boolean)
    def __init__(self, kernel=7, epsilon=None, normalize=True):
        self.kernel = kernel
        self.epsilon = epsilon if epsilon is not None else Settings.get('l2_epsilon')
        self.normalize = normalize
    @staticmethod
    def _test(v):
        Natural1().test(v.kernel)
        Positive().test(v.epsilon)
        assert v.normalize in [True, False]
    @staticmethod
    def _generate():
        yield L2SabConfig()
        yield L2SabConfig(1)
        yield L2SabConfig(4, 1e-6)
        yield L2SabConfig(3, normalize=False)
    def conv_spec(self):
        return ConvSpec(1, 1, self.kernel, 1, "same")
    def parameter_shapes(self):
        return {"weight" : (1, 1, self.kernel, self.kernel), "bias" : (1,)}
    def __repr__(self):
        return "L2SabConfig(kernel=%i, epsilon=%g, normalize=%s)" % \
            (self.kernel, self.epsilon, self.normalize)

@accepts(AttentionKind, Natural1)
@returns(Dict(String, tuple))
def attention_parameter_shapes(kind, kernel):
    """Parameter slots of an attention block of the given kind."""
    if kind in ("l2sab", "l2sab_unnormalized"):
        return L2SabConfig(kernel).parameter_shapes()
    if kind == "cbam_spatial":
        return {"weight" : (1, 2, kernel, kernel), "bias" : (1,)}
    return {}

def _check_block(op, F, params, shapes):
    if F.value.ndim != 4:
        raise ShapeError(op, "input rank", 4, F.value.ndim)
    for name, shape in shapes.items():
        if name not in params:
            raise PreconditionError("%s: missing parameter '%s'" % (op, name))
        if params[name].shape != shape:
            raise ShapeError(op, name, shape, params[name].shape)

@accepts(Variable, L2SabConfig, Dict(String, Variable))
@returns(Variable)
@ensures("return.shape == (F.shape[0], 1) + F.shape[2:]")
@ensures("np.all(return.value > 0) and np.all(return.value < 1)")
def l2_sab_attention(F, cfg, params):
    """The attention map of an l2-SAB block, shape (B,1,H,W).

    `params` holds the "weight" (1,1,K,K) and "bias" (1,) Variables of
    the block's convolution.
    """
    _check_block("l2_sab_attention", F, params, cfg.parameter_shapes())
    fmax = ops.channel_reduce(F, "max")
    fmin = ops.channel_reduce(F, "min")
    if cfg.normalize:
        fmax = ops.l2_normalize(fmax, cfg.epsilon)
        fmin = ops.l2_normalize(fmin, cfg.epsilon)
    score = ops.conv2d(ops.subtract(fmax, fmin), params["weight"],
                       params["bias"], cfg.conv_spec())
    return ops.sigmoid(score)

@accepts(Variable, L2SabConfig, Dict(String, Variable))
@returns(Variable)
@ensures("return.shape == F.shape")
@ensures("np.all(np.abs(return.value) <= np.abs(F.value))")
def l2_sab_forward(F, cfg, params):
    """Gate every channel of `F` by its l2-SAB attention map."""
    return ops.multiply(l2_sab_attention(F, cfg, params), F)

@accepts(Variable, Natural1, Dict(String, Variable))
@returns(Variable)
@ensures("return.shape == F.shape")
def l2sab_unnormalized(F, K, params):
    """l2-SAB with the two l2 normalization layers removed."""
    return l2_sab_forward(F, L2SabConfig(K, normalize=False), params)

@accepts(Variable, Natural1, Dict(String, Variable))
@returns(Variable)
@ensures("return.shape == (F.shape[0], 1) + F.shape[2:]")
def cbam_spatial_attention(F, K, params):
    """The CBAM spatial attention map: sigmoid of a KxK convolution of
    the stacked channel max and channel mean maps."""
    _check_block("cbam_spatial_attention", F, params,
                 attention_parameter_shapes("cbam_spatial", K))
    pooled = ops.concat_channels(ops.channel_reduce(F, "max"),
                                 ops.channel_reduce(F, "mean"))
    score = ops.conv2d(pooled, params["weight"], params["bias"],
                       ConvSpec(2, 1, K, 1, "same"))
    return ops.sigmoid(score)

@accepts(Variable, Natural1, Dict(String, Variable))
@returns(Variable)
@ensures("return.shape == F.shape")
@ensures("np.all(np.abs(return.value) <= np.abs(F.value))")
def cbam_spatial_forward(F, K, params):
    return ops.multiply(cbam_spatial_attention(F, K, params), F)

def apply_attention(kind, F, kernel, params):
    """Attention map of the block `kind` at one network site, or None
    when the site has no attention."""
    if kind == "l2sab":
        return l2_sab_attention(F, L2SabConfig(kernel), params)
    if kind == "l2sab_unnormalized":
        return l2_sab_attention(F, L2SabConfig(kernel, normalize=False), params)
    if kind == "cbam_spatial":
        return cbam_spatial_attention(F, kernel, params)
    return None
