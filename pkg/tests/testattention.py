# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Unit tests for the spatial attention blocks.

Call using:

  $ python3 -m pytest tests/testattention.py
"""

from unittest import TestCase, main

import numpy as np

import l2sa
import l2sa.kernels as K
from l2sa.autodiff import Tape
from l2sa.attention import (L2SabConfig, l2_sab_attention, l2_sab_forward,
                            l2sab_unnormalized, cbam_spatial_attention,
                            cbam_spatial_forward, attention_parameter_shapes,
                            apply_attention)
from l2sa.exceptions import PreconditionError, ShapeError

def fails(f, exception=Exception):
    failed = False
    try:
        f()
    except exception:
        failed = True
    if failed == False:
        raise ValueError("Error, function did not fail")

def block_params(tape, channels=1, kernel=7, seed=0, bias=0.):
    rng = np.random.default_rng(seed)
    return {"weight" : tape.constant(rng.standard_normal((1, channels, kernel, kernel))),
            "bias" : tape.constant(np.array([bias]))}

class TestL2Sab(TestCase):
    def setUp(self):
        self.tape = Tape(record=False)
        self.rng = np.random.default_rng(10)
    def test_single_channel(self):
        """A single channel map gives sigmoid(bias) everywhere"""
        F = self.tape.constant(self.rng.standard_normal((2, 1, 6, 6)))
        M = l2_sab_attention(F, L2SabConfig(7), block_params(self.tape))
        assert M.shape == (2, 1, 6, 6)
        assert np.all(M.value == .5)
        M = l2_sab_attention(F, L2SabConfig(3), block_params(self.tape, kernel=3, bias=1.))
        assert np.allclose(M.value, 1/(1 + np.exp(-1.)), rtol=1e-15)
    def test_channel_constant(self):
        """Channels that agree give exactly one half with zero bias"""
        plane = self.rng.standard_normal((2, 1, 5, 5))
        F = self.tape.constant(np.repeat(plane, 4, axis=1))
        M = l2_sab_attention(F, L2SabConfig(7), block_params(self.tape))
        assert np.all(M.value == .5)
    def test_scale_invariance(self):
        """Positive scaling of the input leaves the map unchanged"""
        F = self.rng.standard_normal((2, 8, 9, 9))
        params = block_params(self.tape, seed=1, bias=.3)
        M1 = l2_sab_attention(self.tape.constant(F), L2SabConfig(7), params).value
        for scale in [1e-3, .5, 7., 1e4]:
            M2 = l2_sab_attention(self.tape.constant(scale*F), L2SabConfig(7), params).value
            assert np.max(np.abs(M1 - M2)) < 1e-6
    def test_cbam_not_scale_invariant(self):
        F = self.rng.standard_normal((2, 8, 9, 9))
        params = block_params(self.tape, channels=2, seed=1, bias=.3)
        M1 = cbam_spatial_attention(self.tape.constant(F), 7, params).value
        M2 = cbam_spatial_attention(self.tape.constant(10*F), 7, params).value
        assert np.max(np.abs(M1 - M2)) > 1e-3
    def test_unnormalized_not_scale_invariant(self):
        F = self.rng.standard_normal((2, 8, 9, 9))
        params = block_params(self.tape, seed=1)
        M1 = l2sab_unnormalized(self.tape.constant(F), 7, params).value
        M2 = l2sab_unnormalized(self.tape.constant(10*F), 7, params).value
        assert np.max(np.abs(M1 - M2)) > 1e-3
    def test_composition(self):
        """The map is sigmoid(conv(l2(max) - l2(min)))"""
        F = self.rng.standard_normal((3, 5, 8, 8))
        params = block_params(self.tape, kernel=5, seed=2, bias=-.2)
        M = l2_sab_attention(self.tape.constant(F), L2SabConfig(5), params).value
        diff = K.l2_normalize_per_sample(F.max(axis=1, keepdims=True)) - \
            K.l2_normalize_per_sample(F.min(axis=1, keepdims=True))
        expected = K.sigmoid(K.conv2d(diff, params["weight"].value, params["bias"].value,
                                      K.ConvSpec(1, 1, 5)))
        assert np.array_equal(M, expected)
    def test_gating(self):
        """Gated features never exceed the input in magnitude"""
        F = self.rng.standard_normal((2, 6, 7, 7))*5
        out = l2_sab_forward(self.tape.constant(F), L2SabConfig(7), block_params(self.tape, seed=3)).value
        assert out.shape == F.shape
        assert np.all(np.abs(out) <= np.abs(F))
        out = cbam_spatial_forward(self.tape.constant(F), 7, block_params(self.tape, channels=2)).value
        assert np.all(np.abs(out) <= np.abs(F))
    def test_even_kernel(self):
        F = self.tape.constant(self.rng.standard_normal((1, 3, 6, 5)))
        M = l2_sab_attention(F, L2SabConfig(4), block_params(self.tape, kernel=4))
        assert M.shape == (1, 1, 6, 5)
    def test_zero_input(self):
        """An all-zero map stays finite"""
        F = self.tape.constant(np.zeros((1, 4, 5, 5)))
        M = l2_sab_attention(F, L2SabConfig(7), block_params(self.tape))
        assert np.all(M.value == .5)
    def test_float32(self):
        F = self.tape.constant(self.rng.standard_normal((1, 3, 6, 6)).astype(np.float32))
        params = {k : self.tape.constant(v.value.astype(np.float32)) for k,v in block_params(self.tape).items()}
        assert l2_sab_forward(F, L2SabConfig(7), params).value.dtype == np.float32
    def test_parameter_errors(self):
        F = self.tape.constant(np.ones((1, 2, 5, 5)))
        fails(lambda : l2_sab_attention(F, L2SabConfig(7), {"weight" : block_params(self.tape)["weight"]}),
              PreconditionError)
        fails(lambda : l2_sab_attention(F, L2SabConfig(5), block_params(self.tape)), ShapeError)
        fails(lambda : cbam_spatial_attention(F, 7, block_params(self.tape)), ShapeError)
    def test_parameter_shapes(self):
        assert L2SabConfig(7).parameter_shapes() == {"weight" : (1, 1, 7, 7), "bias" : (1,)}
        assert attention_parameter_shapes("cbam_spatial", 7) == {"weight" : (1, 2, 7, 7), "bias" : (1,)}
        assert attention_parameter_shapes("l2sab_unnormalized", 3) == {"weight" : (1, 1, 3, 3), "bias" : (1,)}
        assert attention_parameter_shapes("none", 3) == {}
        # One K x K kernel and a bias: 50 parameters at K = 7
        assert sum(int(np.prod(s)) for s in L2SabConfig(7).parameter_shapes().values()) == 50
    def test_apply_attention(self):
        F = self.tape.constant(self.rng.standard_normal((1, 3, 5, 5)))
        assert apply_attention("none", F, 3, {}) is None
        M = apply_attention("l2sab", F, 7, block_params(self.tape))
        assert np.array_equal(M.value, l2_sab_attention(F, L2SabConfig(7), block_params(self.tape)).value)

if __name__ == '__main__':
    main()
