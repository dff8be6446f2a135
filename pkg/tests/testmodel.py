# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Unit tests for network descriptions, builders and forward passes.

Call using:

  $ python3 -m pytest tests/testmodel.py
"""

from unittest import TestCase, main

import numpy as np

import l2sa
from l2sa import ops
from l2sa.model import (Layer, Skip, LayerGraph, build_baseline, build_l2sa,
                        build_baseline_cbam, build_vgg16_star, build_model, MODELS,
                        PUBLISHED_COUNTS, count_parameters, parameter_table,
                        init_parameters, zero_parameters, forward, predict, graph_diff)
from l2sa.autodiff import Tape
from l2sa.settings import Settings
from l2sa.exceptions import GraphError, ConfigError, ShapeError, PreconditionError

def fails(f, exception=Exception):
    failed = False
    try:
        f()
    except exception:
        failed = True
    if failed == False:
        raise ValueError("Error, function did not fail")

SMALL = dict(input_shape=(3, 32, 32), classes=3, channels=(4, 4, 4),
             kernels=(5, 3, 3), pools=(4, 2, 2), head=8)

class TestParameterCounts(TestCase):
    def test_first_convolution(self):
        """The 25x25 stem has 3*64*625 + 64 parameters"""
        shapes = build_baseline().parameter_shapes()
        assert shapes["conv1.weight"] == (64, 3, 25, 25)
        assert 3*64*625 + 64 == 120064
        assert int(np.prod(shapes["conv1.weight"])) + shapes["conv1.bias"][0] == 120064
    def test_ordering(self):
        """baseline < baseline+CBAM < l2-SA, by the attention blocks alone"""
        base = count_parameters(build_baseline())
        cbam = count_parameters(build_baseline_cbam())
        full = count_parameters(build_l2sa())
        assert base < cbam < full
        assert cbam - base == 3*(2*7*7 + 1)
        assert full - base == (25*25 + 1) + (13*13 + 1) + (9*9 + 1)
    def test_table(self):
        rows = parameter_table()
        assert [r[0] for r in rows] == ["baseline", "baseline_cbam", "l2sa", "vgg16_star"]
        assert rows[0][2] == 4003011 and rows[1][2] == 5474547 and rows[2][2] == 7293523
        for name, n, published, delta in rows:
            assert n - published == delta
            assert n == count_parameters(build_model(name))
        assert PUBLISHED_COUNTS["l2sab_cnn"] == 2199811
    def test_sab_kernels(self):
        """Per-site kernels change only the attention parameters"""
        a = count_parameters(build_l2sa(sab_kernels=[7, 7, 7]))
        b = count_parameters(build_l2sa())
        assert b - a == (25*25 - 49) + (13*13 - 49) + (9*9 - 49)

class TestGraphs(TestCase):
    def test_shapes(self):
        """Static shape inference of the full baseline"""
        shapes = dict(build_baseline().infer_shapes())
        assert shapes["conv1"] == (64, 256, 256)
        assert shapes["pool1"] == (64, 64, 64)
        assert shapes["pool2"] == (128, 32, 32)
        assert shapes["pool3"] == (256, 16, 16)
        assert shapes["flatten"] == (65536,)
        assert shapes["fc2"] == (3,)
    def test_attention_sites(self):
        """Attention follows each ReLU and precedes each pool"""
        g = build_l2sa()
        names = [l.name for l in g.layers]
        for i in (1, 2, 3):
            assert names.index("relu%i" % i) + 1 == names.index("sab%i" % i)
            assert names.index("sab%i" % i) + 1 == names.index("pool%i" % i)
        assert [(s.source, s.destination) for s in g.skips] == \
            [("sab1", "sab2"), ("sab2", "sab3"), ("sab1", "sab3")]
        assert [l.attrs["kernel"] for l in g.attention_layers()] == [25, 13, 9]
        assert build_model("l2sa_noskip").skips == []
        assert build_model("l2sa", skips_enabled=False).name == "l2sa_noskip"
        assert all(l.attrs["block"] == "l2sab_unnormalized"
                   for l in build_model("l2sa_nonorm").attention_layers())
        assert all(l.attrs["block"] == "cbam_spatial" for l in build_baseline_cbam().attention_layers())
    def test_vgg(self):
        g = build_vgg16_star()
        assert len([l for l in g.layers if l.kind == "conv"]) == 6
        shapes = dict(g.infer_shapes())
        assert [shapes["pool%i" % i] for i in (1, 2, 3)] == [(8, 128, 128), (16, 64, 64), (32, 32, 32)]
        assert g.output_shape() == (3,)
        assert g.skips == []
    def test_registry(self):
        assert list(MODELS) == ["baseline", "l2sa", "l2sa_noskip", "l2sa_nonorm",
                                "baseline_cbam", "vgg16_star"]
        fails(lambda : build_model("resnet"), ConfigError)
        # Options a builder does not take are ignored
        g = build_model("baseline", sab_kernels=[3, 3, 3], **SMALL)
        assert g.attention_layers() == []
    def test_text_round_trip(self):
        for name in MODELS:
            g = build_model(name, **SMALL)
            assert LayerGraph.from_text(g.to_text()) == g
        fails(lambda : LayerGraph.from_text("{not json"), GraphError)
    def test_invalid_graphs(self):
        layers = build_l2sa(**SMALL).layers
        fails(lambda : LayerGraph("x", (3, 32, 32), layers, [Skip("sab2", "sab1")]), GraphError)
        fails(lambda : LayerGraph("x", (3, 32, 32), layers, [Skip("conv1", "sab2")]), GraphError)
        fails(lambda : LayerGraph("x", (3, 32, 32), layers + [Layer("relu", "relu1")]), GraphError)
        fails(lambda : LayerGraph("x", (3, 32, 32), layers, [], 4), GraphError)
        fails(lambda : LayerGraph("x", (1, 32, 32), layers), GraphError)
        fails(lambda : build_l2sa(sab_kernels=[7, 7]), GraphError)
        fails(lambda : build_baseline((3, 8, 8), pools=(4, 4, 4)), GraphError)
    def test_skip_sizes(self):
        """Inputs that do not pool evenly between skip endpoints are
        rejected with the size they need"""
        options = dict(classes=3, channels=(2, 2, 2), kernels=(3, 3, 3), pools=(2, 2, 2), head=4)
        build_baseline((3, 30, 30), **options)
        build_model("l2sa_noskip", input_shape=(3, 30, 30), **options)
        with self.assertRaises(GraphError) as cm:
            build_l2sa((3, 30, 30), **options)
        assert "divisible by 4 (for example 32)" in str(cm.exception)
        g = build_l2sa((3, 32, 32), **options)
        assert [g.pooling_factor("sab%i" % i) for i in (1, 2, 3)] == [1, 2, 4]
    def test_diff(self):
        diff = graph_diff(build_baseline(**SMALL), build_l2sa(**SMALL))
        assert ("+", "sab1") in diff and ("+", "sab3") in diff
        assert ("+", "sab1->sab3") in diff
        assert not any(d[0] == "-" for d in diff)
        assert graph_diff(build_l2sa(**SMALL), build_model("l2sa_noskip", **SMALL)) == \
            [("-", "sab1->sab2"), ("-", "sab2->sab3"), ("-", "sab1->sab3")]

class TestForward(TestCase):
    def setUp(self):
        self.graph = build_l2sa(**SMALL)
        self.params = init_parameters(self.graph, 0)
        self.x = np.random.default_rng(0).uniform(0, 1, (5, 3, 32, 32)).astype(np.float32)
    def test_init(self):
        """Seeded Glorot weights, zero biases, in the configured precision"""
        p = init_parameters(self.graph, 0)
        assert p.equal(self.params)
        assert not p.equal(init_parameters(self.graph, 1))
        assert all(p[k].dtype == np.float32 for k in p)
        assert all(np.all(p[k] == 0) for k in p if k.endswith(".bias"))
        limit = np.sqrt(6/(3*25 + 4*25))
        assert np.all(np.abs(p["conv1.weight"]) <= limit)
        with Settings.override(precision='f64'):
            assert init_parameters(self.graph, 0)["fc1.weight"].dtype == np.float64
    def test_logits(self):
        out = forward(self.graph, self.params, self.x)
        assert out.shape == (5, 3)
        assert out.value.dtype == np.float32
        probs = predict(self.graph, self.params, self.x, batch_size=2)
        assert probs.shape == (5, 3)
        assert np.allclose(probs.sum(axis=1), 1, atol=1e-5)
    def test_zero_weights(self):
        """All-zero parameters give uniform class probabilities"""
        for name in MODELS:
            g = build_model(name, **SMALL)
            probs = predict(g, zero_parameters(g), self.x)
            assert np.allclose(probs, 1/3, atol=1e-6)
    def test_half_gates(self):
        """With zero attention parameters and zero biases every gate is
        one half, so the logits are the baseline's scaled by the gates"""
        base = build_baseline(**SMALL)
        for name, scale in [("l2sa_noskip", 1/8), ("l2sa", 1/64)]:
            g = build_model(name, **SMALL)
            p = init_parameters(g, 4)
            for l in g.attention_layers():
                p[l.name + ".weight"] = np.zeros_like(p[l.name + ".weight"])
            q = l2sa.Parameters({k : p[k] for k in base.parameter_shapes()})
            a = forward(g, p, self.x).value
            b = forward(base, q, self.x).value
            assert np.allclose(a, scale*b, rtol=1e-5, atol=1e-7)
    def test_batch_independent(self):
        """Each sample's logits do not depend on the rest of the batch"""
        whole = forward(self.graph, self.params, self.x).value
        single = forward(self.graph, self.params, self.x[2:3]).value
        assert np.allclose(whole[2:3], single, rtol=1e-5, atol=1e-6)
    def test_skips_change_output(self):
        noskip = build_model("l2sa_noskip", **SMALL)
        a = forward(self.graph, self.params, self.x).value
        b = forward(noskip, self.params, self.x).value
        assert not np.array_equal(a, b)
    def test_every_model_runs(self):
        for name in MODELS:
            g = build_model(name, **SMALL)
            out = forward(g, init_parameters(g, 3), self.x[:2])
            assert out.shape == (2, 3)
            assert np.all(np.isfinite(out.value))
    def test_errors(self):
        fails(lambda : forward(self.graph, self.params, self.x[:, :, :16, :16]), ShapeError)
        fails(lambda : forward(self.graph, zero_parameters(build_baseline(**SMALL)), self.x),
              PreconditionError)
    def test_end_to_end_gradient(self):
        """Tape gradients of a whole network agree with central differences"""
        with Settings.override(precision='f64'):
            params = init_parameters(self.graph, 2)
            x = self.x[:2].astype(np.float64)
            labels = np.array([0, 2])
            def loss(p):
                tape = Tape(p)
                value, _ = ops.softmax_cross_entropy(forward(self.graph, p, x, tape), labels)
                return tape, value
            tape, value = loss(params)
            grads = tape.backward(value)
            rng = np.random.default_rng(5)
            h = 1e-6
            checked = 0
            for name in ["conv1.weight", "sab1.weight", "sab2.bias", "sab3.weight", "fc1.weight", "fc2.bias"]:
                for i in rng.choice(params[name].size, min(3, params[name].size), replace=False):
                    results = []
                    for delta in (h, -h):
                        p = params.copy()
                        p[name].flat[i] += delta
                        t, v = loss(p)
                        results.append((float(v.value), t.signature()))
                    if results[0][1] != results[1][1] or results[0][1] != tape.signature():
                        continue
                    n = (results[0][0] - results[1][0])/(2*h)
                    a = grads[name].flat[i]
                    assert abs(a - n) <= 1e-4*max(abs(a), abs(n), 1e-4)
                    checked += 1
            assert checked >= 12

if __name__ == '__main__':
    main()
