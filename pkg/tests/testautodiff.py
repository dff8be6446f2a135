# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Unit tests for the tape, the differentiable operations and the
gradient checker.

Call using:

  $ python3 -m pytest tests/testautodiff.py
"""

from unittest import TestCase, main

import numpy as np

import l2sa
from l2sa import ops
from l2sa.autodiff import Tape, Parameters
from l2sa.kernels import ConvSpec
from l2sa.gradcheck import FRAGMENTS, grad_check, certify
from l2sa.settings import Settings
from l2sa.exceptions import EngineError, PreconditionError, ShapeError, ConfigError

def fails(f, exception=Exception):
    failed = False
    try:
        f()
    except exception:
        failed = True
    if failed == False:
        raise ValueError("Error, function did not fail")

class TestParameters(TestCase):
    def test_slots(self):
        """Setting a slot resets its gradient"""
        p = Parameters({"w" : np.ones((2, 3)), "b" : np.zeros(3)})
        assert p.names() == ["w", "b"]
        assert p.count() == 9
        p.grads["w"] += 1
        p["w"] = np.full((2, 3), 2.)
        assert np.all(p.grads["w"] == 0)
    def test_copy_and_equal(self):
        p = Parameters({"w" : np.arange(3.)})
        q = p.copy()
        assert p.equal(q)
        q["w"][0] = 5
        assert not p.equal(q)
        assert not p.equal(p.astype(np.float32))

class TestTape(TestCase):
    def test_product_gradient(self):
        """d/dw sum(w*x) = x"""
        x = np.arange(6.).reshape(2, 3)
        p = Parameters({"w" : np.ones((2, 3))})
        tape = Tape(p)
        loss = ops.total(ops.multiply(tape.parameter("w"), tape.constant(x)))
        grads = tape.backward(loss)
        assert np.array_equal(grads["w"], x)
        assert np.array_equal(p.grads["w"], x)
    def test_square(self):
        """The gradient of the squared norm is twice the vector"""
        w = np.array([1.5, -2., 0., 3.])
        tape = Tape(Parameters({"w" : w}))
        v = tape.parameter("w")
        grads = tape.backward(ops.total(ops.multiply(v, v)))
        assert np.array_equal(grads["w"], 2*w)
    def test_chain(self):
        """Gradients flow through a dense layer and a sigmoid"""
        rng = np.random.default_rng(0)
        x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
        tape = Tape(Parameters({"w" : w, "b" : b}))
        out = ops.sigmoid(ops.dense(tape.watch(x, "x"), tape.parameter("w"), tape.parameter("b")))
        grads = tape.backward(ops.total(out))
        s = 1/(1 + np.exp(-(x @ w + b)))
        d = s*(1 - s)
        assert np.allclose(grads["b"], d.sum(axis=0))
        assert np.allclose(grads["w"], x.T @ d)
        assert np.allclose(grads["x"], d @ w.T)
    def test_fan_out(self):
        """A value used twice accumulates both gradients"""
        tape = Tape()
        x = tape.watch(np.array([1., 2., 3.]), "x")
        grads = tape.backward(ops.total(x*x + x))
        assert np.array_equal(grads["x"], np.array([3., 5., 7.]))
    def test_unreached_parameters(self):
        """Parameters the loss does not depend on get zero gradient"""
        tape = Tape(Parameters({"a" : np.ones(2), "b" : np.ones(3)}))
        grads = tape.backward(ops.total(tape.parameter("a")))
        assert np.array_equal(grads["a"], np.ones(2))
        assert np.array_equal(grads["b"], np.zeros(3))
    def test_repeatable(self):
        """Calling backward twice gives the same gradients"""
        tape = Tape(Parameters({"w" : np.array([2., -1.])}))
        loss = ops.total(ops.relu(tape.parameter("w")))
        g1 = tape.backward(loss)
        g2 = tape.backward(loss)
        assert np.array_equal(g1["w"], g2["w"])
        assert g1["w"].tolist() == [1, 0]
    def test_errors(self):
        """Non-scalar losses, foreign variables and inference tapes"""
        tape = Tape()
        x = tape.watch(np.ones(3))
        fails(lambda : tape.backward(x), ShapeError)
        other = Tape()
        fails(lambda : other.backward(ops.total(x)), PreconditionError)
        fails(lambda : ops.add(x, other.constant(np.ones(3))), PreconditionError)
        fails(lambda : tape.parameter("missing"), EngineError)
        inference = Tape(record=False)
        y = ops.total(inference.watch(np.ones(3)))
        fails(lambda : inference.backward(y), EngineError)
    def test_broadcast_mismatch(self):
        tape = Tape()
        fails(lambda : ops.multiply(tape.constant(np.ones((2, 3))), tape.constant(np.ones((4,)))), ShapeError)
    def test_broadcast_gradient(self):
        """A (B,1,H,W) gate times a (B,C,H,W) map sums over channels"""
        rng = np.random.default_rng(1)
        gate, F = rng.uniform(size=(2, 1, 3, 3)), rng.standard_normal((2, 4, 3, 3))
        tape = Tape()
        grads = tape.backward(ops.total(ops.multiply(tape.watch(gate, "gate"), tape.watch(F, "F"))))
        assert np.allclose(grads["gate"], F.sum(axis=1, keepdims=True))
        assert np.allclose(grads["F"], np.broadcast_to(gate, F.shape))
    def test_signature(self):
        """Decision signatures follow the ReLU pattern, not the values"""
        def run(values):
            tape = Tape()
            ops.relu(tape.watch(np.array(values)))
            return tape.signature()
        assert run([1., -1.]) == run([2., -3.])
        assert run([1., -1.]) != run([-1., 1.])
    def test_argmax_signature(self):
        def run(values):
            tape = Tape()
            ops.channel_reduce(tape.watch(np.array(values).reshape(1, 3, 1, 1)), "max")
            return tape.signature()
        assert run([1., 2., 0.]) == run([0., 5., 1.])
        assert run([1., 2., 0.]) != run([3., 2., 0.])
    def test_softmax_loss(self):
        """Loss is ln 3 on equal logits, gradient (p - onehot)/B"""
        tape = Tape()
        logits = tape.watch(np.zeros((2, 3)), "z")
        loss, probs = ops.softmax_cross_entropy(logits, np.array([0, 1]))
        assert np.isclose(float(loss.value), np.log(3))
        grads = tape.backward(loss)
        assert np.allclose(grads["z"], (np.full((2, 3), 1/3) - np.eye(3)[[0, 1]])/2)
    def test_concat(self):
        tape = Tape()
        a = tape.watch(np.ones((1, 1, 2, 2)), "a")
        b = tape.watch(np.zeros((1, 2, 2, 2)), "b")
        out = ops.concat_channels(a, b)
        assert out.shape == (1, 3, 2, 2)
        grads = tape.backward(ops.total(ops.multiply(out, tape.constant(np.arange(12.).reshape(1, 3, 2, 2)))))
        assert grads["a"].ravel().tolist() == [0, 1, 2, 3]
        assert grads["b"].ravel().tolist() == list(range(4, 12))
    def test_inference_matches(self):
        """Recording does not change forward values"""
        rng = np.random.default_rng(2)
        x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        spec = ConvSpec(2, 3, 3)
        outs = []
        for record in [True, False]:
            tape = Tape(record=record)
            outs.append(ops.relu(ops.conv2d(tape.constant(x), tape.constant(w), tape.constant(b), spec)).value)
        assert np.array_equal(outs[0], outs[1])

class TestGradCheck(TestCase):
    def test_every_fragment(self):
        """Every fragment passes at its default shape"""
        for name, fragment in FRAGMENTS.items():
            report = grad_check(fragment)
            assert report.passed, report.to_table()
            assert report.max_error < 1e-4
    def test_float64_forced(self):
        """Checks run in 64 bit whatever the precision setting"""
        with Settings.override(precision='f32'):
            report = grad_check(FRAGMENTS["l2sab"])
            assert Settings.get('precision') == 'f32'
        assert report.passed
    def test_exclusion(self):
        """Samples straddling a ReLU kink are excluded, not failed"""
        x = np.array([[[[1e-7, -1e-7], [2., -2.]]]])
        report = grad_check(FRAGMENTS["relu"], x=x, samples=4, h=1e-5)
        assert report.excluded == 2
        assert report.blocks[0].checked == 2
        assert report.passed
    def test_pooling_tie(self):
        """Two equal maxima in one window are excluded"""
        x = np.array([[[[1., 1.], [0., 0.]]]])
        report = grad_check(FRAGMENTS["maxpool"], x=x, samples=4)
        assert report.excluded == 2
        assert report.passed
    def test_dense_tight(self):
        """A linear layer passes far below the default tolerance"""
        assert grad_check(FRAGMENTS["dense"], tolerance=1e-6).passed
    def test_detects_wrong_gradient(self):
        """A broken vjp is caught"""
        from l2sa.gradcheck import Fragment
        def broken(x, p, s):
            out = np.asarray(x.value*3)
            return x.tape.push("broken", out, (x,), lambda g, needs : (2*g,))
        report = grad_check(Fragment("broken", (2, 3), broken))
        assert not report.passed
        assert abs(report.max_error - 1/3) < 1e-6
    def test_small_gradients(self):
        """Errors on tiny gradients are measured relative to 1e-8"""
        from l2sa.gradcheck import Fragment
        def scaled(x, p, s):
            out = np.asarray(x.value*1e-9)
            return x.tape.push("scaled", out, (x,), lambda g, needs : (2e-9*g,))
        fragment = Fragment("scaled", (2, 3), scaled)
        report = grad_check(fragment)
        assert not report.passed
        assert report.max_error > 1e-3
        # A coarse floor hides the same error
        assert grad_check(fragment, floor=1e-2).passed
    def test_reports(self):
        report = grad_check(FRAGMENTS["dense"], seed=3)
        kv = report.to_kv()
        assert "dense.seed3.input.max_rel_error" in kv
        assert "dense.seed3.weight.checked" in kv
        assert kv.endswith("passed = true")
        assert "result: pass" in report.to_table()
    def test_certify_unknown(self):
        fails(lambda : certify(["nonexistent"]), ConfigError)
    def test_certify_everything(self):
        """Twenty random small shapes of every differentiable operation"""
        with Settings.override(verify=False):
            reports = certify(instances=20)
        assert len(reports) == 20*len(FRAGMENTS)
        failed = [r.to_table() for r in reports if not r.passed]
        assert not failed, "\n\n".join(failed)

if __name__ == '__main__':
    main()
