# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Unit tests for the optimizer, training loop, checkpoints and the
latency benchmark.

Call using:

  $ python3 -m pytest tests/testtrain.py
"""

import os
import importlib
import struct
import shutil
import tempfile
from unittest import TestCase, main, mock

import numpy as np

import l2sa
from l2sa.autodiff import Parameters
from l2sa.model import build_model, build_l2sa, init_parameters, forward
from l2sa.data import synth_dataset, split
from l2sa.train import (TrainConfig, AdamState, adam_step, Metrics, evaluate,
                        evaluate_checkpoint, train_once, train, compare_runs,
                        run_ablation, _better)
from l2sa.checkpoint import MAGIC, save_checkpoint, read_checkpoint, load_checkpoint
from l2sa.benchmark import benchmark_inference
from l2sa.settings import Settings
from l2sa.exceptions import CheckpointError, PreconditionError, ShapeError, DatasetError

def fails(f, exception=Exception):
    failed = False
    try:
        f()
    except exception:
        failed = True
    if failed == False:
        raise ValueError("Error, function did not fail")

TINY = dict(input_shape=(3, 16, 16), classes=3, channels=(2, 2, 2),
            kernels=(3, 3, 3), pools=(2, 2, 2), head=4)

class TestAdam(TestCase):
    def test_first_step(self):
        """The first step is lr*g/(|g| + eps) after bias correction"""
        params = Parameters({"w" : np.array([0., 0., 0.])})
        grads = {"w" : np.array([1., -2., 0.])}
        new, state = adam_step(params, grads, AdamState(params), TrainConfig())
        assert np.allclose(new["w"], [-.01/1.1, .02/2.1, 0], rtol=1e-12)
        assert abs(new["w"][0] - (-0.009091)) < 1e-6
        assert state.t == 1
        assert np.all(params["w"] == 0)
    def test_second_step(self):
        cfg = TrainConfig(learning_rate=.1, adam_epsilon=1e-8)
        params = Parameters({"w" : np.array([1.])})
        p1, s1 = adam_step(params, {"w" : np.array([1.])}, AdamState(params), cfg)
        p2, s2 = adam_step(p1, {"w" : np.array([1.])}, s1, cfg)
        # A constant gradient moves by lr every step
        assert np.allclose(p2["w"], [.8], atol=1e-6)
        assert s2.t == 2
    def test_keeps_dtype(self):
        params = Parameters({"w" : np.ones(2, dtype=np.float32)})
        new, _ = adam_step(params, {"w" : np.ones(2, dtype=np.float32)}, AdamState(params), TrainConfig())
        assert new["w"].dtype == np.float32
    def test_errors(self):
        params = Parameters({"w" : np.ones(2), "b" : np.ones(1)})
        fails(lambda : adam_step(params, {"w" : np.ones(2)}, AdamState(params), TrainConfig()),
              PreconditionError)
        fails(lambda : adam_step(params, {"w" : np.ones(3), "b" : np.ones(1)}, AdamState(params),
                                 TrainConfig()), ShapeError)
    def test_config(self):
        cfg = TrainConfig()
        assert (cfg.learning_rate, cfg.adam_epsilon, cfg.batch_size, cfg.epochs) == (.01, .1, 64, 50)
        fails(lambda : TrainConfig(batch_size=0))
        fails(lambda : TrainConfig(adam_beta1=1))

class TestMetrics(TestCase):
    def test_confusion(self):
        m = Metrics.from_predictions(np.array([0, 0, 1, 2, 2]), np.array([0, 1, 1, 2, 0]), 3, .4)
        assert m.confusion.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]
        assert m.accuracy == .6
        assert np.allclose(m.precision(), [.5, .5, 1])
        assert np.allclose(m.recall(), [.5, 1, .5])
        kv = m.to_kv()
        assert "accuracy = 0.600000" in kv and "loss = 0.400000" in kv
        assert "confusion = 1,1,0;0,1,0;1,0,1" in kv
    def test_missing_class(self):
        """A class never predicted has precision 0, not NaN"""
        m = Metrics.from_predictions(np.array([0, 1]), np.array([0, 0]), 3)
        assert m.precision().tolist() == [.5, 0, 0]
        assert m.recall().tolist() == [1, 0, 0]
    def test_selection(self):
        """Higher accuracy wins, then lower loss, then the earlier epoch"""
        assert _better((.9, 1.), None)
        assert _better((.9, 1.), (.8, .1))
        assert _better((.9, .5), (.9, 1.))
        assert not _better((.9, 1.), (.9, 1.))
        assert not _better((.8, .1), (.9, 1.))
    def test_majority_class(self):
        """Always predicting the largest class scores its share"""
        labels = np.repeat([0, 1, 2], [708, 1426, 930])
        m = Metrics.from_predictions(labels, np.ones(len(labels), dtype=np.int64), 3)
        assert m.accuracy == 1426/3064
        assert abs(m.accuracy - .4654) < 1e-4
        assert m.recall().tolist() == [0, 1, 0]

class TestTraining(TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.dataset = split(synth_dataset(3, 8, 0, 16), (.5, .25, .25), 0)
        self.graph = build_l2sa(**TINY)
    def tearDown(self):
        shutil.rmtree(self.tmp)
    def test_overfit(self):
        """Small versions of every network reach full train accuracy on
        32 synthetic images within 200 epochs"""
        dataset = split(synth_dataset(3, 15, 0, 32), seed=0)
        assert len(dataset.indices("train")) == 32
        cfg = TrainConfig(learning_rate=.005, adam_epsilon=1e-4, batch_size=8, epochs=200)
        shrunk = dict(input_shape=(3, 32, 32), classes=3, channels=(4, 8, 8), head=16)
        backbone = dict(kernels=(5, 3, 3), pools=(4, 2, 2))
        for name in ["baseline", "l2sa", "baseline_cbam", "vgg16_star"]:
            # VGG16* keeps its own 3x3 kernels and 2x2 pools
            options = dict(shrunk, **backbone) if name != "vgg16_star" else shrunk
            graph = build_model(name, **options)
            assert l2sa.count_parameters(graph) <= 100000
            with Settings.override(verify=False):
                run = train_once(graph, dataset, cfg, 0)
            assert run.converged
            assert len(run.curve) == 200
            assert max(row["train_accuracy"] for row in run.curve) == 1.0, name
    def test_deterministic(self):
        """The same seed gives bit-identical checkpoints"""
        cfg = TrainConfig(batch_size=4, epochs=2)
        paths = []
        for i in range(2):
            report = train(self.graph, self.dataset, cfg, self.tmp, "run%i" % i)
            paths.append(os.path.join(self.tmp, "run%i" % i, "seed0", "checkpoint.l2sa"))
        with open(paths[0], "rb") as a, open(paths[1], "rb") as b:
            assert a.read() == b.read()
    def test_repeats(self):
        """Repeats use consecutive seeds and match single runs"""
        cfg = TrainConfig(batch_size=4, epochs=1, seed=3, repeats=2)
        with Settings.override(workers=2):
            report = train(self.graph, self.dataset, cfg)
        assert [r.seed for r in report.runs] == [3, 4]
        alone = train_once(self.graph, self.dataset, cfg, 4)
        assert alone.checkpoint.params.equal(report.runs[1].checkpoint.params)
        assert report.best in report.runs
        assert "runs = 2" in report.to_kv()
    def test_run_directory(self):
        cfg = TrainConfig(batch_size=4, epochs=2)
        report = train(self.graph, self.dataset, cfg, self.tmp)
        base = os.path.join(self.tmp, "l2sa")
        assert os.path.isfile(os.path.join(base, "report.txt"))
        for f in ("checkpoint.l2sa", "metrics.csv", "report.txt"):
            assert os.path.isfile(os.path.join(base, "seed0", f))
        with open(os.path.join(base, "seed0", "metrics.csv")) as f:
            rows = f.read().strip().splitlines()
        assert rows[0] == "epoch,train_loss,train_accuracy,val_loss,val_accuracy,gap"
        assert len(rows) == 3
        ckpt = read_checkpoint(os.path.join(base, "seed0", "checkpoint.l2sa"))
        assert ckpt.metadata["epoch"] == report.best.best_epoch
        assert ckpt.metadata["config"]["batch_size"] == 4
        m = evaluate_checkpoint(os.path.join(base, "seed0", "checkpoint.l2sa"), self.dataset)
        assert m.accuracy == report.best.test_accuracy
    def test_divergence(self):
        """A non-finite update is recorded as a failed run"""
        def nan_step(params, grads, state, cfg):
            return Parameters({k : np.full_like(v, np.nan) for k,v in params.items()}), state
        training = importlib.import_module("l2sa.train")
        with mock.patch.object(training, "adam_step", nan_step):
            report = train(self.graph, self.dataset, TrainConfig(batch_size=4, epochs=2), self.tmp)
        assert report.failed == 1
        assert report.best is None
        assert not report.runs[0].converged
        assert "failed = 1" in report.to_kv()
        assert "-" in compare_runs([report])
    def test_verification_failure(self):
        """A contract violated inside one run fails that run, not the training"""
        def nan_backward(tape, loss):
            return {k : np.full_like(v, np.nan) for k,v in tape.params.items()}
        training = importlib.import_module("l2sa.train")
        cfg = TrainConfig(batch_size=4, epochs=1, repeats=2)
        with Settings.override(verify=True, workers=1):
            with mock.patch.object(training.Tape, "backward", nan_backward):
                report = train(self.graph, self.dataset, cfg)
        assert report.failed == 2
        assert all(not r.converged and r.error for r in report.runs)
        with Settings.override(verify=True):
            bad = split(synth_dataset(3, 8, 0, 8), (.5, .25, .25), 0)
            fails(lambda : train(self.graph, bad, cfg), ShapeError)
    def test_zero_epochs(self):
        run = train_once(self.graph, self.dataset, TrainConfig(epochs=0), 0)
        assert run.converged and run.best_epoch == 0
        assert run.checkpoint.params.equal(init_parameters(self.graph, 0))
    def test_zero_learning_rate(self):
        """With no step size the parameters and validation metrics never move"""
        run = train_once(self.graph, self.dataset, TrainConfig(learning_rate=0, batch_size=4, epochs=3), 0)
        assert run.converged
        assert len(set(row["val_loss"] for row in run.curve)) == 1
        assert len(set(row["val_accuracy"] for row in run.curve)) == 1
        assert run.best_epoch == 1
        assert run.checkpoint.params.equal(init_parameters(self.graph, 0))
    def test_evaluate(self):
        params = init_parameters(self.graph, 0)
        m = evaluate(self.graph, params, self.dataset, None, 5)
        assert m.total == len(self.dataset)
        assert m.class_names == self.dataset.class_names
        other = split(synth_dataset(3, 8, 0, 8), (.5, .25, .25), 0)
        fails(lambda : evaluate(self.graph, params, other, "test"), ShapeError)
        no_test = split(synth_dataset(3, 1, 0, 16), (.5, .5, 0), 0)
        assert no_test.indices("test") == []
        fails(lambda : evaluate(self.graph, params, no_test, "test"), DatasetError)
    def test_ablation(self):
        cfg = TrainConfig(batch_size=4, epochs=1)
        reports, table = run_ablation(self.dataset, cfg, self.tmp, **TINY)
        assert [r.name for r in reports] == ["l2sa", "l2sa_noskip"]
        assert table.split("\n")[1].startswith("l2sa ")
        assert table.split("\n")[2].startswith("l2sa_noskip")
        assert os.path.isdir(os.path.join(self.tmp, "l2sa_noskip", "seed0"))

class TestCheckpoint(TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.path = os.path.join(self.tmp, "model.l2sa")
        self.graph = build_l2sa(**TINY)
        self.params = init_parameters(self.graph, 1)
    def tearDown(self):
        shutil.rmtree(self.tmp)
    def test_round_trip(self):
        save_checkpoint(self.graph, self.params, self.path, {"epoch" : 3})
        ckpt = read_checkpoint(self.path)
        assert ckpt.graph == self.graph
        assert ckpt.params.equal(self.params)
        assert ckpt.metadata == {"epoch" : 3}
        graph, params = load_checkpoint(self.path)
        x = np.random.default_rng(0).uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
        assert np.array_equal(forward(graph, params, x).value, forward(self.graph, self.params, x).value)
    def test_float64(self):
        params = self.params.astype(np.float64)
        save_checkpoint(self.graph, params, self.path)
        assert read_checkpoint(self.path).params.equal(params)
    def test_mismatch(self):
        other = init_parameters(build_model("baseline", **TINY), 0)
        fails(lambda : save_checkpoint(self.graph, other, self.path), CheckpointError)
        mixed = self.params.copy()
        mixed["fc2.bias"] = mixed["fc2.bias"].astype(np.float64)
        fails(lambda : save_checkpoint(self.graph, mixed, self.path), CheckpointError)
    def test_corrupt(self):
        fails(lambda : read_checkpoint(os.path.join(self.tmp, "missing.l2sa")), CheckpointError)
        save_checkpoint(self.graph, self.params, self.path)
        with open(self.path, "rb") as f:
            data = f.read()
        assert data[:4] == MAGIC
        for bad in [b"XXXX" + data[4:], data[:4] + struct.pack("<H", 99) + data[6:],
                    data[:-10], data + b"\0", data[:4] + data[4:7] + b"\xff\xff\xff\xff" + data[11:]]:
            with open(self.path, "wb") as f:
                f.write(bad)
            fails(lambda : read_checkpoint(self.path), CheckpointError)

class TestBenchmark(TestCase):
    def test_report(self):
        graph = build_l2sa(**TINY)
        report = benchmark_inference(graph, init_parameters(graph, 0), 30, 2, 4, 2)
        assert len(report.single_ms) == 30 and len(report.batch_ms) == 2
        assert report.median_ms <= report.p95_ms
        kv = report.to_kv()
        assert "iterations = 30" in kv and "batch_size = 4" in kv
        assert "parameters = %i" % l2sa.count_parameters(graph) in kv
        assert Settings.get('verify') == True
    def test_batch_warmup(self):
        """One untimed pass at the batch shape precedes the batch timings"""
        graph = build_l2sa(**TINY)
        calls = []
        def timed(graph, params, x):
            calls.append(len(x))
            return 1.0
        bench = importlib.import_module("l2sa.benchmark")
        with mock.patch.object(bench, "_timed", timed):
            report = benchmark_inference(graph, init_parameters(graph, 0), 30, 2, 8, 2)
        assert calls == [1]*32 + [8]*3
        assert len(report.single_ms) == 30 and len(report.batch_ms) == 2
    def test_batch_amortizes(self):
        """Batches process at least as many images per second as single passes"""
        graph = build_l2sa(**TINY)
        report = benchmark_inference(graph, init_parameters(graph, 0), 30, 3, 16, 3)
        assert report.batch_throughput >= report.single_throughput
    def test_stable(self):
        """Repeated benchmarks agree on the median to within 20%"""
        graph = build_l2sa(**TINY)
        params = init_parameters(graph, 0)
        a = benchmark_inference(graph, params, 60, 5, 4, 1).median_ms
        b = benchmark_inference(graph, params, 60, 5, 4, 1).median_ms
        assert abs(a - b) < .2*max(a, b)
    def test_too_few_iterations(self):
        graph = build_l2sa(**TINY)
        with Settings.override(verify=False):
            fails(lambda : benchmark_inference(graph, init_parameters(graph, 0), 10), PreconditionError)

if __name__ == '__main__':
    main()
