# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Training, evaluation and the repeated best-of protocol.

Training minimizes the mean softmax cross-entropy with Adam.  Each
epoch shuffles the training split with a generator seeded from the run
seed, steps through mini-batches (the final partial batch is kept),
and evaluates the validation split.  The parameters of the epoch with
the best validation accuracy are kept, ties going to the lower
validation loss and then to the earlier epoch.

A run directory holds

    <out>/<name>/report.txt
    <out>/<name>/seed<k>/checkpoint.l2sa
    <out>/<name>/seed<k>/metrics.csv
    <out>/<name>/seed<k>/report.txt
"""

__all__ = ['TrainConfig', 'AdamState', 'adam_step', 'Metrics', 'evaluate',
           'evaluate_checkpoint', 'RunRecord', 'TrainReport', 'train_once',
           'train', 'compare_runs', 'run_ablation', 'write_curve']

import os
import csv
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from paranoid.decorators import accepts, returns, ensures, paranoidclass, paranoidconfig
from paranoid.types import (Self, Positive, Natural0, Natural1, Integer, Range,
                            RangeOpen, Dict, String, Tuple, Maybe, Unchecked)
from paranoid.exceptions import VerifyError

from . import ops
from .autodiff import Tape, Parameters
from .model import LayerGraph, forward, init_parameters, build_model
from .checkpoint import Checkpoint, save_checkpoint, read_checkpoint
from .data import Dataset
from .types import Tensor, Labels, FilePath
from .kernels import softmax_cross_entropy
from .exceptions import EngineError, ShapeError, PreconditionError, NonFiniteError, DatasetError
from .settings import Settings

logger = logging.getLogger(__name__)

@paranoidclass
class TrainConfig:
    """Optimizer and schedule settings; the defaults are the published
    recipe (Adam, learning rate 0.01, epsilon 0.1, batch 64, 50 epochs)."""
    @accepts(Self, Range(0, 10), Positive, RangeOpen(0, 1), RangeOpen(0, 1),
             Natural1, Natural0, Integer, Natural1)
    def __init__(self, learning_rate=0.01, adam_epsilon=0.1, adam_beta1=0.9,
                 adam_beta2=0.999, batch_size=64, epochs=50, seed=0, repeats=1):
        self.learning_rate = learning_rate
        self.adam_epsilon = adam_epsilon
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.repeats = repeats
    @staticmethod
    def _test(v):
        assert v.learning_rate >= 0 and v.adam_epsilon > 0, "Rates must be positive"
        assert 0 < v.adam_beta1 < 1 and 0 < v.adam_beta2 < 1
        Natural1().test(v.batch_size)
        Natural0().test(v.epochs)
        Natural1().test(v.repeats)
    @staticmethod
    def _generate():
        yield TrainConfig()
        yield TrainConfig(learning_rate=0, epochs=1)
        yield TrainConfig(learning_rate=.001, adam_epsilon=1e-8, batch_size=8, epochs=2, repeats=2)
    def to_dict(self):
        return dict(vars(self))

class AdamState:
    """First and second moment estimates and the step count."""
    def __init__(self, params, m=None, v=None, t=0):
        self.m = m if m is not None else {k : np.zeros(p.shape) for k,p in params.items()}
        self.v = v if v is not None else {k : np.zeros(p.shape) for k,p in params.items()}
        self.t = t
    @staticmethod
    def _generate():
        yield AdamState(Parameters({"w" : np.zeros(3)}))

@accepts(Unchecked(Parameters), Dict(String, Tensor), Unchecked(AdamState), TrainConfig)
@returns(Tuple(Unchecked(Parameters), Unchecked(AdamState)))
@ensures("all(return[0][k].shape == params[k].shape for k in params)")
@paranoidconfig(unit_test=False)
def adam_step(params, grads, state, cfg):
    """One Adam update with bias correction, returning new parameters
    and state.  The inputs are not modified.

    p <- p - lr * mhat / (sqrt(vhat) + eps)
    """
    t = state.t + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_params, m, v = Parameters(), {}, {}
    for k, p in params.items():
        if k not in grads or k not in state.m:
            raise PreconditionError("adam_step: no gradient or state for %s" % k)
        g = grads[k].astype(np.float64)
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError("adam_step", k, p.shape, g.shape)
        m[k] = b1*state.m[k] + (1 - b1)*g
        v[k] = b2*state.v[k] + (1 - b2)*g*g
        mhat = m[k]/(1 - b1**t)
        vhat = v[k]/(1 - b2**t)
        step = cfg.learning_rate*mhat/(np.sqrt(vhat) + cfg.adam_epsilon)
        new_params[k] = (p - step).astype(p.dtype)
    return new_params, AdamState(new_params, m, v, t)

@paranoidclass
class Metrics:
    """Classification metrics from a confusion matrix whose rows are
    true classes and columns predicted classes.

    `curve`, if present, holds one dict per epoch with keys epoch,
    train_loss, train_accuracy, val_loss, val_accuracy and gap (train
    minus validation accuracy).
    """
    def __init__(self, confusion, loss=None, class_names=None, curve=None):
        self.confusion = confusion
        self.loss = loss
        self.class_names = tuple(class_names) if class_names is not None else \
            tuple(str(i) for i in range(len(confusion)))
        self.curve = list(curve or [])
    @staticmethod
    def _test(v):
        c = v.confusion
        assert isinstance(c, np.ndarray) and c.ndim == 2 and c.shape[0] == c.shape[1]
        assert np.issubdtype(c.dtype, np.integer) and np.all(c >= 0)
        assert len(v.class_names) == c.shape[0]
    @staticmethod
    def _generate():
        yield Metrics.from_predictions(np.array([0, 1, 2]), np.array([0, 1, 2]), 3)
        yield Metrics.from_predictions(np.array([0, 0, 1, 2]), np.array([1, 0, 1, 1]), 3, .5)
    @staticmethod
    def from_predictions(labels, predicted, classes, loss=None, class_names=None):
        confusion = np.zeros((classes, classes), dtype=np.int64)
        np.add.at(confusion, (labels, predicted), 1)
        return Metrics(confusion, loss, class_names)
    @property
    def total(self):
        return int(self.confusion.sum())
    @property
    def accuracy(self):
        return float(np.trace(self.confusion)/self.total) if self.total else 0.0
    def precision(self):
        predicted = self.confusion.sum(axis=0)
        return np.where(predicted > 0, np.diag(self.confusion)/np.maximum(predicted, 1), 0.0)
    def recall(self):
        actual = self.confusion.sum(axis=1)
        return np.where(actual > 0, np.diag(self.confusion)/np.maximum(actual, 1), 0.0)
    def to_kv(self):
        """Key-value report lines."""
        lines = ["accuracy = %.6f" % self.accuracy, "samples = %i" % self.total]
        if self.loss is not None:
            lines.append("loss = %.6f" % self.loss)
        for name, p, r in zip(self.class_names, self.precision(), self.recall()):
            lines += ["precision.%s = %.6f" % (name, p), "recall.%s = %.6f" % (name, r)]
        lines.append("confusion = %s" % ";".join(",".join(str(c) for c in row) for row in self.confusion))
        return "\n".join(lines)
    def write_csv(self, path):
        write_curve(self.curve, path)

@accepts(LayerGraph, Unchecked(Parameters), Unchecked(np.ndarray), Labels, Natural1)
@returns(Tuple(Unchecked(np.ndarray), Unchecked(float)))
@paranoidconfig(unit_test=False)
def _predictions(graph, params, x, y, batch_size):
    """Predicted classes and mean loss over (x, y), without recording."""
    predicted, total = [], 0.0
    for i in range(0, len(x), batch_size):
        logits = forward(graph, params, x[i:i + batch_size])
        loss, probs = softmax_cross_entropy(logits.value, y[i:i + batch_size])
        predicted.append(probs.argmax(axis=1))
        total += loss*len(probs)
    return np.concatenate(predicted), total/len(x)

@accepts(LayerGraph, Unchecked(Parameters), Dataset, Maybe(String), Natural1)
@returns(Metrics)
@ensures("return.accuracy == np.trace(return.confusion)/np.sum(return.confusion)")
@paranoidconfig(unit_test=False)
def evaluate(graph, params, dataset, split_name="test", batch_size=64):
    """Metrics of the network on one split (None means every record)."""
    x, y = dataset.arrays(split_name)
    if x.shape[1:] != graph.input_shape:
        raise ShapeError("evaluate", "input", graph.input_shape, x.shape[1:])
    predicted, loss = _predictions(graph, params, x, y, batch_size)
    return Metrics.from_predictions(y, predicted, graph.class_count, loss, dataset.class_names)

def evaluate_checkpoint(path, dataset, split_name="test", batch_size=64):
    ckpt = read_checkpoint(path)
    return evaluate(ckpt.graph, ckpt.params, dataset, split_name, batch_size)

def write_curve(curve, path):
    """Write per-epoch rows as CSV."""
    fields = ["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "gap"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in curve:
            writer.writerow({k : row[k] for k in fields})

class RunRecord:
    """The outcome of one training run (one seed)."""
    def __init__(self, seed, converged=True, best_epoch=None, val_accuracy=None,
                 val_loss=None, test=None, checkpoint=None, curve=None, error=None):
        self.seed = seed
        self.converged = converged
        self.best_epoch = best_epoch
        self.val_accuracy = val_accuracy
        self.val_loss = val_loss
        self.test = test
        self.checkpoint = checkpoint
        self.curve = list(curve or [])
        self.error = error
    @property
    def test_accuracy(self):
        return self.test.accuracy if self.test is not None else None
    def score(self):
        """Sort key for picking the best run."""
        acc = self.test_accuracy if self.test is not None else self.val_accuracy
        return (acc, self.val_accuracy, -self.seed)
    def to_kv(self):
        lines = ["seed = %i" % self.seed, "converged = %s" % self.converged]
        if not self.converged:
            return "\n".join(lines + ["error = %s" % self.error])
        lines += ["best_epoch = %i" % self.best_epoch,
                  "val_accuracy = %.6f" % self.val_accuracy,
                  "val_loss = %.6f" % self.val_loss]
        if self.test is not None:
            lines += ["test." + l for l in self.test.to_kv().split("\n")]
        return "\n".join(lines)

class TrainReport:
    """Every run of a repeated training, and the best one."""
    def __init__(self, name, runs):
        self.name = name
        self.runs = list(runs)
    @property
    def converged(self):
        return [r for r in self.runs if r.converged]
    @property
    def failed(self):
        return len(self.runs) - len(self.converged)
    @property
    def best(self):
        runs = self.converged
        return max(runs, key=RunRecord.score) if runs else None
    @property
    def checkpoint(self):
        return self.best.checkpoint if self.best else None
    @property
    def metrics(self):
        return self.best.test if self.best else None
    def accuracies(self):
        return np.array([r.score()[0] for r in self.converged])
    def mean(self):
        acc = self.accuracies()
        return float(acc.mean()) if len(acc) else None
    def std(self):
        acc = self.accuracies()
        return float(acc.std()) if len(acc) else None
    def to_kv(self):
        lines = ["name = %s" % self.name, "runs = %i" % len(self.runs),
                 "failed = %i" % self.failed]
        if self.best is not None:
            lines += ["best_seed = %i" % self.best.seed,
                      "best_accuracy = %.6f" % self.best.score()[0],
                      "mean_accuracy = %.6f" % self.mean(),
                      "std_accuracy = %.6f" % self.std()]
        return "\n".join(lines)

def _better(candidate, incumbent):
    """Whether (accuracy, loss) `candidate` beats `incumbent`; ties keep
    the incumbent, which is the earlier epoch."""
    if incumbent is None:
        return True
    return candidate[0] > incumbent[0] or \
        (candidate[0] == incumbent[0] and candidate[1] < incumbent[1])

def _epoch(graph, params, state, x, y, cfg, rng):
    order = rng.permutation(len(x))
    total, correct = 0.0, 0
    for start in range(0, len(x), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        tape = Tape(params)
        logits = forward(graph, params, x[idx], tape)
        loss, probs = ops.softmax_cross_entropy(logits, y[idx])
        if not np.isfinite(loss.value):
            raise NonFiniteError("Non-finite training loss")
        grads = tape.backward(loss)
        params, state = adam_step(params, grads, state, cfg)
        if not all(np.all(np.isfinite(p)) for p in params.values.values()):
            raise NonFiniteError("Non-finite parameters after an update")
        total += float(loss.value)*len(idx)
        correct += int(np.sum(probs.argmax(axis=1) == y[idx]))
    return params, state, total/len(x), correct/len(x)

@accepts(LayerGraph, Dataset, TrainConfig, Integer)
@returns(Unchecked(RunRecord))
@paranoidconfig(unit_test=False)
def train_once(graph, dataset, cfg, seed):
    """Train from a fresh initialization seeded with `seed`.

    A non-finite loss or parameter, or any failed runtime verification
    while training, ends the run, which is returned with
    converged=False.
    """
    x, y = dataset.arrays("train")
    if x.shape[1:] != graph.input_shape:
        raise ShapeError("train", "input", graph.input_shape, x.shape[1:])
    if not dataset.indices("val"):
        raise DatasetError("Validation split is empty")
    params = init_parameters(graph, seed)
    state = AdamState(params)
    rng = np.random.default_rng(seed)
    best, best_params, curve = None, params, []
    try:
        for epoch in range(1, cfg.epochs + 1):
            params, state, train_loss, train_acc = _epoch(graph, params, state, x, y, cfg, rng)
            val = evaluate(graph, params, dataset, "val", cfg.batch_size)
            curve.append({"epoch" : epoch, "train_loss" : train_loss,
                          "train_accuracy" : train_acc, "val_loss" : val.loss,
                          "val_accuracy" : val.accuracy, "gap" : train_acc - val.accuracy})
            logger.info("seed %i epoch %i: train loss %.4f acc %.4f, val loss %.4f acc %.4f" %
                        (seed, epoch, train_loss, train_acc, val.loss, val.accuracy))
            if _better((val.accuracy, val.loss), best and best[1:]):
                best, best_params = (epoch, val.accuracy, val.loss), params
    except VerifyError as e:
        # Our own entry checks other than non-finite values are real errors
        if isinstance(e, EngineError) and not isinstance(e, NonFiniteError):
            raise
        logger.warning("Run with seed %i diverged: %s" % (seed, e))
        return RunRecord(seed, converged=False, curve=curve, error=str(e).split("\n")[0])
    if best is None:
        val = evaluate(graph, params, dataset, "val", cfg.batch_size)
        best = (0, val.accuracy, val.loss)
    test = evaluate(graph, best_params, dataset, "test", cfg.batch_size) \
        if dataset.indices("test") else None
    metadata = {"epoch" : best[0], "seed" : seed, "val_accuracy" : best[1],
                "val_loss" : best[2], "config" : cfg.to_dict()}
    if test is not None:
        metadata["test_accuracy"] = test.accuracy
    return RunRecord(seed, True, best[0], best[1], best[2], test,
                     Checkpoint(graph, best_params, metadata), curve)

def _write_run(run, directory):
    os.makedirs(directory, exist_ok=True)
    if run.checkpoint is not None:
        save_checkpoint(run.checkpoint.graph, run.checkpoint.params,
                        os.path.join(directory, "checkpoint.l2sa"), run.checkpoint.metadata)
    write_curve(run.curve, os.path.join(directory, "metrics.csv"))
    with open(os.path.join(directory, "report.txt"), "w") as f:
        f.write(run.to_kv() + "\n")

@accepts(LayerGraph, Dataset, TrainConfig, Maybe(FilePath), Maybe(String))
@returns(Unchecked(TrainReport))
@paranoidconfig(unit_test=False)
def train(graph, dataset, cfg, out_dir=None, name=None):
    """Train `cfg.repeats` times with seeds cfg.seed, cfg.seed+1, ...

    Repeats run on up to `workers` threads; each is independent, so
    results do not depend on the number of threads.  If `out_dir` is
    given, every run is written to out_dir/name/seed<k>/.
    """
    name = name or graph.name
    seeds = [cfg.seed + i for i in range(cfg.repeats)]
    with ThreadPoolExecutor(max_workers=min(Settings.get('workers'), len(seeds))) as pool:
        runs = list(pool.map(lambda s : train_once(graph, dataset, cfg, s), seeds))
    report = TrainReport(name, runs)
    if out_dir is not None:
        base = os.path.join(str(out_dir), name)
        for run in runs:
            _write_run(run, os.path.join(base, "seed%i" % run.seed))
        with open(os.path.join(base, "report.txt"), "w") as f:
            f.write(report.to_kv() + "\n")
    if report.failed:
        logger.warning("%i of %i runs failed to converge" % (report.failed, len(runs)))
    return report

def compare_runs(reports):
    """A plain-text table comparing TrainReports side by side."""
    lines = ["%-14s %5s %7s %10s %10s %10s" % ("model", "runs", "failed", "best", "mean", "std")]
    for r in reports:
        if r.best is None:
            lines.append("%-14s %5i %7i %10s %10s %10s" % (r.name, len(r.runs), r.failed, "-", "-", "-"))
        else:
            lines.append("%-14s %5i %7i %10.4f %10.4f %10.4f" %
                         (r.name, len(r.runs), r.failed, r.best.score()[0], r.mean(), r.std()))
    return "\n".join(lines)

def run_ablation(dataset, cfg, out_dir=None, **model_options):
    """Train the l2-SA model with and without skip connections on the
    same seeds.  Returns the two reports and the comparison table."""
    reports = []
    for name in ("l2sa", "l2sa_noskip"):
        graph = build_model(name, **model_options)
        reports.append(train(graph, dataset, cfg, out_dir, name))
    return reports, compare_runs(reports)
