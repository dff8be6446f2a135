# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Inference latency measurement."""

__all__ = ['LatencyReport', 'benchmark_inference', 'hardware_description']

import os
import time
import logging
import platform

import numpy as np
from paranoid.decorators import accepts, returns, requires, ensures, paranoidconfig
from paranoid.types import Natural0, Natural1, Integer, Unchecked

from .autodiff import Parameters
from .model import LayerGraph, forward, count_parameters
from .exceptions import PreconditionError
from .settings import Settings

logger = logging.getLogger(__name__)

def hardware_description():
    """Processor, core count, platform and numpy version in one line."""
    cpu = platform.processor() or platform.machine() or "unknown cpu"
    return "%s, %s cores, %s, numpy %s" % (cpu, os.cpu_count(), platform.platform(), np.__version__)

class LatencyReport:
    """Timing of single-image and batched forward passes.

    `single_ms` holds every timed single-image pass in milliseconds;
    `batch_ms` every timed pass over a batch of `batch_size` images.
    """
    def __init__(self, single_ms, batch_ms, batch_size, parameters, hardware, warmup):
        self.single_ms = np.asarray(single_ms)
        self.batch_ms = np.asarray(batch_ms)
        self.batch_size = batch_size
        self.parameters = parameters
        self.hardware = hardware
        self.warmup = warmup
    @property
    def median_ms(self):
        return float(np.median(self.single_ms))
    @property
    def p95_ms(self):
        return float(np.percentile(self.single_ms, 95))
    @property
    def single_throughput(self):
        """Images per second, one image at a time."""
        return 1000/self.median_ms
    @property
    def batch_throughput(self):
        """Images per second in batches."""
        return 1000*self.batch_size/float(np.median(self.batch_ms))
    def to_kv(self):
        return "\n".join([
            "median_ms = %.4f" % self.median_ms,
            "p95_ms = %.4f" % self.p95_ms,
            "iterations = %i" % len(self.single_ms),
            "warmup = %i" % self.warmup,
            "single_images_per_second = %.3f" % self.single_throughput,
            "batch_size = %i" % self.batch_size,
            "batch_images_per_second = %.3f" % self.batch_throughput,
            "parameters = %i" % self.parameters,
            "hardware = %s" % self.hardware])

def _timed(graph, params, x):
    start = time.perf_counter()
    forward(graph, params, x)
    return (time.perf_counter() - start)*1000

@accepts(LayerGraph, Unchecked(Parameters), Natural1, Natural0, Natural1, Natural1, Integer)
@requires("iterations >= 30")
@returns(Unchecked(LatencyReport))
@ensures("return.median_ms <= return.p95_ms")
@paranoidconfig(unit_test=False)
def benchmark_inference(graph, params, iterations=30, warmup=3, batch_size=64,
                        batch_iterations=3, seed=0):
    """Time forward passes of `graph` on random inputs.

    After `warmup` untimed single-image passes, `iterations`
    single-image passes are timed; then, after one untimed pass at the
    batch shape (skipped when `warmup` is 0), `batch_iterations` passes over `batch_size` images are
    timed, all on the calling thread.  Runtime verification is
    switched off while timing.
    """
    if iterations < 30:
        raise PreconditionError("benchmark_inference: need at least 30 iterations, got %i" % iterations)
    rng = np.random.default_rng(seed)
    dtype = Settings.dtype()
    single = rng.uniform(0, 1, (1,) + graph.input_shape).astype(dtype)
    batch = rng.uniform(0, 1, (batch_size,) + graph.input_shape).astype(dtype)
    with Settings.override(verify=False):
        for _ in range(warmup):
            _timed(graph, params, single)
        single_ms = [_timed(graph, params, single) for _ in range(iterations)]
        if warmup:
            _timed(graph, params, batch)
        batch_ms = [_timed(graph, params, batch) for _ in range(batch_iterations)]
    report = LatencyReport(single_ms, batch_ms, batch_size, count_parameters(graph),
                           hardware_description(), warmup)
    logger.info("Benchmark of %s: median %.3f ms, p95 %.3f ms" %
                (graph.name, report.median_ms, report.p95_ms))
    return report
