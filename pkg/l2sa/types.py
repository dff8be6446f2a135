# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Refinement types for arrays flowing through the engine.

Each type is defined by a predicate (`test`) and a small set of
representative values (`generate`), so any function annotated with
them can be fuzzed with "python3 -m paranoid tests/testauto.py".
"""

__all__ = ['Tensor', 'FeatureMap', 'AttentionMap', 'Logits', 'Labels',
           'Window', 'Precision', 'FilePath', 'Fractions']

import os
import math
import numpy as np
from paranoid.types import Type, Natural1, Number

def _finite_float(v):
    assert isinstance(v, np.ndarray), "Not an ndarray, it is a " + str(type(v))
    assert np.issubdtype(v.dtype, np.floating), "Invalid datatype %s" % v.dtype
    assert np.all(np.isfinite(v)), "Array cannot contain nan or inf"

class Tensor(Type):
    """A finite floating point ndarray of rank 1 to 4.

    If `rank` is given, the array must have exactly that many
    dimensions.
    """
    def __init__(self, rank=None):
        if rank is not None:
            assert rank in Natural1() and rank <= 4, "Invalid rank"
            super().__init__(rank)
        else:
            super().__init__()
        self.rank = rank
    def test(self, v):
        super().test(v)
        _finite_float(v)
        assert 1 <= v.ndim <= 4, "Rank must be between 1 and 4"
        if self.rank is not None:
            assert v.ndim == self.rank, "Rank %i is not %i" % (v.ndim, self.rank)
    def _shapes(self):
        ranks = [self.rank] if self.rank else [1, 2, 3, 4]
        return [tuple([1, 2, 3, 4][:r]) if r < 4 else (1, 2, 5, 5) for r in ranks]
    def generate(self):
        rng = np.random.default_rng(0)
        for s in self._shapes():
            yield np.zeros(s)
            yield np.ones(s)
            yield -np.ones(s)
            yield rng.standard_normal(s)

class FeatureMap(Tensor):
    """A (batch, channels, height, width) array.

    If `channels` is given, the channel extent must equal it.
    """
    def __init__(self, channels=None):
        Type.__init__(self, *([channels] if channels is not None else []))
        self.rank = 4
        self.channels = channels
    def test(self, v):
        super().test(v)
        assert min(v.shape) >= 1, "Empty feature map"
        if self.channels is not None:
            assert v.shape[1] == self.channels, "Expected %i channels" % self.channels
    def generate(self):
        rng = np.random.default_rng(1)
        chans = [self.channels] if self.channels else [1, 3]
        for c in chans:
            yield np.zeros((1, c, 3, 3))
            yield np.full((2, c, 4, 4), 2.5)
            yield rng.standard_normal((2, c, 6, 6))

class AttentionMap(FeatureMap):
    """A single-channel feature map with values strictly inside (0,1)."""
    def __init__(self):
        super().__init__(channels=1)
        self._repr = "AttentionMap"
    def test(self, v):
        super().test(v)
        assert np.all(v > 0) and np.all(v < 1), "Gate values must lie in (0,1)"
    def generate(self):
        rng = np.random.default_rng(2)
        yield np.full((1, 1, 3, 3), .5)
        yield rng.uniform(.01, .99, (2, 1, 6, 6))

class Logits(Tensor):
    """A (batch, classes) array of unnormalized scores."""
    def __init__(self):
        super().__init__(rank=2)
        self._repr = "Logits"
    def generate(self):
        rng = np.random.default_rng(3)
        yield np.zeros((1, 3))
        yield rng.standard_normal((4, 3))

class Labels(Type):
    """A one dimensional integer array of class indices."""
    def test(self, v):
        super().test(v)
        assert isinstance(v, np.ndarray), "Labels must be an ndarray"
        assert v.ndim == 1, "Labels must be one dimensional"
        assert np.issubdtype(v.dtype, np.integer), "Labels must be integers"
        assert np.all(v >= 0), "Labels must be non-negative"
    def generate(self):
        yield np.array([0])
        yield np.array([0, 1, 2, 1])

class Window(Type):
    """A (height, width) pair of positive integers."""
    def test(self, v):
        super().test(v)
        assert isinstance(v, tuple) and len(v) == 2, "Window must be a pair"
        for e in v:
            Natural1().test(e)
    def generate(self):
        yield (1, 1)
        yield (2, 2)
        yield (2, 3)

class Precision(Type):
    """An element width name, 'f32' or 'f64'."""
    def test(self, v):
        super().test(v)
        assert v in ('f32', 'f64'), "Precision must be f32 or f64"
    def generate(self):
        yield 'f32'
        yield 'f64'

class FilePath(Type):
    """A string or os.PathLike object naming a file or directory."""
    def test(self, v):
        super().test(v)
        assert isinstance(v, (str, os.PathLike)), "Not a path"
        assert str(v) != "", "Empty path"
    def generate(self):
        yield "nonexistent-l2sa-path"

class Fractions(Type):
    """A (train, val, test) triple of non-negative numbers summing to 1."""
    def test(self, v):
        super().test(v)
        assert isinstance(v, tuple) and len(v) == 3, "Need three fractions"
        for f in v:
            Number().test(f)
            assert f >= 0, "Fractions must be non-negative"
        assert math.isclose(sum(v), 1, abs_tol=1e-9), "Fractions must sum to 1"
    def generate(self):
        yield (.7, .1, .2)
        yield (.8, .1, .1)
        yield (1/3, 1/3, 1/3)
