import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ordinal_siamese.evaluation import (BinningError, BinSpec, bin_index, fit_bins, mae,
                                        predict_level, rmse)
from ordinal_siamese.loss import ALL_LEVELS, ProgressionLevel

LEVELS = [ProgressionLevel(t) for t in range(2, 10)]
tenths = st.integers(1, 10)


def scalar_mae(p, t):
    return sum(abs(a - b) for a, b in zip(p, t)) / len(p)


def scalar_rmse(p, t):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / len(p))


class TestMetrics:
    def test_known(self):
        assert mae([0.5, 0.9], [0.7, 0.9]) == 1.0
        assert rmse([0.5, 0.9], [0.7, 0.9]) == math.sqrt(2.0)

    def test_scalar_oracle_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 40))
            p, t = rng.integers(1, 11, size=n), rng.integers(1, 11, size=n)
            assert mae(p / 10, t / 10) == scalar_mae(p, t)
            assert rmse(p / 10, t / 10) == scalar_rmse(p, t)

    def test_mae_le_rmse(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            p, t = rng.integers(1, 11, size=n) / 10, rng.integers(1, 11, size=n) / 10
            assert mae(p, t) <= rmse(p, t) + 1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            mae([0.5], [0.5, 0.6])
        with pytest.raises(ValueError):
            rmse([], [])


class TestBinning:
    def test_fit(self):
        spec = fit_bins([1.0, 3.0, 2.0], LEVELS)
        assert (spec.lo, spec.hi, spec.k) == (1.0, 3.0, 8)
        assert spec.edges[0] == 1.0 and spec.edges[-1] == 3.0

    def test_fit_needs_spread(self):
        with pytest.raises(BinningError):
            fit_bins([2.0, 2.0], LEVELS)

    def test_descending_orientation(self):
        spec = BinSpec(0.0, 8.0, tuple(LEVELS))
        assert predict_level(0.1, spec) == ProgressionLevel(9)
        assert predict_level(7.9, spec) == ProgressionLevel(2)

    def test_clamping(self):
        spec = BinSpec(0.0, 8.0, tuple(LEVELS))
        assert predict_level(-5.0, spec) == ProgressionLevel(9)
        assert predict_level(100.0, spec) == ProgressionLevel(2)
        assert bin_index(8.0, spec) == 7

    def test_against_oracle(self):
        """Independent oracle: count edges at or below d."""
        rng = np.random.default_rng(2)
        spec = BinSpec(1.5, 4.7, tuple(LEVELS))
        inner = [1.5 + i * (4.7 - 1.5) / 8 for i in range(1, 8)]
        for d in rng.uniform(0.0, 6.0, size=500):
            expected = sum(1 for e in inner if min(max(d, 1.5), 4.7) >= e)
            assert bin_index(d, spec) == expected

    def test_monotone_non_increasing(self):
        spec = BinSpec(0.3, 2.9, tuple(ALL_LEVELS[:9]))
        grid = np.linspace(-1.0, 4.0, 5001)
        preds = [predict_level(d, spec).tenths for d in grid]
        assert all(a >= b for a, b in zip(preds, preds[1:]))
        assert set(preds) == set(range(1, 10))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(tenths, tenths), min_size=1, max_size=50))
def test_metric_properties(pairs):
    p = [a / 10 for a, _ in pairs]
    t = [b / 10 for _, b in pairs]
    m, r = mae(p, t), rmse(p, t)
    assert 0.0 <= m <= r + 1e-12
    assert mae(t, p) == m
    if p == t:
        assert m == 0.0 and r == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10), st.floats(0.01, 10), st.floats(-20, 20), st.floats(0, 5))
def test_predict_monotone_property(lo, width, d, step):
    spec = BinSpec(lo, lo + width, tuple(LEVELS))
    assert predict_level(d, spec) >= predict_level(d + step, spec)
