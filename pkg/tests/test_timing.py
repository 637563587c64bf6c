import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nmtscale.batching import SubBatch, make_token_budget_batches
from nmtscale.timing import (
    TimingModel,
    estimate_shape,
    estimate_time,
    fit_timing_model,
    percentile,
    stats_of,
    timing_histogram,
)


def test_single_measurement():
    m = fit_timing_model([((10, 20, 20), 0.1)])
    assert estimate_shape(m, 10, 20, 20) == 0.1


def test_bucket_mean():
    m = fit_timing_model([((10, 20, 20), 0.1), ((12, 18, 19), 0.3)])
    assert m.key(10, 20, 20) == m.key(12, 18, 19)
    assert math.isclose(estimate_shape(m, 11, 19, 19), 0.2)
    assert m.counts[m.key(10, 20, 20)] == 2


def test_accepts_sub_batches():
    b = SubBatch((0, 1), 2, 5, 6, 12)
    m = fit_timing_model([(b, 0.5)])
    assert estimate_time(m, b) == 0.5


def test_fallback_recovers_affine_cost():
    rng = np.random.default_rng(0)
    a, b, c = 3e-6, 5e-6, 0.02
    rows = []
    for _ in range(200):
        n, s, t = (int(v) for v in rng.integers(1, 100, 3))
        rows.append(((n, s, t), a * n * s + b * n * t + c))
    m = fit_timing_model(rows)
    np.testing.assert_allclose(m.coef, (a, b, c), rtol=1e-6, atol=1e-12)
    assert math.isclose(m.fallback(500, 200, 300), a * 500 * 200 + b * 500 * 300 + c, rel_tol=1e-6)
    np.testing.assert_allclose(m.attn, (0.0, 0.0), atol=1e-12)


def test_fallback_tracks_attention_cost():
    from nmtscale.synthetic import device_cost

    rng = np.random.default_rng(1)
    shapes = [tuple(int(v) for v in rng.integers(1, 81, 3)) for _ in range(300)]
    m = fit_timing_model([(s, float(device_cost(*s))) for s in shapes])
    for n, s, t in [(1, 1, 1), (64, 54, 52), (20, 80, 10), (150, 30, 30)]:
        assert math.isclose(m.fallback(n, s, t), float(device_cost(n, s, t)), rel_tol=1e-6)


@given(st.tuples(st.integers(1, 500), st.integers(1, 300), st.integers(1, 300)),
       st.tuples(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50)))
def test_fallback_monotone_and_positive(shape, extra):
    m = TimingModel(coef=(1e-6, 2e-6, 0.0), attn=(1e-8, 3e-8))
    bigger = tuple(s + e for s, e in zip(shape, extra))
    assert 0 < m.fallback(*shape) <= m.fallback(*bigger)


def test_errors():
    with pytest.raises(ValueError):
        fit_timing_model([])
    with pytest.raises(ValueError):
        fit_timing_model([((0, 1, 1), 0.1)])
    with pytest.raises(ValueError):
        fit_timing_model([((1, 1, 1), 0.0)])


def test_percentile_interpolates():
    assert percentile([0.1, 0.2], 50) == pytest.approx(0.15)
    assert percentile([3.0, 1.0, 2.0], 100) == 3.0
    assert percentile([3.0, 1.0, 2.0], 0) == 1.0
    with pytest.raises(ValueError):
        percentile([], 50)


def test_constant_times():
    st_ = stats_of([0.2] * 7)
    assert st_.mean == st_.min == st_.max == pytest.approx(0.2)
    assert st_.cv == pytest.approx(0.0, abs=1e-12)
    assert sum(c for _, _, c in st_.histogram_rows()) == 7


def test_summary_keys_and_histogram(calibrated):
    corpus, model = calibrated
    batches = make_token_budget_batches(corpus)
    st_ = timing_histogram(batches, model, bins=25)
    rows = list(st_.histogram_rows())
    assert len(rows) == 25 and sum(r[2] for r in rows) == len(batches)
    assert all(lo < hi for lo, hi, _ in rows)
    s = st_.summary()
    assert {"count", "mean", "min", "max", "cv", "max_over_mean", "min_over_mean", "percentiles"} <= s.keys()


def test_calibrated_spread_ratios(calibrated):
    """Slowest ~2.07x and fastest ~0.45x of the mean, within 20%."""
    corpus, model = calibrated
    s = timing_histogram(make_token_budget_batches(corpus), model).summary()
    assert s["max_over_mean"] == pytest.approx(0.228 / 0.11, rel=0.2)
    assert s["min_over_mean"] == pytest.approx(0.049 / 0.11, rel=0.2)
