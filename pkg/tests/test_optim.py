import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nmtscale.lowprec import NonFiniteGradientError
from nmtscale.sgd_core import AdamState, ModelParams, TrainConfig, adam_update, lr_at

DEFAULT = TrainConfig()


def test_schedule_anchor_points():
    assert lr_at(4000, DEFAULT) == 5e-4
    assert math.isclose(lr_at(2000, DEFAULT), 2.5e-4, rel_tol=1e-12)
    assert math.isclose(lr_at(16000, DEFAULT), 2.5e-4, rel_tol=1e-12)
    assert lr_at(1, DEFAULT) == 5e-4 / 4000
    with pytest.raises(ValueError):
        lr_at(0, DEFAULT)


def test_continuous_at_warmup_boundary():
    w = DEFAULT.warmup_steps
    left, peak, right = lr_at(w - 1, DEFAULT), lr_at(w, DEFAULT), lr_at(w + 1, DEFAULT)
    assert left < peak and right < peak
    assert math.isclose(peak - left, 5e-4 / w, rel_tol=1e-9)
    assert peak - right < 5e-4 / w


@given(st.integers(1, 10**7), st.integers(1, 10**5))
def test_schedule_shape(step, warmup):
    cfg = TrainConfig(warmup_steps=warmup, peak_lr=1e-3)
    lr = lr_at(step, cfg)
    assert 0 < lr <= 1e-3
    if step < warmup:
        assert lr_at(step + 1, cfg) > lr
    elif step > warmup:
        assert lr_at(step + 1, cfg) < lr


def adam_reference(theta, grads, lr, b1=0.9, b2=0.98, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def one_param_model(x):
    arr = lambda: np.array([x], np.float32)  # noqa: E731
    return ModelParams({"embed": {"src": arr()}})


def test_adam_matches_scalar_reference():
    cfg = TrainConfig()
    grads = [0.5, -1.0, 0.25, 2.0, 0.0]
    p = one_param_model(1.0)
    state = AdamState.zeros_like(p)
    for g in grads:
        p, state = adam_update(p, {"embed": {"src": np.array([g], np.float32)}}, state, 1e-2, cfg)
    assert state.t == 5
    assert math.isclose(float(p.layers["embed"]["src"][0]), adam_reference(1.0, grads, 1e-2), rel_tol=1e-5)


def test_first_step_moves_by_lr():
    p = one_param_model(0.0)
    p2, _ = adam_update(p, {"embed": {"src": np.array([3.0], np.float32)}}, AdamState.zeros_like(p), 0.1, DEFAULT)
    assert math.isclose(float(p2.layers["embed"]["src"][0]), -0.1, rel_tol=1e-6)


def test_update_is_pure():
    p = one_param_model(1.0)
    s = AdamState.zeros_like(p)
    adam_update(p, {"embed": {"src": np.array([1.0], np.float32)}}, s, 0.1, DEFAULT)
    assert p.layers["embed"]["src"][0] == 1.0 and s.t == 0


def test_rejects_non_finite():
    p = one_param_model(1.0)
    with pytest.raises(NonFiniteGradientError):
        adam_update(p, {"embed": {"src": np.array([np.inf], np.float32)}}, AdamState.zeros_like(p), 0.1, DEFAULT)
