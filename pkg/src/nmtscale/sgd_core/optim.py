from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..lowprec import NonFiniteGradientError
from .model import ModelParams, TrainConfig


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then inverse-square-root decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    w = cfg.warmup_steps
    return cfg.peak_lr * min(step / w, math.sqrt(w / step))


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        z = params.map(lambda k, n, a: np.zeros_like(a))
        return cls(z, z.copy(), 0)


def adam_update(params: ModelParams, grads: dict, state: AdamState, lr: float,
                cfg: TrainConfig) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam step; returns new params and state."""
    for layer in grads.values():
        for g in layer.values():
            if not np.isfinite(g).all():
                raise NonFiniteGradientError("non-finite gradient passed to adam_update")
    t = state.t + 1
    dt = params.dtype.type
    b1, b2 = dt(cfg.beta1), dt(cfg.beta2)
    c1 = dt(1.0 - cfg.beta1**t)
    c2 = dt(1.0 - cfg.beta2**t)
    lr_, eps = dt(lr), dt(cfg.epsilon)
    new_p, new_m, new_v = {}, {}, {}
    for k, layer in params.layers.items():
        new_p[k], new_m[k], new_v[k] = {}, {}, {}
        for n, theta in layer.items():
            g = np.asarray(grads[k][n], dtype=theta.dtype)
            m = b1 * state.m.layers[k][n] + (dt(1) - b1) * g
            v = b2 * state.v.layers[k][n] + (dt(1) - b2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            new_p[k][n] = theta - lr_ * m_hat / (np.sqrt(v_hat) + eps)
            new_m[k][n], new_v[k][n] = m, v
    return ModelParams(new_p), AdamState(ModelParams(new_m), ModelParams(new_v), t)
