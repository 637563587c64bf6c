"""Processing-time model for sub-batches and sub-batch timing statistics."""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import nnls

from .batching import SubBatch

MIN_ESTIMATE = 1e-9


@dataclass(frozen=True)
class TimingModel:
    """Bucketed mean-time table with a non-negative fallback for empty buckets.

    Fallback: ``seconds ~ a*n*max_src + b*n*max_tgt + c`` plus
    ``attn = (d, e)`` weighting ``n*max_src**2`` and ``n*max_tgt**2``.
    """

    table: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    sent_width: int = 8
    len_width: int = 4
    coef: tuple = (0.0, 0.0, MIN_ESTIMATE)
    attn: tuple = (0.0, 0.0)

    def key(self, n: int, src: int, tgt: int) -> tuple[int, int, int]:
        return (n - 1) // self.sent_width, (src - 1) // self.len_width, (tgt - 1) // self.len_width

    def fallback(self, n: int, src: int, tgt: int) -> float:
        a, b, c = self.coef
        d, e = self.attn
        return max(a * n * src + b * n * tgt + c + n * (d * src * src + e * tgt * tgt), MIN_ESTIMATE)


def fit_timing_model(measurements: Iterable, sent_width: int = 8, len_width: int = 4) -> TimingModel:
    """Fit from ``((num_sentences, max_src_len, max_tgt_len), seconds)`` records.

    The shape may also be a :class:`SubBatch`.
    """
    rows = []
    for shape, secs in measurements:
        if isinstance(shape, SubBatch):
            shape = shape.shape
        n, s, t = (int(v) for v in shape)
        if min(n, s, t) < 1 or not secs > 0:
            raise ValueError(f"invalid measurement {shape} -> {secs}")
        rows.append((n, s, t, float(secs)))
    if not rows:
        raise ValueError("no timing measurements")
    proto = TimingModel(sent_width=sent_width, len_width=len_width)
    sums: dict = {}
    counts: dict = {}
    for n, s, t, secs in rows:
        k = proto.key(n, s, t)
        sums[k] = sums.get(k, 0.0) + secs
        counts[k] = counts.get(k, 0) + 1
    table = {k: sums[k] / counts[k] for k in sorted(sums)}

    arr = np.array(rows, dtype=np.float64)
    n, s, t = arr[:, 0], arr[:, 1], arr[:, 2]
    A = np.column_stack([n * s, n * t, np.ones(len(arr)), n * s * s, n * t * t])
    # unit-norm columns keep nnls well conditioned; undo the scaling afterwards
    norms = np.linalg.norm(A, axis=0)
    coef, _ = nnls(A / norms, arr[:, 3])
    coef = coef / norms
    return TimingModel(table, counts, sent_width, len_width, tuple(float(c) for c in coef[:3]),
                       tuple(float(c) for c in coef[3:]))


def estimate_shape(model: TimingModel, n: int, src: int, tgt: int) -> float:
    hit = model.table.get(model.key(n, src, tgt))
    return hit if hit is not None else model.fallback(n, src, tgt)


def estimate_time(model: TimingModel, b: SubBatch) -> float:
    return estimate_shape(model, *b.shape)


def percentile(values: Sequence[float], q: float) -> float:
    """Percentile with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("percentile of empty sequence")
    return float(np.percentile(v, q, method="linear"))


@dataclass
class TimingStats:
    count: int
    mean: float
    min: float
    max: float
    std: float
    percentiles: dict
    bin_edges: np.ndarray
    bin_counts: np.ndarray

    @property
    def cv(self) -> float:
        return self.std / self.mean if self.mean > 0 else 0.0

    def summary(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean,
            "min": self.min,
            "max": self.max,
            "std": self.std,
            "cv": self.cv,
            "max_over_mean": self.max / self.mean if self.mean else 0.0,
            "min_over_mean": self.min / self.mean if self.mean else 0.0,
            "percentiles": {str(k): v for k, v in self.percentiles.items()},
        }

    def histogram_rows(self):
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.bin_counts):
            yield float(lo), float(hi), int(c)


def stats_of(times: Sequence[float], bins: int = 40, qs=(10, 50, 90, 99)) -> TimingStats:
    t = np.asarray(times, dtype=np.float64)
    if t.size == 0:
        return TimingStats(0, 0.0, 0.0, 0.0, 0.0, {q: 0.0 for q in qs}, np.zeros(1), np.zeros(0, dtype=int))
    counts, edges = np.histogram(t, bins=bins)
    lo, hi = float(t.min()), float(t.max())
    # fsum + clamp keeps min <= mean <= max exact (equal inputs give equal stats)
    mean = min(max(math.fsum(t.tolist()) / t.size, lo), hi)
    return TimingStats(
        count=int(t.size),
        mean=mean,
        min=lo,
        max=hi,
        std=float(np.sqrt(np.mean((t - mean) ** 2))),
        percentiles={q: percentile(t, q) for q in qs},
        bin_edges=edges,
        bin_counts=counts,
    )


def timing_histogram(batches: Sequence[SubBatch], model: TimingModel, bins: int = 40) -> TimingStats:
    """Descriptive statistics of estimated per-sub-batch processing times."""
    return stats_of([estimate_time(model, b) for b in batches], bins=bins)
