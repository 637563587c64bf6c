"""In-memory all-reduce and gradient bucketing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..exactsum import ExactSum

DEFAULT_BUCKET_BYTES = 150 * 2**20


def _shape(t):
    return t.shape if isinstance(t, (np.ndarray, ExactSum)) else np.shape(t)


def all_reduce(grad_sets: Sequence[Sequence]) -> list:
    """Elementwise sum over workers, in ascending worker order.

    ``grad_sets[w]`` is worker ``w``'s list of tensors (numpy arrays or
    :class:`ExactSum`).  The result is folded left to right starting from
    worker 0, so it is bit-identical to a serial loop; every worker is
    handed the same result.
    """
    if not grad_sets:
        raise ValueError("all_reduce needs at least one worker")
    n = len(grad_sets[0])
    for w, gs in enumerate(grad_sets):
        if len(gs) != n or any(_shape(a) != _shape(b) for a, b in zip(gs, grad_sets[0])):
            raise ValueError(f"worker {w} tensors do not match worker 0")
    out = []
    for i in range(n):
        first = grad_sets[0][i]
        acc = first.copy()
        for gs in grad_sets[1:]:
            if isinstance(acc, ExactSum):
                acc += gs[i]
            else:
                acc = acc + gs[i]
        out.append(acc)
    return out


@dataclass
class Bucket:
    index: int
    layers: list = field(default_factory=list)
    nbytes: int = 0


class GradientBucketer:
    """Collects layer gradients in emission order and flushes by byte size.

    ``add`` returns the bucket that was just flushed (or None); ``finish``
    flushes whatever remains at the end of the backward pass.
    """

    def __init__(self, threshold_bytes: int = DEFAULT_BUCKET_BYTES):
        if threshold_bytes <= 0:
            raise ValueError("threshold_bytes must be positive")
        self.threshold_bytes = threshold_bytes
        self.flushed: list[Bucket] = []
        self._cur = Bucket(0)

    def add(self, layer: str, nbytes: int) -> Bucket | None:
        self._cur.layers.append(layer)
        self._cur.nbytes += int(nbytes)
        if self._cur.nbytes >= self.threshold_bytes:
            return self._flush()
        return None

    def finish(self) -> Bucket | None:
        return self._flush() if self._cur.layers else None

    def _flush(self) -> Bucket:
        b = self._cur
        self.flushed.append(b)
        self._cur = Bucket(b.index + 1)
        return b


def bucketize(layer_bytes: Sequence[int], threshold_bytes: int) -> list[Bucket]:
    """Buckets for layers given in emission order (indices as layer ids)."""
    bk = GradientBucketer(threshold_bytes)
    for i, nb in enumerate(layer_bytes):
        bk.add(i, nb)
    bk.finish()
    return bk.flushed
