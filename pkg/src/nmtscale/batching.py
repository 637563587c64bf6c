"""Sub-batch construction policies: token budget, similar shape, time balanced."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SentencePair:
    id: int
    src: tuple
    tgt: tuple

    def __post_init__(self):
        if len(self.src) < 1 or len(self.tgt) < 1:
            raise ValueError(f"pair {self.id}: both sides must be non-empty")


@dataclass(frozen=True)
class SubBatch:
    ids: tuple
    num_sentences: int
    max_src_len: int
    max_tgt_len: int
    tgt_tokens_nopad: int
    src_tokens_nopad: int = 0
    over_target: bool = False

    @classmethod
    def of(cls, pairs: Sequence[SentencePair], over_target: bool = False) -> "SubBatch":
        return cls(
            ids=tuple(p.id for p in pairs),
            num_sentences=len(pairs),
            max_src_len=max(len(p.src) for p in pairs),
            max_tgt_len=max(len(p.tgt) for p in pairs),
            tgt_tokens_nopad=sum(len(p.tgt) for p in pairs),
            src_tokens_nopad=sum(len(p.src) for p in pairs),
            over_target=over_target,
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.num_sentences, self.max_src_len, self.max_tgt_len

    @property
    def padded_tokens(self) -> int:
        return self.num_sentences * max(self.max_src_len, self.max_tgt_len)


def sort_key(p: SentencePair):
    return len(p.tgt), len(p.src), p.id


def length_sorted(corpus: Iterable[SentencePair]) -> list[SentencePair]:
    return sorted(corpus, key=sort_key)


def _greedy(pairs: Sequence[SentencePair], fits) -> list[list[SentencePair]]:
    groups: list[list[SentencePair]] = []
    cur: list[SentencePair] = []
    ms = mt = 0
    for p in pairs:
        ns, nt = max(ms, len(p.src)), max(mt, len(p.tgt))
        if cur and not fits(len(cur) + 1, ns, nt):
            groups.append(cur)
            cur, ns, nt = [], len(p.src), len(p.tgt)
        cur.append(p)
        ms, mt = ns, nt
    if cur:
        groups.append(cur)
    return groups


def make_token_budget_batches(corpus: Iterable[SentencePair], max_tokens: int = 3500) -> list[SubBatch]:
    """Greedy grouping of the length-sorted corpus under a padded-token budget."""
    pairs = length_sorted(corpus)
    for p in pairs:
        if max(len(p.src), len(p.tgt)) > max_tokens:
            raise ValueError(f"pair {p.id} is longer than the token budget {max_tokens}")
    groups = _greedy(pairs, lambda n, s, t: n * s <= max_tokens and n * t <= max_tokens)
    return [SubBatch.of(g) for g in groups]


def shape_class(p: SentencePair, tolerance: int) -> tuple[int, int]:
    return (len(p.src) - 1) // tolerance, (len(p.tgt) - 1) // tolerance


def make_shape_batches(corpus: Iterable[SentencePair], shape_tolerance: int = 5,
                       max_tokens: int = 3500) -> list[SubBatch]:
    """Token-budget batching run separately inside each (src, tgt) length window.

    Output is ordered by shape class, so consecutive sub-batches share a shape.
    """
    if shape_tolerance < 1:
        raise ValueError("shape_tolerance must be >= 1")
    classes: dict[tuple[int, int], list[SentencePair]] = {}
    for p in corpus:
        classes.setdefault(shape_class(p, shape_tolerance), []).append(p)
    out: list[SubBatch] = []
    for key in sorted(classes):
        out.extend(make_token_budget_batches(classes[key], max_tokens))
    return out


def make_time_balanced_batches(corpus: Iterable[SentencePair], model, target_percentile: float = 90,
                               max_tokens: int = 3500, target: float | None = None,
                               overshoot: float = 0.10, fill_steps: int = 21) -> list[SubBatch]:
    """Fill each sub-batch until its estimated time reaches a fixed target.

    The target is the ``target_percentile`` of estimated times of the
    token-budget batching of the same corpus (unless given explicitly).  A
    sentence that would push the estimate more than ``overshoot`` past the
    target starts a new sub-batch instead.  The fill threshold is scanned
    over ``fill_steps`` values in ``[(1 - overshoot) * target, cap]`` and
    the packing with the most even estimated times is kept, so the leftover
    at the end of the corpus does not dominate the spread.
    """
    from .timing import estimate_shape, percentile

    pairs = length_sorted(corpus)
    if not pairs:
        return []
    if target is None:
        baseline = make_token_budget_batches(pairs, max_tokens)
        target = percentile([estimate_shape(model, *b.shape) for b in baseline], target_percentile)
    cap = (1 + overshoot) * target

    est = functools.cache(lambda n, s, t: estimate_shape(model, n, s, t))
    src = [len(p.src) for p in pairs]
    tgt = [len(p.tgt) for p in pairs]
    best, best_cv = None, math.inf
    for fill in np.linspace((1 - overshoot) * target, cap, max(fill_steps, 1)):
        segs = _rebalance_tail(_fill(src, tgt, est, float(fill), cap), src, tgt, est, float(fill), cap)
        t = np.array([est(*shape) for _, _, shape, _ in segs])
        cv = float(t.std() / t.mean()) if len(t) > 1 else 0.0
        if cv < best_cv:
            best, best_cv = segs, cv
    out = [SubBatch.of(pairs[i:j], over_target=flag) for i, j, _, flag in best]
    for b in out:
        if b.over_target:
            logger.warning("pair %s alone exceeds the time target (%.4g > %.4g)", b.ids[0], est(*b.shape), target)
    return out


def _fill(src: list, tgt: list, est, fill: float, cap: float) -> list:
    """Greedy cut of the sorted corpus into ``(start, end, shape, over_target)`` segments."""
    out = []
    i, ms, mt = 0, 0, 0
    for j in range(len(src)):
        ns, nt = max(ms, src[j]), max(mt, tgt[j])
        if j > i and est(j - i + 1, ns, nt) > cap:
            out.append((i, j, (j - i, ms, mt), False))
            i, ns, nt = j, src[j], tgt[j]
        ms, mt = ns, nt
        e = est(j - i + 1, ms, mt)
        if e >= fill:
            out.append((i, j + 1, (j - i + 1, ms, mt), j == i and e > cap))
            i, ms, mt = j + 1, 0, 0
    if i < len(src):
        out.append((i, len(src), (len(src) - i, ms, mt), False))
    return out


def _rebalance_tail(segs: list, src: list, tgt: list, est, fill: float, cap: float) -> list:
    """Even out a short trailing segment with its neighbour.

    The remainder is folded into the previous segment when that stays
    under the cap, otherwise the two are re-cut where the slower half is fastest.
    """
    if len(segs) < 2 or segs[-2][3] or est(*segs[-1][2]) >= fill:
        return segs
    lo, hi = segs[-2][0], segs[-1][1]

    def shape(i, j):
        return j - i, max(src[i:j]), max(tgt[i:j])

    merged = shape(lo, hi)
    if est(*merged) <= cap:
        return segs[:-2] + [(lo, hi, merged, False)]
    best = segs[-2:]
    worst = max(est(*segs[-2][2]), est(*segs[-1][2]))
    for cut in range(lo + 1, hi):
        left, right = shape(lo, cut), shape(cut, hi)
        w = max(est(*left), est(*right))
        if w < worst:
            best, worst = [(lo, cut, left, False), (cut, hi, right, False)], w
    return segs[:-2] + best


def make_batches(policy: str, corpus: Sequence[SentencePair], *, max_tokens: int = 3500,
                 shape_tolerance: int = 5, timing_model=None, target_percentile: float = 90) -> list[SubBatch]:
    if policy == "token_budget":
        return make_token_budget_batches(corpus, max_tokens)
    if policy == "shape":
        return make_shape_batches(corpus, shape_tolerance, max_tokens)
    if policy == "time_balanced":
        if timing_model is None:
            raise ValueError("time_balanced batching needs a timing model")
        return make_time_balanced_batches(corpus, timing_model, target_percentile, max_tokens)
    raise ValueError(f"unknown batching policy {policy!r}")


def check_partition(corpus: Iterable[SentencePair], batches: Sequence[SubBatch]) -> None:
    """Raise AssertionError unless ``batches`` partition the corpus ids."""
    want = sorted(p.id for p in corpus)
    got = sorted(i for b in batches for i in b.ids)
    if want != got:
        raise AssertionError("sub-batches do not partition the corpus")


def pairs_by_id(corpus: Iterable[SentencePair]) -> dict:
    return {p.id: p for p in corpus}


def batch_pairs(batch: SubBatch, index: dict) -> list[SentencePair]:
    return [index[i] for i in batch.ids]


def estimated_times(batches: Sequence[SubBatch], model) -> np.ndarray:
    from .timing import estimate_time

    return np.array([estimate_time(model, b) for b in batches], dtype=np.float64)
