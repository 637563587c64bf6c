"""Synthetic corpora and an emulated device cost for sub-batch timing.

``calibrated_corpus`` + ``device_cost`` are tuned so that token-budget
batching at 3.5k tokens gives a spread of sub-batch times close to the one
observed on real translation data (slowest ~2.1x the mean, fastest ~0.45x).
Only ratios are meaningful; absolute seconds are arbitrary.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .batching import SentencePair, SubBatch

LENGTH_LOG_MEAN = 3.1
LENGTH_LOG_STD = 0.5
MAX_LEN = 80
SRC_TGT_LOG_STD = 0.15

# per-batch overhead, per padded token, per padded token * length (attention)
_COST = (0.04, 2e-6, 6e-7)
_COST_SCALE = 0.587  # mean ~0.11s on the default corpus


def calibrated_corpus(n_pairs: int = 40000, seed: int = 0, max_len: int = MAX_LEN,
                      log_mean: float = LENGTH_LOG_MEAN, log_std: float = LENGTH_LOG_STD) -> list[SentencePair]:
    """Length-only corpus (all token ids are 1) with a log-normal length profile."""
    rng = np.random.default_rng(seed)
    tgt = np.clip(np.round(np.exp(rng.normal(log_mean, log_std, n_pairs))), 1, max_len).astype(int)
    src = np.clip(np.round(tgt * np.exp(rng.normal(0.0, SRC_TGT_LOG_STD, n_pairs))), 1, max_len).astype(int)
    return [SentencePair(i, (1,) * int(s), (1,) * int(t)) for i, (s, t) in enumerate(zip(src, tgt))]


def device_cost(n, src, tgt):
    """Emulated forward+backward seconds for a padded (n, src, tgt) sub-batch."""
    c0, ct, ca = _COST
    n, src, tgt = (np.asarray(v, dtype=np.float64) for v in (n, src, tgt))
    return _COST_SCALE * (c0 + ct * n * (src + tgt) + ca * n * (src * src + tgt * tgt))


def profile_shapes(batches: Sequence[SubBatch], multipliers=(0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0)):
    """Shapes worth profiling: each observed batch shape with scaled sentence counts."""
    seen = set()
    for b in batches:
        n, s, t = b.shape
        for m in multipliers:
            shape = (max(1, int(round(n * m))), s, t)
            if shape not in seen:
                seen.add(shape)
                yield shape


def measure(shapes: Iterable[tuple[int, int, int]], seed: int = 0, noise: float = 0.02, repeats: int = 1):
    """Emulated timing measurements ``[((n, src, tgt), seconds), ...]``."""
    rng = np.random.default_rng(seed)
    out = []
    for shape in shapes:
        base = float(device_cost(*shape))
        for _ in range(repeats):
            out.append((tuple(int(v) for v in shape), base * float(np.exp(rng.normal(0.0, noise)))))
    return out


def toy_translation_corpus(n_pairs: int = 400, vocab_size: int = 64, topics: int = 4, seed: int = 0,
                           min_len: int = 3, max_len: int = 12, noise: float = 0.1) -> list[SentencePair]:
    """A learnable toy task.

    The source is a bag of words from one topic's slice of the vocabulary;
    the target walks the vocabulary with a topic-specific stride, so each
    target token is predictable from the source topic and the previous token.
    """
    rng = np.random.default_rng(seed)
    ids = np.arange(1, vocab_size)
    slices = np.array_split(ids, topics)
    pairs = []
    for i in range(n_pairs):
        k = int(rng.integers(topics))
        ls = int(rng.integers(min_len, max_len + 1))
        lt = int(np.clip(ls + rng.integers(-2, 3), 1, max_len))
        src = tuple(int(x) for x in rng.choice(slices[k], size=ls))
        stride = 2 * k + 1
        tok = int(slices[k][0])
        tgt = []
        for _ in range(lt):
            tgt.append(tok)
            nxt = 1 + (tok - 1 + stride) % (vocab_size - 1)
            tok = int(rng.integers(1, vocab_size)) if rng.random() < noise else nxt
        pairs.append(SentencePair(i, src, tuple(tgt)))
    return pairs
