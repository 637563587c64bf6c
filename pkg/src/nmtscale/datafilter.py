"""Rule-based parallel-corpus filtering, likelihood scoring and corpus mixing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .batching import SentencePair
from .sgd_core import ModelParams, SubBatchTensors, sentence_losses

RULES = ("ratio", "length", "copy")


@dataclass(frozen=True)
class FilterConfig:
    max_length_ratio: float = 1.5
    max_len_words: int = 250
    drop_copies: bool = True

    def __post_init__(self):
        if not self.max_length_ratio > 1:
            raise ValueError("max_length_ratio must be > 1")
        if self.max_len_words < 1:
            raise ValueError("max_len_words must be >= 1")


@dataclass(frozen=True)
class ScoredPair:
    id: int
    avg_token_loglik: float


@dataclass(frozen=True)
class MixRatio:
    clean_weight: int = 1
    noisy_weight: int = 1

    def __post_init__(self):
        if int(self.clean_weight) < 1 or int(self.noisy_weight) < 1:
            raise ValueError("mix weights must be positive integers")

    @classmethod
    def parse(cls, text: str) -> "MixRatio":
        a, _, b = text.partition(":")
        return cls(int(a), int(b))

    @property
    def clean_fraction(self) -> float:
        return self.clean_weight / (self.clean_weight + self.noisy_weight)

    def __str__(self):
        return f"{self.clean_weight}:{self.noisy_weight}"


def violated_rule(p: SentencePair, cfg: FilterConfig) -> str | None:
    """First rule (in ``RULES`` order) the pair breaks, or None."""
    ls, lt = len(p.src), len(p.tgt)
    if max(ls, lt) / min(ls, lt) > cfg.max_length_ratio:
        return "ratio"
    if ls > cfg.max_len_words or lt > cfg.max_len_words:
        return "length"
    if cfg.drop_copies and tuple(p.src) == tuple(p.tgt):
        return "copy"
    return None


def basic_filter(corpus: Sequence[SentencePair], cfg: FilterConfig = FilterConfig()):
    """Returns ``(kept, stats)``; stats has input/kept counts and drops per rule."""
    kept = []
    stats = {"input": 0, "kept": 0, **{f"dropped_{r}": 0 for r in RULES}}
    for p in corpus:
        stats["input"] += 1
        rule = violated_rule(p, cfg)
        if rule is None:
            kept.append(p)
        else:
            stats[f"dropped_{rule}"] += 1
    stats["kept"] = len(kept)
    return kept, stats


def score_pairs(params: ModelParams, pairs: Sequence[SentencePair]) -> list[ScoredPair]:
    """Mean per-target-token log-likelihood of each pair under the model."""
    out = []
    for p in pairs:
        batch = SubBatchTensors.from_pairs([p])
        (nll,) = sentence_losses(params, batch, eps=0.0)
        out.append(ScoredPair(p.id, -nll / len(p.tgt)))
    return out


def select_top_k(scored: Sequence[ScoredPair], k: int) -> list[int]:
    """Ids of the ``k`` best-scoring pairs; ties go to the smaller id."""
    if not 0 <= k <= len(scored):
        raise ValueError(f"k={k} out of range for {len(scored)} scored pairs")
    ranked = sorted(scored, key=lambda s: (-s.avg_token_loglik, s.id))
    return [s.id for s in ranked[:k]]


def mix_sampler(clean: Sequence, noisy: Sequence, ratio: MixRatio, seed: int,
                n_samples: int) -> Iterator[tuple[str, object]]:
    """Yield ``(source_name, pair)`` drawn with replacement at the given ratio."""
    if not clean or not noisy:
        raise ValueError("both corpora must be non-empty")
    rng = np.random.default_rng(seed)
    p_clean = ratio.clean_fraction
    for _ in range(n_samples):
        if rng.random() < p_clean:
            yield "clean", clean[int(rng.integers(len(clean)))]
        else:
            yield "noisy", noisy[int(rng.integers(len(noisy)))]
