"""Independent reference implementations used by the tests."""

from bisect import bisect_left
from fractions import Fraction

import numpy as np

from nmtscale.batching import SentencePair
from nmtscale.sgd_core import PAD_ID, log_softmax


def _half_value(bits: int) -> Fraction:
    e, m = (bits >> 10) & 0x1F, bits & 0x3FF
    if e == 0:
        return Fraction(m, 2**24)
    return Fraction(1024 + m, 2**25) * Fraction(2) ** e


# positive finite halves in increasing order, plus 2**16 standing in for +inf
_POS = [_half_value(b) for b in range(0x7C00)] + [Fraction(65536)]


def nearest_half_bits(x: float) -> int:
    """Round a finite or non-finite float to binary16 by exhaustive search."""
    if x != x:
        return 0x7E00
    sign = 0x8000 if np.signbit(x) else 0
    if x in (float("inf"), float("-inf")):
        return sign | 0x7C00
    a = abs(Fraction(x))
    i = bisect_left(_POS, a)
    if i < len(_POS) and _POS[i] == a:
        bits = i
    elif i >= len(_POS):
        bits = 0x7C00
    else:
        lo, hi = _POS[i - 1], _POS[i]
        if a - lo < hi - a:
            bits = i - 1
        elif hi - a < a - lo:
            bits = i
        else:
            bits = i - 1 if (i - 1) % 2 == 0 else i
    return sign | bits


def reference_loss(params, pairs, eps):
    """Scalar-loop forward pass: sum of label-smoothed token losses."""
    L = params.layers
    total = 0.0
    for p in pairs:
        src = np.asarray(p.src)
        ctx = L["embed"]["src"][src].mean(axis=0)
        prev = PAD_ID
        for y in p.tgt:
            h = ctx + L["embed"]["tgt"][prev]
            for name in params.ff_names():
                h = np.maximum(h @ L[name]["w"] + L[name]["b"], 0.0)
            logits = h @ L["out"]["w"] + L["out"]["b"]
            lp = log_softmax(logits.astype(np.float64))
            V = lp.size
            total += -(1 - eps) * lp[y] - eps / V * lp.sum()
            prev = y
    return total


def serial_sum(tensors):
    acc = np.zeros_like(tensors[0], dtype=np.float64)
    for t in tensors:
        acc = acc + t
    return acc


class Pair:
    def __init__(self, src, tgt, id=0):
        self.src, self.tgt, self.id = tuple(int(v) for v in src), tuple(int(v) for v in tgt), id


GRADCHECK_CFG = dict(vocab_size=8, embed_dim=4, num_layers=2, hidden_dim=4)


def gradcheck(seed: int, h: float = 1e-3, floor: float = 1e-8):
    """Worst relative error of backward vs central differences, kinks excluded.

    Runs in float64 on a 144-parameter model; returns ``(err, n_params, n_kinks)``.
    """
    from nmtscale.sgd_core import ModelParams, SubBatchTensors, TrainConfig, backward, collect_grads, \
        finite_diff_grad, forward

    cfg = TrainConfig(**GRADCHECK_CFG)
    rng = np.random.default_rng(seed)
    params = ModelParams.init(cfg, seed, dtype=np.float64)
    pairs = [Pair(rng.integers(1, 8, rng.integers(1, 6)), rng.integers(1, 8, rng.integers(1, 6)))
             for _ in range(2)]
    batch = SubBatchTensors.from_pairs(pairs)
    _, _, cache = forward(params, batch)
    analytic = collect_grads(backward(cache, params))
    numeric, kinks = finite_diff_grad(params, batch, h, return_kinks=True)
    worst, nk = 0.0, 0
    for layer in analytic:
        for name, a in analytic[layer].items():
            f, k = numeric[layer][name], kinks[layer][name]
            rel = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
            worst = max(worst, float(rel[~k].max(initial=0.0)))
            nk += int(k.sum())
    return worst, params.num_params, nk


def words(n, prefix="w"):
    return tuple(f"{prefix}{i}" for i in range(n))


def hand_corpus():
    """12 pairs: 3 kept, then 3 planned violations of each rule."""
    rows = {
        0: (words(3, "a"), words(3, "b")),  # kept
        1: (words(10, "a"), words(20, "b")),  # ratio 2.0
        2: (words(4, "a"), words(2, "b")),  # ratio 2.0, source longer
        3: (words(2, "a"), words(3, "b")),  # ratio exactly 1.5 is allowed
        4: (words(300, "a"), words(100, "b")),  # ratio 3 and too long: attributed to ratio
        5: (words(251, "a"), words(251, "b")),  # length
        6: (words(250, "a"), words(250, "b")),  # at the cap: kept
        7: (words(260, "a"), words(250, "b")),  # length
        8: (words(251, "a"), words(240, "b")),  # length
        9: (("hello", "world"), ("hello", "world")),  # copy
        10: (("x",), ("x",)),  # copy
        11: (words(250), words(250)),  # copy at the length cap
    }
    return [SentencePair(i, s, t) for i, (s, t) in rows.items()]
