"""Toy layered sequence model with a streaming, per-layer backward pass.

The model predicts each target token from the mean-pooled source embedding
plus an embedding of the previous target token, passed through a stack of
ReLU feed-forward layers and a vocabulary projection.  Sentences are
processed one at a time on their own (unpadded) shapes, so a sentence's
gradient contribution never depends on what else shares its sub-batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from ..exactsum import ExactSum
from ..lowprec import detect_overflow, half_roundtrip, round_to_half_bits

PAD_ID = 0  # also used as the start-of-target symbol


@dataclass(frozen=True)
class TrainConfig:
    vocab_size: int = 64
    embed_dim: int = 16
    num_layers: int = 6
    hidden_dim: int = 32
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    peak_lr: float = 5e-4
    warmup_steps: int = 4000
    label_smoothing: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "num_layers", "hidden_dim", "warmup_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.epsilon > 0 and self.peak_lr > 0):
            raise ValueError("invalid optimizer hyperparameters")


class ModelParams:
    """Ordered named layers, each a dict of tensors.

    Layer order is the forward order; backward emits gradients in reverse.
    """

    def __init__(self, layers: dict[str, dict[str, np.ndarray]]):
        self.layers = layers

    @classmethod
    def init(cls, cfg: TrainConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        V, D, H = cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim

        def glorot(fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)

        layers: dict[str, dict[str, np.ndarray]] = {
            "embed": {
                "src": (rng.standard_normal((V, D)) / math.sqrt(D)).astype(dtype),
                "tgt": (rng.standard_normal((V, D)) / math.sqrt(D)).astype(dtype),
            }
        }
        fan_in = D
        for i in range(cfg.num_layers):
            layers[f"ff{i}"] = {"w": glorot(fan_in, H), "b": (0.01 * rng.standard_normal(H)).astype(dtype)}
            fan_in = H
        layers["out"] = {"w": glorot(fan_in, V), "b": np.zeros(V, dtype=dtype)}
        return cls(layers)

    @property
    def layer_names(self) -> list[str]:
        return list(self.layers)

    @property
    def dtype(self):
        return self.layers["embed"]["src"].dtype

    @property
    def num_params(self) -> int:
        return sum(a.size for layer in self.layers.values() for a in layer.values())

    def layer_nbytes(self, name: str, itemsize: int | None = None) -> int:
        layer = self.layers[name]
        return sum(a.size * (itemsize or a.itemsize) for a in layer.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: {n: a.astype(dtype) for n, a in v.items()} for k, v in self.layers.items()})

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def map(self, fn: Callable[[str, str, np.ndarray], np.ndarray]) -> "ModelParams":
        return ModelParams({k: {n: fn(k, n, a) for n, a in v.items()} for k, v in self.layers.items()})

    def equal(self, other: "ModelParams") -> bool:
        """Bitwise equality of every tensor."""
        if self.layer_names != other.layer_names:
            return False
        for k, layer in self.layers.items():
            for n, a in layer.items():
                b = other.layers[k][n]
                if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                    return False
        return True

    def ff_names(self) -> list[str]:
        return [k for k in self.layers if k.startswith("ff")]


@dataclass
class SubBatchTensors:
    """Padded token-id matrices for one sub-batch."""

    src: np.ndarray
    tgt: np.ndarray
    src_lens: np.ndarray
    tgt_lens: np.ndarray
    ids: tuple = ()

    @classmethod
    def from_pairs(cls, pairs: Sequence) -> "SubBatchTensors":
        """Build from objects with ``src``/``tgt`` id sequences (and optional ``id``)."""
        n = len(pairs)
        src_lens = np.array([len(p.src) for p in pairs], dtype=np.int64)
        tgt_lens = np.array([len(p.tgt) for p in pairs], dtype=np.int64)
        src = np.full((n, int(src_lens.max(initial=0))), PAD_ID, dtype=np.int64)
        tgt = np.full((n, int(tgt_lens.max(initial=0))), PAD_ID, dtype=np.int64)
        for i, p in enumerate(pairs):
            src[i, : src_lens[i]] = p.src
            tgt[i, : tgt_lens[i]] = p.tgt
        return cls(src, tgt, src_lens, tgt_lens, tuple(getattr(p, "id", i) for i, p in enumerate(pairs)))

    @classmethod
    def concat(cls, batches: Sequence["SubBatchTensors"]) -> "SubBatchTensors":
        rows = []
        for b in batches:
            for i in range(b.num_sentences):
                rows.append((b.src[i, : b.src_lens[i]], b.tgt[i, : b.tgt_lens[i]]))

        class _Row:
            __slots__ = ("src", "tgt")

            def __init__(self, s, t):
                self.src, self.tgt = s, t

        out = cls.from_pairs([_Row(s, t) for s, t in rows])
        out.ids = tuple(i for b in batches for i in b.ids)
        return out

    @property
    def num_sentences(self) -> int:
        return int(self.src.shape[0])

    @property
    def ntokens(self) -> int:
        """Target tokens excluding padding."""
        return int(self.tgt_lens.sum())

    def sentences(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for i in range(self.num_sentences):
            yield self.src[i, : self.src_lens[i]], self.tgt[i, : self.tgt_lens[i]]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    mx = logits.max(axis=-1, keepdims=True)
    shifted = logits - mx
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def label_smoothed_nll(log_probs, target: int, eps: float = 0.1) -> float:
    """Cross-entropy against (1-eps)*onehot(target) + eps*uniform."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    V = log_probs.shape[-1]
    if not 0 <= target < V:
        raise ValueError(f"target {target} out of range for vocabulary of {V}")
    lse = np.logaddexp.reduce(log_probs)
    if abs(lse) > 1e-5:
        raise ValueError(f"log_probs is not normalized (logsumexp={lse:.3g})")
    return float(-((1.0 - eps) * log_probs[target] + (eps / V) * log_probs.sum()))


@dataclass
class _SentenceCache:
    src: np.ndarray
    prev: np.ndarray
    tgt: np.ndarray
    hs: list  # inputs to each ff layer, then input to the output projection
    zs: list  # ff pre-activations
    probs: np.ndarray


@dataclass
class ForwardCache:
    sentences: list
    weights: dict  # weights as used in the forward (half-rounded in half mode)
    half: bool
    eps: float
    vocab_size: int
    ntokens: int = 0
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))


def _check_shapes(params: ModelParams, cfg: TrainConfig | None):
    V, D = params.layers["embed"]["src"].shape
    if params.layers["embed"]["tgt"].shape != (V, D):
        raise ValueError("source/target embedding shapes differ")
    fan_in = D
    for name in params.ff_names():
        w = params.layers[name]["w"]
        if w.shape[0] != fan_in or params.layers[name]["b"].shape != (w.shape[1],):
            raise ValueError(f"dimension mismatch in layer {name}")
        fan_in = w.shape[1]
    out = params.layers["out"]
    if out["w"].shape != (fan_in, V) or out["b"].shape != (V,):
        raise ValueError("dimension mismatch in output projection")
    if cfg is not None:
        if (V, D, len(params.ff_names())) != (cfg.vocab_size, cfg.embed_dim, cfg.num_layers):
            raise ValueError("params do not match config")
    return V


def forward(params: ModelParams, batch: SubBatchTensors, eps: float = 0.1, half: bool = False,
            cfg: TrainConfig | None = None):
    """Sum of label-smoothed NLL over non-pad target tokens.

    Returns ``(loss_sum, token_count, cache)``.  With ``half=True`` weights
    and activations are quantized to binary16 while the loss stays fp32.
    """
    V = _check_shapes(params, cfg)
    if batch.num_sentences and (
        (batch.src.size and batch.src.max() >= V) or (batch.tgt.size and batch.tgt.max() >= V)
    ):
        raise ValueError("token id out of vocabulary range")
    dtype = params.dtype
    q = half_roundtrip if half else (lambda a: a)
    w = {k: {n: q(a) for n, a in v.items()} for k, v in params.layers.items()}
    ff = params.ff_names()
    emb_src, emb_tgt = w["embed"]["src"], w["embed"]["tgt"]
    cache = ForwardCache([], w, half, eps, V, dtype=dtype)
    losses = []
    for src, tgt in batch.sentences():
        if len(tgt) == 0:
            continue
        prev = np.concatenate(([PAD_ID], tgt[:-1]))
        ctx = q(emb_src[src].mean(axis=0)) if len(src) else np.zeros(emb_src.shape[1], dtype)
        h = q(ctx[None, :] + emb_tgt[prev])
        hs, zs = [h], []
        for name in ff:
            z = q(h @ w[name]["w"] + w[name]["b"])
            h = np.maximum(z, 0)
            zs.append(z)
            hs.append(h)
        logits = q(h @ w["out"]["w"] + w["out"]["b"])
        logp = log_softmax(logits.astype(np.float32) if half else logits)
        n = len(tgt)
        nll = -logp[np.arange(n), tgt]
        smooth = -logp.mean(axis=1)
        losses.append(float(((1 - eps) * nll + eps * smooth).astype(np.float64).sum()))
        cache.sentences.append(_SentenceCache(src, prev, tgt, hs, zs, np.exp(logp)))
        cache.ntokens += n
    return math.fsum(losses), cache.ntokens, cache


def sentence_losses(params: ModelParams, batch: SubBatchTensors, eps: float = 0.0) -> list[float]:
    """Per-sentence summed loss, in batch order (used for corpus scoring)."""
    out = []
    for i in range(batch.num_sentences):
        one = SubBatchTensors(batch.src[i : i + 1], batch.tgt[i : i + 1],
                              batch.src_lens[i : i + 1], batch.tgt_lens[i : i + 1])
        out.append(forward(params, one, eps=eps)[0])
    return out


def backward(cache: ForwardCache, params: ModelParams, grad_scale: float = 1.0,
             exact: bool = False) -> Iterator[tuple[str, dict]]:
    """Stream per-layer gradients of ``grad_scale * loss_sum``, last layer first.

    Each sentence's contribution is summed exactly, then rounded once.
    Emitted tensors are fp32 arrays, binary16 bit patterns (``uint16``)
    after a half-precision forward, or the raw :class:`ExactSum` objects
    when ``exact=True``.
    """
    half = cache.half
    q = half_roundtrip if half else (lambda a: a)
    dtype = cache.dtype
    w = cache.weights
    sc = np.asarray(grad_scale, dtype=dtype)
    V = cache.vocab_size
    eps = cache.eps

    def emit(name, sums: dict):
        if exact:
            return name, sums
        out = {}
        for n, s in sums.items():
            v = s.value(dtype)
            out[n] = round_to_half_bits(v) if half else v
        return name, out

    def new_sum(key, tensor):
        return ExactSum(tensor.shape, dtype)

    # d(loss)/d(logits) = p - smoothed target
    dhs = []
    for s in cache.sentences:
        target = np.full_like(s.probs, eps / V)
        target[np.arange(len(s.tgt)), s.tgt] += 1 - eps
        with np.errstate(over="ignore", invalid="ignore"):
            dhs.append(q(sc * (s.probs - target).astype(dtype)))

    sums = {n: new_sum(n, a) for n, a in params.layers["out"].items()}
    nxt = []
    for s, d in zip(cache.sentences, dhs):
        h = s.hs[-1]
        with np.errstate(over="ignore", invalid="ignore"):
            sums["w"].add(h.T @ d)
            sums["b"].add(d.sum(axis=0))
            nxt.append(q(d @ w["out"]["w"].T))
    yield emit("out", sums)
    dhs = nxt

    for li in reversed(range(len(params.ff_names()))):
        name = f"ff{li}"
        sums = {n: new_sum(n, a) for n, a in params.layers[name].items()}
        nxt = []
        for s, d in zip(cache.sentences, dhs):
            with np.errstate(over="ignore", invalid="ignore"):
                dz = q(np.where(s.zs[li] > 0, d, np.zeros_like(d)))
                sums["w"].add(s.hs[li].T @ dz)
                sums["b"].add(dz.sum(axis=0))
                nxt.append(q(dz @ w[name]["w"].T))
        yield emit(name, sums)
        dhs = nxt

    emb = params.layers["embed"]
    sums = {n: new_sum(n, a) for n, a in emb.items()}
    for s, d in zip(cache.sentences, dhs):
        with np.errstate(over="ignore", invalid="ignore"):
            g_tgt = np.zeros_like(emb["tgt"])
            np.add.at(g_tgt, s.prev, d)
            sums["tgt"].add(g_tgt)
            if len(s.src):
                dctx = q(d.sum(axis=0) / dtype.type(len(s.src)))
                g_src = np.zeros_like(emb["src"])
                np.add.at(g_src, s.src, np.broadcast_to(dctx, (len(s.src), dctx.size)))
                sums["src"].add(g_src)
    yield emit("embed", sums)


def collect_grads(stream) -> dict[str, dict[str, np.ndarray]]:
    """Drain a backward stream into ``{layer: {tensor: grad}}`` (forward order)."""
    items = list(stream)
    return dict(reversed(items))


def central_difference(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta`` (array, any shape)."""
    theta = np.array(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(theta)
        flat[i] = orig - h
        fm = f(theta)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def relu_pattern(params: ModelParams, batch: SubBatchTensors) -> bytes:
    """Signature of every ReLU on/off decision in the forward pass."""
    _, _, cache = forward(params, batch, eps=0.0)
    return b"".join(np.packbits(z > 0).tobytes() for s in cache.sentences for z in s.zs)


def finite_diff_grad(params: ModelParams, batch: SubBatchTensors, h: float = 1e-3, eps: float = 0.1,
                     return_kinks: bool = False):
    """Central differences of ``forward``'s loss_sum for every coordinate.

    With ``return_kinks=True`` also returns, per tensor, a boolean mask of
    coordinates whose +-h perturbation flips some ReLU (where a difference
    quotient does not estimate the derivative).
    """
    grads: dict[str, dict[str, np.ndarray]] = {}
    kinks: dict[str, dict[str, np.ndarray]] = {}
    for lname, layer in params.layers.items():
        grads[lname], kinks[lname] = {}, {}
        for tname, arr in layer.items():
            g = np.zeros(arr.shape, dtype=np.float64)
            k = np.zeros(arr.shape, dtype=bool)
            flat = arr.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = forward(params, batch, eps=eps)[0]
                pat_p = relu_pattern(params, batch) if return_kinks else None
                flat[i] = orig - h
                fm = forward(params, batch, eps=eps)[0]
                pat_m = relu_pattern(params, batch) if return_kinks else None
                flat[i] = orig
                g.reshape(-1)[i] = (fp - fm) / (2 * h)
                k.reshape(-1)[i] = pat_p != pat_m
            grads[lname][tname] = g.astype(arr.dtype)
            kinks[lname][tname] = k
    return (grads, kinks) if return_kinks else grads


def grads_overflowed(grads: dict) -> bool:
    return detect_overflow(a for layer in grads.values() for a in layer.values())
