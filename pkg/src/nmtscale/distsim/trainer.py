"""Synchronous data-parallel training over in-process workers."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..exactsum import ExactSum
from ..lowprec import (
    LossScalerState,
    detect_overflow,
    half_bits_to_float,
    round_to_half_bits,
    scaler_event,
    scaler_step,
    unscale_grads,
)
from ..sgd_core import AdamState, ModelParams, SubBatchTensors, TrainConfig, adam_update, backward, forward, lr_at
from .collective import DEFAULT_BUCKET_BYTES, GradientBucketer, all_reduce

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorkerAssignment:
    worker: int
    batches: tuple  # SubBatchTensors, processed in order


@dataclass
class WorkerResult:
    worker: int
    grads: dict  # {layer: {tensor: ExactSum}} of the (scaled) token-sum loss
    loss_sum: float
    ntokens: int
    buckets: list


@dataclass
class StepResult:
    params: ModelParams
    adam: AdamState
    scaler: LossScalerState | None
    stats: dict = field(default_factory=dict)


def _layer_nbytes(params: ModelParams, name: str, fp16: bool) -> int:
    return params.layer_nbytes(name, 2 if fp16 else None)


def worker_gradients(worker: int, params: ModelParams, batches: Sequence[SubBatchTensors], *, fp16: bool,
                     grad_scale: float, eps: float, bucket_bytes: int,
                     poison: bool = False) -> WorkerResult:
    """Forward/backward over this worker's sub-batches, summing locally.

    Only the last sub-batch's backward feeds the bucketer; the earlier ones
    just accumulate (no communication happens until the last backward).
    """
    acc: dict = {}
    loss_sum, ntok = 0.0, 0
    bucketer = GradientBucketer(bucket_bytes)
    for k, batch in enumerate(batches):
        ls, nt, cache = forward(params, batch, eps=eps, half=fp16)
        loss_sum += ls
        ntok += nt
        last = k == len(batches) - 1
        for name, grads in backward(cache, params, grad_scale, exact=not fp16):
            if fp16:
                # stored as binary16, accumulated exactly
                grads = {n: ExactSum.of(half_bits_to_float(g)) for n, g in grads.items()}
            if poison and last and name == "out":
                first = next(iter(grads))
                grads[first].add(np.full(grads[first].shape, np.inf, dtype=np.float32))
            if name in acc:
                for n, s in grads.items():
                    acc[name][n] += s
            else:
                acc[name] = grads
            if last:
                bucketer.add(name, _layer_nbytes(params, name, fp16))
    bucketer.finish()
    return WorkerResult(worker, acc, loss_sum, ntok, [list(b.layers) for b in bucketer.flushed])


def train_step_sync(params: ModelParams, assignment: Sequence, scaler: LossScalerState | None,
                    adam: AdamState, cfg: TrainConfig, *, fp16: bool = False,
                    bucket_bytes: int = DEFAULT_BUCKET_BYTES, poison_worker: int | None = None,
                    executor: ThreadPoolExecutor | None = None) -> StepResult:
    """One synchronous update from ``W`` workers with ``cumul`` sub-batches each.

    ``assignment[w]`` is a :class:`WorkerAssignment` or a sequence of
    :class:`SubBatchTensors`.  Gradients are all-reduced bucket by bucket,
    checked for overflow, unscaled, divided by the global target-token count
    and applied with Adam (unless the scaler says to skip).
    """
    per_worker = [a.batches if isinstance(a, WorkerAssignment) else tuple(a) for a in assignment]
    W = len(per_worker)
    if W == 0:
        raise ValueError("no workers")
    cumul = len(per_worker[0])
    if cumul == 0 or any(len(b) != cumul for b in per_worker):
        raise ValueError("every worker needs the same, non-zero number of sub-batches")
    if fp16 and scaler is None:
        raise ValueError("fp16 training needs a loss scaler")
    scale = scaler.scale if (fp16 and scaler is not None) else 1.0

    def run(w):
        return worker_gradients(w, params, per_worker[w], fp16=fp16, grad_scale=scale,
                                eps=cfg.label_smoothing, bucket_bytes=bucket_bytes,
                                poison=poison_worker == w)

    if executor is not None and W > 1:
        results = list(executor.map(run, range(W)))
    else:
        results = [run(w) for w in range(W)]

    buckets = results[0].buckets
    if any(r.buckets != buckets for r in results):
        raise RuntimeError("workers disagree on bucket layout")

    reduced: dict = {}
    for bucket in buckets:
        keys = [(layer, n) for layer in bucket for n in params.layers[layer]]
        sums = all_reduce([[r.grads[layer][n] for layer, n in keys] for r in results])
        for (layer, n), s in zip(keys, sums):
            reduced.setdefault(layer, {})[n] = s

    ntokens = sum(r.ntokens for r in results)
    loss_sum = sum(r.loss_sum for r in results)
    dtype = params.dtype
    if fp16:
        # the all-reduced buffer is binary16
        halves = {k: {n: round_to_half_bits(s.value(np.float32)) for n, s in v.items()} for k, v in reduced.items()}
        overflow = detect_overflow(h for v in halves.values() for h in v.values())
    else:
        full = {k: {n: s.value(dtype) for n, s in v.items()} for k, v in reduced.items()}
        overflow = detect_overflow(a for v in full.values() for a in v.values())

    new_scaler, apply = (scaler_step(scaler, overflow) if scaler is not None else (None, not overflow))
    event = scaler_event(adam.t + 1, scaler, new_scaler, apply) if scaler is not None else None
    stats = {
        "loss_sum": loss_sum,
        "ntokens": ntokens,
        "loss_per_token": loss_sum / ntokens if ntokens else 0.0,
        "overflow": overflow,
        "applied": apply,
        "scale": scale,
        "buckets": buckets,
        "scaler_event": event,
    }
    if ntokens == 0 or not apply:
        if ntokens == 0:
            logger.warning("step with no target tokens; skipping update")
        stats["lr"] = 0.0
        stats["applied"] = False
        return StepResult(params, adam, new_scaler, stats)

    denom = dtype.type(ntokens)
    grads = {}
    for k in params.layers:
        if fp16:
            names = list(halves[k])
            wide = unscale_grads([halves[k][n] for n in names], scale)
            grads[k] = {n: (g / denom).astype(dtype) for n, g in zip(names, wide)}
        else:
            grads[k] = {n: full[k][n] / denom for n in full[k]}
    lr = lr_at(adam.t + 1, cfg)
    new_params, new_adam = adam_update(params, grads, adam, lr, cfg)
    stats["lr"] = lr
    return StepResult(new_params, new_adam, new_scaler, stats)
