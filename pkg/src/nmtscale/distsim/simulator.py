"""Discrete-event timing model of synchronous training.

Workers compute their sub-batches back to back, meet at the all-reduce
barrier, and gradient buckets travel over one FIFO background channel.
Everything is driven by the timing model, so traces are deterministic.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..batching import SubBatch
from ..timing import TimingModel, estimate_time
from .collective import DEFAULT_BUCKET_BYTES, bucketize


@dataclass(frozen=True)
class CommModel:
    """Ring all-reduce cost: ``latency + bytes/bandwidth * 2(W-1)/W``."""

    latency_per_flush: float = 5e-4
    bandwidth: float = 10e9

    def __post_init__(self):
        if self.latency_per_flush < 0 or not self.bandwidth > 0:
            raise ValueError("latency must be >= 0 and bandwidth > 0")

    def cost(self, nbytes: float, workers: int) -> float:
        ring = 2.0 * (workers - 1) / workers if workers > 0 else 0.0
        bw = 0.0 if math.isinf(self.bandwidth) else nbytes / self.bandwidth * ring
        return self.latency_per_flush + bw

    @classmethod
    def for_ratio(cls, ratio: float, compute_time: float, total_bytes: float, workers: int = 8,
                  latency_per_flush: float = 5e-4) -> "CommModel":
        """Bandwidth chosen so one full all-reduce costs ``ratio * compute_time``."""
        if ratio <= 0:
            return cls(0.0, math.inf)
        budget = ratio * compute_time - latency_per_flush
        if budget <= 0:
            raise ValueError("latency alone exceeds the communication budget")
        ring = 2.0 * (workers - 1) / workers if workers > 1 else 1.0
        return cls(latency_per_flush, total_bytes * ring / budget)

    @classmethod
    def ideal(cls) -> "CommModel":
        return cls(0.0, math.inf)


def big_transformer_layer_bytes(bytes_per_param: int = 2) -> list[int]:
    """Layer sizes of a 6+6-block, 1024-wide transformer in forward order.

    Embeddings (32k x 1024, shared) first, then encoder and decoder blocks;
    about 210M parameters in total.
    """
    d, ff, vocab = 1024, 4096, 32768
    attn = 4 * d * d
    enc = attn + 2 * d * ff
    dec = 2 * attn + 2 * d * ff
    params = [vocab * d] + [enc] * 6 + [dec] * 6
    return [p * bytes_per_param for p in params]


@dataclass
class Event:
    worker: int
    step: int
    kind: str  # compute | comm | idle
    start_s: float
    end_s: float

    def to_dict(self):
        return {"worker": self.worker, "step": self.step, "kind": self.kind,
                "start_s": self.start_s, "end_s": self.end_s}


def schedule_transfers(ready: Sequence[float], sizes: Sequence[int], backward_end: float,
                       comm: CommModel, workers: int) -> list[tuple[float, float, list[int]]]:
    """Place bucket transfers on one FIFO channel.

    ``ready[j]`` is when bucket ``j`` is complete on every worker.  Buckets
    waiting while the channel is busy go out together as one transfer.  A
    transfer is only started early when that cannot finish later than
    holding everything back and sending it at ``backward_end``; with zero
    latency this is plain start-when-ready.  Returns
    ``[(start, end, bucket_indices), ...]``.
    """
    order = sorted(range(len(ready)), key=lambda j: (ready[j], j))
    out = []
    free = -math.inf
    i = 0
    n = len(order)
    while i < n:
        t = max(free, ready[order[i]])
        group = [order[i]]
        i += 1
        while i < n and ready[order[i]] <= t:
            group.append(order[i])
            i += 1
        q = sum(sizes[j] for j in group)
        rest = sum(sizes[j] for j in order[i:])
        if i < n and t < backward_end:
            end_now = t + comm.cost(q, workers)
            end_a = max(end_now, backward_end) + comm.cost(rest, workers)
            end_b = backward_end + comm.cost(q + rest, workers)
            if end_a > end_b:
                group += order[i:]
                i = n
                t = max(t, backward_end)
                q += rest
        end = t + comm.cost(q, workers)
        out.append((t, end, group))
        free = end
    return out


def overlap_schedule(layer_sizes_bytes: Sequence[int], threshold: int, comm: CommModel,
                     backward_layer_times: Sequence[float], workers: int = 8):
    """Overlapped vs serial timing of one backward pass plus all-reduce.

    Layers are given in emission (reverse) order.  Returns
    ``(events, total_time_overlap, total_time_serial)``.
    """
    if len(layer_sizes_bytes) != len(backward_layer_times):
        raise ValueError("layer sizes and times differ in length")
    emit = np.cumsum(np.asarray(backward_layer_times, dtype=np.float64))
    bwd = float(emit[-1]) if len(emit) else 0.0
    events = []
    prev = 0.0
    for t in emit:
        events.append(Event(0, 0, "compute", prev, float(t)))
        prev = float(t)
    buckets = bucketize(layer_sizes_bytes, threshold)
    ready = [float(emit[b.layers[-1]]) for b in buckets]
    xfers = schedule_transfers(ready, [b.nbytes for b in buckets], bwd, comm, workers)
    for s, e, _ in xfers:
        events.append(Event(0, 0, "comm", s, e))
    total_overlap = max([bwd] + [e for _, e, _ in xfers])
    total_serial = bwd + comm.cost(sum(layer_sizes_bytes), workers)
    return events, total_overlap, total_serial


@dataclass
class EventTrace:
    config: dict
    events: list = field(default_factory=list)
    wall_time: float = 0.0
    tokens: int = 0
    steps: int = 0
    compute_time: float = 0.0
    idle_time: float = 0.0
    exposed_comm_time: float = 0.0

    @property
    def idle_fraction(self) -> float:
        busy = self.compute_time + self.idle_time
        return self.idle_time / busy if busy > 0 else 0.0

    @property
    def comm_fraction(self) -> float:
        return self.exposed_comm_time / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def tokens_per_sec(self) -> float:
        return self.tokens / self.wall_time if self.wall_time > 0 else 0.0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.events)

    def label(self) -> str:
        return ",".join(f"{k}={self.config[k]}" for k in sorted(self.config))


def simulate_epoch(batches: Sequence[SubBatch], timing: TimingModel, workers: int, cumul: int,
                   comm: CommModel, overlap: bool, seed: int = 0, *, layer_bytes: Sequence[int] | None = None,
                   bucket_bytes: int = DEFAULT_BUCKET_BYTES, backward_fraction: float = 2 / 3,
                   jitter: float = 0.0, shuffle: bool = True, epochs: int = 1,
                   max_steps: int | None = None, label: dict | None = None) -> EventTrace:
    """Simulate synchronous steps over ``batches`` and record every interval.

    Sub-batches are (optionally) shuffled per epoch, then dealt round-robin:
    each step takes ``workers * cumul`` of them and a trailing partial step
    is dropped.  With ``max_steps`` the pass over the data repeats (fresh
    shuffle each time) until exactly that many steps are simulated, and
    ``epochs`` is ignored.  Compute time comes from the timing model,
    optionally scaled by log-normal jitter.
    """
    W, c = workers, cumul
    if W < 1 or c < 1:
        raise ValueError("workers and cumul must be >= 1")
    per_step = W * c
    if len(batches) < per_step:
        raise ValueError(f"{len(batches)} sub-batches cannot fill one step of {W} workers x {c}")
    layer_bytes = list(big_transformer_layer_bytes() if layer_bytes is None else layer_bytes)
    emit_order = layer_bytes[::-1]
    emit_frac = np.cumsum(emit_order, dtype=np.float64) / float(sum(emit_order))
    buckets = bucketize(emit_order, bucket_bytes)
    bucket_sizes = [b.nbytes for b in buckets]
    bucket_last = [b.layers[-1] for b in buckets]
    total_bytes = sum(layer_bytes)

    shuffle_rng = np.random.default_rng([seed, 1])
    jitter_rng = np.random.default_rng([seed, 2])
    base = np.array([estimate_time(timing, b) for b in batches], dtype=np.float64)
    toks = np.array([b.tgt_tokens_nopad for b in batches], dtype=np.int64)

    cfg = {"workers": W, "cumul": c, "overlap": overlap}
    cfg.update(label or {})
    trace = EventTrace(cfg)
    t0 = 0.0
    step = 0
    epoch = 0
    while (epoch < epochs) if max_steps is None else (step < max_steps):
        epoch += 1
        order = shuffle_rng.permutation(len(batches)) if shuffle else np.arange(len(batches))
        for s in range(len(order) // per_step):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[s * per_step:(s + 1) * per_step]
            times = base[idx]
            if jitter > 0:
                times = times * np.exp(jitter_rng.normal(0.0, jitter, size=times.size))
            ends = np.empty(W)
            last_bwd = np.empty(W)
            for w in range(W):
                mine = times[w::W]  # round-robin deal
                t = t0
                for dt in mine:
                    trace.events.append(Event(w, step, "compute", t, t + float(dt)))
                    t += float(dt)
                ends[w] = t
                last_bwd[w] = backward_fraction * float(mine[-1])
            barrier = float(ends.max())
            for w in range(W):
                if ends[w] < barrier:
                    trace.events.append(Event(w, step, "idle", float(ends[w]), barrier))
            if overlap:
                ready = [float(np.max(ends - last_bwd + last_bwd * emit_frac[j])) for j in bucket_last]
                # the last bucket closes with the last layer, i.e. at the barrier
                ready[-1] = barrier
                xfers = [(s_, e_) for s_, e_, _ in schedule_transfers(ready, bucket_sizes, barrier, comm, W)]
            else:
                xfers = [(barrier, barrier + comm.cost(total_bytes, W))]
            for w in range(W):
                for s_, e_ in xfers:
                    trace.events.append(Event(w, step, "comm", s_, e_))
            step_end = max([barrier] + [e_ for _, e_ in xfers])
            trace.compute_time += float(times.sum())
            trace.idle_time += float((barrier - ends).sum())
            trace.exposed_comm_time += step_end - barrier
            trace.tokens += int(toks[idx].sum())
            t0 = step_end
            step += 1
    trace.steps = step
    trace.wall_time = t0
    return trace


REPORT_HEADER = ["config", "wall_time", "tokens_per_sec", "idle_fraction", "comm_fraction"]


def speedup_report(traces: Sequence[EventTrace]) -> list[dict]:
    return [
        {
            "config": tr.label(),
            "wall_time": tr.wall_time,
            "tokens_per_sec": tr.tokens_per_sec,
            "idle_fraction": tr.idle_fraction,
            "comm_fraction": tr.comm_fraction,
        }
        for tr in traces
    ]


def report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
