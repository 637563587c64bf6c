"""Self-describing JSON checkpoints.

Tensors are stored as base64 of their little-endian bytes together with
dtype and shape; keys are sorted, so equal states give equal files.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..lowprec import LossScalerState
from .model import ModelParams, TrainConfig
from .optim import AdamState

FORMAT = "nmtscale-checkpoint/1"


def _enc(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    le = a.astype(a.dtype.newbyteorder("<"))
    return {"dtype": a.dtype.str.lstrip("<>|="), "shape": list(a.shape),
            "data": base64.b64encode(le.tobytes()).decode("ascii")}


def _dec(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype("<" + d["dtype"])).reshape(d["shape"]).copy()


def _params_to_json(p: ModelParams) -> list:
    # list of pairs keeps layer order explicit under sort_keys
    return [[k, {n: _enc(a) for n, a in v.items()}] for k, v in p.layers.items()]


def _params_from_json(items: list) -> ModelParams:
    return ModelParams({k: {n: _dec(a) for n, a in v.items()} for k, v in items})


def dumps(cfg: TrainConfig, params: ModelParams, adam: AdamState, step: int,
          scaler: LossScalerState | None = None) -> str:
    doc = {
        "format": FORMAT,
        "config": asdict(cfg),
        "step": step,
        "params": _params_to_json(params),
        "adam": {"t": adam.t, "m": _params_to_json(adam.m), "v": _params_to_json(adam.v)},
        "scaler": asdict(scaler) if scaler is not None else None,
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save(path, *args, **kwargs) -> None:
    Path(path).write_text(dumps(*args, **kwargs), encoding="utf-8")


def load(path):
    """Returns ``(cfg, params, adam, step, scaler)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path}: not a checkpoint ({doc.get('format')!r})")
    cfg = TrainConfig(**doc["config"])
    adam = AdamState(_params_from_json(doc["adam"]["m"]), _params_from_json(doc["adam"]["v"]), doc["adam"]["t"])
    scaler = LossScalerState(**doc["scaler"]) if doc["scaler"] is not None else None
    return cfg, _params_from_json(doc["params"]), adam, doc["step"], scaler
