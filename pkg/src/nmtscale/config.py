"""Flat ``key=value`` run configuration and seeded random sub-streams."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

POLICIES = ("token_budget", "shape", "time_balanced")


class ConfigError(ValueError):
    """Unknown key or a value that does not parse or validate."""


@dataclass(frozen=True)
class RunConfig:
    # distributed training
    workers: int = 8
    cumul: int = 16
    max_tokens: int = 3500
    fp16: bool = False
    lr_peak: float = 5e-4
    lr_2x: bool = False  # double the peak rate (for large effective batches)
    warmup_steps: int = 4000
    bucket_mb: float = 150.0
    overlap: bool = True
    batching_policy: str = "token_budget"
    shape_tolerance: int = 5
    target_percentile: float = 90.0
    seed: int = 1
    steps: int = 100
    # data
    corpus: str = ""
    vocab: str = ""
    measurements: str = ""
    # toy model
    embed_dim: int = 16
    num_layers: int = 6
    hidden_dim: int = 32
    label_smoothing: float = 0.1
    init_scale: float = 128.0
    # simulation
    grid_workers: str = "8"
    grid_cumul: str = "1,16"
    grid_overlap: str = "false,true"
    grid_policy: str = "token_budget"
    comm_ratio: float = 0.2
    comm_latency: float = 5e-4
    backward_fraction: float = 2 / 3
    jitter: float = 0.0
    bins: int = 40
    # filtering and mixing
    max_length_ratio: float = 1.5
    max_len_words: int = 250
    drop_copies: bool = True
    score_checkpoint: str = ""
    top_k: int = 0
    clean_corpus: str = ""
    noisy_corpus: str = ""
    mix_ratio: str = "1:1"
    n_samples: int = 100000

    def __post_init__(self):
        positive = ("workers", "cumul", "max_tokens", "warmup_steps", "steps", "embed_dim",
                    "num_layers", "hidden_dim", "shape_tolerance", "bins", "max_len_words")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.batching_policy not in POLICIES:
            raise ConfigError(f"batching_policy must be one of {', '.join(POLICIES)}")
        for p in split_list(self.grid_policy):
            if p not in POLICIES:
                raise ConfigError(f"grid_policy: unknown policy {p!r}")
        if not 0 < self.target_percentile <= 100:
            raise ConfigError("target_percentile must be in (0, 100]")
        if not self.lr_peak > 0 or not self.bucket_mb > 0:
            raise ConfigError("lr_peak and bucket_mb must be positive")
        if not 0 < self.backward_fraction <= 1:
            raise ConfigError("backward_fraction must be in (0, 1]")
        if self.comm_ratio < 0 or self.comm_latency < 0 or self.jitter < 0:
            raise ConfigError("comm_ratio, comm_latency and jitter must be >= 0")
        if self.top_k < 0 or self.n_samples < 0:
            raise ConfigError("top_k and n_samples must be >= 0")
        try:
            for v in split_list(self.grid_workers) + split_list(self.grid_cumul):
                if int(v) < 1:
                    raise ConfigError("grid sizes must be >= 1")
            for v in split_list(self.grid_overlap):
                parse_bool(v)
        except ValueError as e:
            raise ConfigError(f"bad grid value: {e}") from None

    @property
    def effective_lr_peak(self) -> float:
        return self.lr_peak * (2.0 if self.lr_2x else 1.0)

    @property
    def bucket_bytes(self) -> int:
        return int(round(self.bucket_mb * 2**20))

    def to_text(self) -> str:
        return "".join(f"{k}={format_value(v)}\n" for k, v in asdict(self).items())


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, text: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    try:
        if kind is bool:
            return parse_bool(text)
        return kind(text.strip()) if kind is not str else text.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_text(text: str) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {i}: expected key=value")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {i}: duplicate key {key!r}")
        out[key] = parse_value(key, value)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides`` (raw strings or values)."""
    values = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        values.update(parse_text(text))
    for k, v in (overrides or {}).items():
        values[k] = parse_value(k, v) if isinstance(v, str) else v
    try:
        return replace(RunConfig(), **values)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def write_config(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.txt"
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (``"batching"``, ``"jitter"``, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def substream_seed(seed: int, name: str) -> int:
    """An integer seed drawn from the named sub-stream, for APIs that take ints."""
    return int(substream(seed, name).integers(2**31))
