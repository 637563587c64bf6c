"""Software binary16 emulation and dynamic loss scaling.

Half-precision tensors are carried around as ``uint16`` arrays holding raw
IEEE-754 binary16 bit patterns.  All conversions are done with integer bit
manipulation so the results do not depend on the host's float16 support.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

HALF_MAX = 65504.0
HALF_TINY = 2.0**-24  # smallest subnormal
HALF_EPS = 2.0**-11  # unit roundoff
CANONICAL_NAN = 0x7E00
POS_INF = 0x7C00
NEG_INF = 0xFC00


@dataclass(frozen=True)
class HalfValue:
    """A single binary16 value, stored as its 16-bit pattern."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError(f"not a 16-bit pattern: {self.bits:#x}")

    @property
    def sign(self) -> int:
        return self.bits >> 15

    @property
    def exponent(self) -> int:
        return (self.bits >> 10) & 0x1F

    @property
    def mantissa(self) -> int:
        return self.bits & 0x3FF

    def is_finite(self) -> bool:
        return self.exponent != 0x1F

    def to_float(self) -> float:
        return float(fp16_to_fp32(self))

    def __repr__(self):
        return f"HalfValue({self.bits:#06x} = {self.to_float()!r})"


def round_to_half_bits(x) -> np.ndarray:
    """Round fp32 values to binary16 bit patterns (round-to-nearest-even).

    Accepts any array-like; values are first cast to float32.  Returns a
    ``uint16`` array of the same shape.
    """
    f = np.asarray(x, dtype=np.float32)
    b = f.view(np.uint32).astype(np.int64)
    sign = (b >> 16) & 0x8000
    exp = (b >> 23) & 0xFF
    mant = b & 0x7FFFFF
    e = exp - 127

    # normal half range: keep the top 10 mantissa bits, round on the low 13
    low = mant & 0x1FFF
    normal = ((e + 15) << 10) + (mant >> 13)
    bump = (low > 0x1000) | ((low == 0x1000) & ((mant >> 13) & 1 == 1))
    normal = normal + bump
    normal = np.where(normal >= POS_INF, POS_INF, normal)

    # subnormal half range: value / 2^-24 = sig * 2^(e+1)
    sig = np.where(exp == 0, mant, mant | 0x800000)
    e_eff = np.where(exp == 0, -126, e)
    shift = np.clip(-e_eff - 1, 14, 30)
    q = sig >> shift
    rem = sig & ((np.int64(1) << shift) - 1)
    half_ulp = np.int64(1) << (shift - 1)
    sub = q + ((rem > half_ulp) | ((rem == half_ulp) & (q & 1 == 1)))

    out = np.where(e >= -14, normal, sub)
    out = np.where(e > 15, POS_INF, out)
    out = np.where(exp == 0xFF, np.where(mant == 0, POS_INF, CANONICAL_NAN), out)
    out = np.where(np.isnan(f), CANONICAL_NAN, out | sign)
    return out.astype(np.uint16)


def half_bits_to_float(h) -> np.ndarray:
    """Exactly widen binary16 bit patterns to float32."""
    h = np.asarray(h, dtype=np.uint16).astype(np.uint32)
    sign = (h & 0x8000) << 16
    exp = (h >> 10) & 0x1F
    mant = h & 0x3FF
    normal_bits = sign | ((exp + 112) << 23) | (mant << 13)
    special_bits = sign | 0x7F800000 | (mant << 13)
    bits = np.where(exp == 0x1F, special_bits, normal_bits).astype(np.uint32)
    out = bits.view(np.float32).copy()
    # subnormals and zeros: mant * 2^-24 is exact in fp32
    sub = mant.astype(np.float32) * np.float32(HALF_TINY)
    sub = np.where(sign != 0, -sub, sub)
    return np.where(exp == 0, sub, out).astype(np.float32)


def fp16_round(x: float) -> HalfValue:
    """Nearest binary16 value to ``x`` (after casting ``x`` to fp32)."""
    return HalfValue(int(round_to_half_bits(np.float32(x))))


def fp16_to_fp32(h: HalfValue | int) -> np.float32:
    bits = h.bits if isinstance(h, HalfValue) else int(h)
    return half_bits_to_float(np.uint16(bits))[()]


def half_roundtrip(x) -> np.ndarray:
    """Quantize fp32 values onto the binary16 grid, returning fp32."""
    return half_bits_to_float(round_to_half_bits(x))


def is_half_nonfinite(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.uint16)
    return (h & 0x7C00) == 0x7C00


def detect_overflow(grads: Iterable) -> bool:
    """True iff any element of any tensor is inf or nan.

    ``uint16`` arrays are read as binary16 patterns, anything else as floats.
    """
    for g in grads:
        g = np.asarray(g)
        if g.dtype == np.uint16:
            if is_half_nonfinite(g).any():
                return True
        elif not np.isfinite(g).all():
            return True
    return False


class NonFiniteGradientError(ArithmeticError):
    """Raised when unscaling gradients that still contain inf/nan."""


def unscale_grads(grads, scale: float) -> list[np.ndarray]:
    """Widen binary16 gradients to fp32 and divide out the loss scale."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    out = []
    inv = np.float32(scale)
    for g in grads:
        g = np.asarray(g)
        wide = half_bits_to_float(g) if g.dtype == np.uint16 else g.astype(np.float32)
        if not np.isfinite(wide).all():
            raise NonFiniteGradientError("gradient contains inf/nan; check detect_overflow first")
        out.append(wide / inv)
    return out


def _is_pow2(x: float) -> bool:
    if not x > 0 or math.isinf(x):
        return False
    m, _ = math.frexp(x)
    return m == 0.5


@dataclass(frozen=True)
class LossScalerState:
    scale: float = 2.0**7
    clean_updates: int = 0
    growth_interval: int = 2000
    backoff_factor: float = 0.5
    growth_factor: float = 2.0
    min_scale: float = 2.0**-5
    max_scale: float = 2.0**24

    def __post_init__(self):
        for name in ("scale", "min_scale", "max_scale", "backoff_factor", "growth_factor"):
            if not _is_pow2(getattr(self, name)):
                raise ValueError(f"{name} must be a positive power of two")
        if not self.min_scale <= self.scale <= self.max_scale:
            raise ValueError("scale outside [min_scale, max_scale]")
        if self.growth_interval < 1:
            raise ValueError("growth_interval must be >= 1")


def scale_loss(loss: float, state: LossScalerState) -> float:
    return loss * state.scale


def scaler_step(state: LossScalerState, overflow: bool) -> tuple[LossScalerState, bool]:
    """Advance the dynamic scaler by one update.

    Returns the new state and whether the optimizer step should be applied.
    """
    if overflow:
        new_scale = max(state.scale * state.backoff_factor, state.min_scale)
        return replace(state, scale=new_scale, clean_updates=0), False
    clean = state.clean_updates + 1
    if clean >= state.growth_interval:
        new_scale = min(state.scale * state.growth_factor, state.max_scale)
        return replace(state, scale=new_scale, clean_updates=0), True
    return replace(state, clean_updates=clean), True


def scaler_event(step: int, old: LossScalerState, new: LossScalerState, applied: bool):
    """Structured log record for a scale change or skipped step, else None."""
    if applied and old.scale == new.scale:
        return None
    if not applied:
        reason = "overflow"
    elif new.scale > old.scale:
        reason = "growth"
    else:
        reason = "backoff"
    record = {"step": step, "old_scale": old.scale, "new_scale": new.scale, "reason": reason}
    logger.info("loss scale event %s", record)
    return record
