"""Exact (order-independent) summation of floating point tensors.

Every finite float32/float64 value is an integer multiple of 2**-1074, so a
tensor can be held as an object array of Python ints in that fixed-point
grid.  Additions are then exact and associative; the sum is rounded back to
floating point once, when it is read.  This is what makes gradient
accumulation bit-identical under any grouping of sub-batches into workers
and accumulation steps.
"""

from __future__ import annotations

import math

import numpy as np

# grid exponents: float32/float16 values live on 2**-149, float64 on 2**-1074
_FRAC_BITS = {np.dtype(np.float16): 149, np.dtype(np.float32): 149, np.dtype(np.float64): 1074}


def _to_fixed(x: np.ndarray, frac: int) -> np.ndarray:
    m, e = np.frexp(x.astype(np.float64))
    mi = (m * 2.0**53).astype(np.int64)
    shift = e.astype(np.int64) - 53 + frac
    out = np.empty(x.shape, dtype=object)
    pos = shift >= 0
    out[pos] = np.left_shift(mi[pos].astype(object), shift[pos].astype(object))
    # only subnormal float64 inputs land here; their low bits are zero
    out[~pos] = np.right_shift(mi[~pos].astype(object), (-shift[~pos]).astype(object))
    return out


def _to_float(v: int, frac: int, odd: bool) -> float:
    """``v * 2**-frac`` as a float64.

    With ``odd`` the result is rounded to odd, so a later cast to a
    narrower format rounds correctly (no double rounding).
    """
    if not v:
        return 0.0
    if not odd:
        try:
            return v / (1 << frac)  # int / int is correctly rounded
        except OverflowError:
            return math.inf if v > 0 else -math.inf
    a = abs(v)
    shift = max(a.bit_length() - 53, 0)
    m = a >> shift
    if shift and a & ((1 << shift) - 1):
        m |= 1
    try:
        r = math.ldexp(m, shift - frac)
        return r if v > 0 else -r
    except OverflowError:
        return math.inf if v > 0 else -math.inf


class ExactSum:
    """Running exact sum of same-shaped float arrays.

    Non-finite addends are tracked separately with ordinary float addition,
    so inf/nan propagate the way they would in a plain sum.
    """

    __slots__ = ("shape", "dtype", "_frac", "_acc", "_special")

    def __init__(self, shape, dtype=np.float32):
        self.shape = tuple(shape)
        self.dtype = np.dtype(dtype)
        self._frac = _FRAC_BITS[self.dtype]
        self._acc = np.zeros(int(np.prod(self.shape, dtype=np.int64)), dtype=object)
        self._acc[:] = 0
        self._special = None

    @classmethod
    def of(cls, x) -> "ExactSum":
        x = np.asarray(x)
        s = cls(x.shape, x.dtype if x.dtype in _FRAC_BITS else np.float32)
        s.add(x)
        return s

    def add(self, x) -> "ExactSum":
        x = np.asarray(x, dtype=self.dtype).reshape(-1)
        if x.size != self._acc.size:
            raise ValueError(f"shape mismatch: {x.size} elements vs {self.shape}")
        finite = np.isfinite(x)
        if not finite.all():
            if self._special is None:
                self._special = np.zeros(x.size, dtype=np.float64)
            with np.errstate(invalid="ignore"):  # inf + -inf is nan, as in a plain sum
                self._special[~finite] += x[~finite]
            x = np.where(finite, x, 0)
        idx = np.flatnonzero(x)
        if idx.size:
            self._acc[idx] += _to_fixed(x[idx], self._frac)
        return self

    def __iadd__(self, other):
        if isinstance(other, ExactSum):
            if other.shape != self.shape or other._frac != self._frac:
                raise ValueError("cannot combine ExactSums of different shape/dtype")
            self._acc += other._acc
            if other._special is not None:
                if self._special is None:
                    self._special = np.zeros(self._acc.size, dtype=np.float64)
                with np.errstate(invalid="ignore"):
                    self._special += other._special
            return self
        return self.add(other)

    def __add__(self, other):
        out = self.copy()
        out += other
        return out

    def copy(self) -> "ExactSum":
        out = ExactSum.__new__(ExactSum)
        out.shape, out.dtype, out._frac = self.shape, self.dtype, self._frac
        out._acc = self._acc.copy()
        out._special = None if self._special is None else self._special.copy()
        return out

    def scaled_pow2(self, k: int) -> "ExactSum":
        """Exact multiplication by 2**k."""
        out = self.copy()
        if k >= 0:
            out._acc = np.left_shift(out._acc, k)
        else:
            # exact only while the grid still resolves the value
            lost = np.bitwise_and(out._acc, (1 << -k) - 1)
            if np.any(lost != 0):
                raise ArithmeticError("scaling below the fixed-point grid is inexact")
            out._acc = np.right_shift(out._acc, -k)
        if out._special is not None:
            out._special = out._special * 2.0**k
        return out

    @property
    def nbytes_value(self) -> int:
        return self._acc.size * self.dtype.itemsize

    def has_nonfinite(self) -> bool:
        return self._special is not None and bool(np.any(self._special != 0) or np.isnan(self._special).any())

    def value(self, dtype=None) -> np.ndarray:
        """The exact sum rounded once to ``dtype`` (nearest, ties to even)."""
        dtype = self.dtype if dtype is None else np.dtype(dtype)
        odd = dtype.itemsize < 8
        wide = np.array([_to_float(v, self._frac, odd) for v in self._acc], dtype=np.float64)
        if self._special is not None:
            special = self._special
            wide = np.where((special != 0) | np.isnan(special), special, wide)
        with np.errstate(over="ignore"):
            return wide.astype(dtype).reshape(self.shape)
