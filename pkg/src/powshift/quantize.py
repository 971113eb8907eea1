"""Affine INT8 activations, 4-bit power-of-two weights and the 4-bit uniform arm.

PoT code layout (one nibble): bit 3 = sign (1 means negative), bits 0-2 =
exponent e, decoded value ``sign * s_w * 2**-e``. There is no zero code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from powshift.errors import EmptyCalibrationSet

QMIN, QMAX = -128, 127
POT_EMAX = 7
POT_SIGN_BIT = 0x8
INT4_LEVELS = 7
_SCALE_FLOOR = float(np.finfo(np.float64).tiny)


def round_half_away(x):
    """Round to nearest, ties away from zero (works on scalars and arrays)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class AffineParams:
    scale: float
    zero_point: int
    bits: int = 8

    def __post_init__(self):
        if not self.scale > 0 or not math.isfinite(self.scale):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero point {self.zero_point} outside int8")


def _clamp_zp(z) -> int:
    return int(min(max(int(z), QMIN), QMAX))


class CalibrationObserver:
    """Collects activation samples; shards merge with ``merge``.

    Min/max are tracked incrementally. Raw values are only kept when a
    percentile is requested, since those need the pooled distribution.
    """

    def __init__(self, keep_values: bool = False):
        self.lo = math.inf
        self.hi = -math.inf
        self.count = 0
        self.keep_values = keep_values
        self._chunks = []

    def update(self, x) -> "CalibrationObserver":
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return self
        self.lo = min(self.lo, float(x.min()))
        self.hi = max(self.hi, float(x.max()))
        self.count += x.size
        if self.keep_values:
            self._chunks.append(x)
        return self

    def merge(self, other: "CalibrationObserver") -> "CalibrationObserver":
        out = CalibrationObserver(self.keep_values and other.keep_values)
        out.lo, out.hi = min(self.lo, other.lo), max(self.hi, other.hi)
        out.count = self.count + other.count
        out._chunks = self._chunks + other._chunks
        return out

    def values(self) -> np.ndarray:
        return np.concatenate(self._chunks) if self._chunks else np.zeros(0)

    def params(self, mode: str = "minmax", percentile: float = 99.9) -> AffineParams:
        if self.count == 0:
            raise EmptyCalibrationSet("no calibration samples")
        if mode == "minmax":
            lo, hi = self.lo, self.hi
        elif mode == "percentile":
            if not 50 < percentile <= 100:
                raise ValueError("percentile must lie in (50, 100]")
            if not self.keep_values:
                raise ValueError("percentile calibration needs keep_values=True")
            pooled = self.values()
            lo = float(np.percentile(pooled, 100 - percentile))
            hi = float(np.percentile(pooled, percentile))
        else:
            raise ValueError(f"unknown calibration mode {mode!r}")
        return affine_from_range(lo, hi)


def affine_from_range(lo: float, hi: float) -> AffineParams:
    if hi == lo:
        return AffineParams(1.0, _clamp_zp(round_half_away(-lo)))
    # keep real zero representable so zero padding maps to z exactly
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    # divide first so huge ranges cannot overflow; floor keeps subnormal ranges usable
    s = max(hi / 255.0 - lo / 255.0, _SCALE_FLOOR)
    return AffineParams(s, _clamp_zp(round_half_away(QMIN - lo / s)))


def calibrate_affine(samples: Iterable, mode: str = "minmax", percentile: float = 99.9) -> AffineParams:
    obs = CalibrationObserver(keep_values=(mode == "percentile"))
    seen = False
    for x in samples:
        obs.update(x)
        seen = True
    if not seen or obs.count == 0:
        raise EmptyCalibrationSet("calibration needs at least one non-empty sample")
    return obs.params(mode, percentile)


def quantize_affine(x, q: AffineParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.clip(round_half_away(x / q.scale) + q.zero_point, QMIN, QMAX).astype(np.int8)


def dequantize_affine(x_q, q: AffineParams) -> np.ndarray:
    return q.scale * (np.asarray(x_q, dtype=np.float64) - q.zero_point)


def fake_quant_affine(x, q: AffineParams) -> np.ndarray:
    return dequantize_affine(quantize_affine(x, q), q)


def affine_bounds(q: AffineParams) -> Tuple[float, float]:
    """Real interval representable by ``q``; STE passes gradients inside it."""
    return q.scale * (QMIN - q.zero_point), q.scale * (QMAX - q.zero_point)


# -- power-of-two weights ---------------------------------------------------

def pot_scale(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty weight tensor")
    m = float(np.max(np.abs(w)))
    return m if m > 0 else 1.0


def pot_encode(w, s_w: float) -> np.ndarray:
    """Per-weight 4-bit codes (uint8 values 0..15), rounding in the log2 domain."""
    if not s_w > 0:
        raise ValueError("s_w must be positive")
    w = np.asarray(w, dtype=np.float64)
    mag = np.maximum(np.abs(w), s_w * 2.0**-10)
    e = np.clip(round_half_away(-np.log2(mag / s_w)), 0, POT_EMAX).astype(np.uint8)
    sign = np.where(w < 0, POT_SIGN_BIT, 0).astype(np.uint8)
    return sign | e


def pot_decode(codes, s_w: float) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    e = (codes & 0x7).astype(np.float64)
    sign = np.where(codes & POT_SIGN_BIT, -1.0, 1.0)
    return sign * s_w * np.exp2(-e)


def pot_int_weights(codes) -> np.ndarray:
    """Integer weights sign * 2**(7 - e), the MAC engine's view of PoT codes."""
    codes = np.asarray(codes, dtype=np.uint8)
    mag = np.left_shift(1, POT_EMAX - (codes & 0x7).astype(np.int32))
    return np.where(codes & POT_SIGN_BIT, -mag, mag).astype(np.int32)


def pack_nibbles(codes) -> bytes:
    """Two codes per byte, even index in the low nibble; odd counts pad with 0."""
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    if codes.size and codes.max() > 0xF:
        raise ValueError("codes must be 4-bit values")
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(data: bytes, n: int) -> np.ndarray:
    raw = np.frombuffer(bytes(data), dtype=np.uint8)
    if raw.size * 2 < n:
        raise ValueError(f"{raw.size} bytes hold fewer than {n} codes")
    out = np.empty(raw.size * 2, dtype=np.uint8)
    out[0::2] = raw & 0xF
    out[1::2] = raw >> 4
    return out[:n]


@dataclass(frozen=True)
class PotTensor:
    shape: Tuple[int, ...]
    packed: bytes
    scale: float

    @classmethod
    def from_codes(cls, codes, scale: float) -> "PotTensor":
        codes = np.asarray(codes, dtype=np.uint8)
        return cls(tuple(int(d) for d in codes.shape), pack_nibbles(codes), float(scale))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def codes(self) -> np.ndarray:
        return unpack_nibbles(self.packed, self.size).reshape(self.shape)

    def int_weights(self) -> np.ndarray:
        return pot_int_weights(self.codes())

    def dequantize(self) -> np.ndarray:
        return pot_decode(self.codes(), self.scale)


def quantize_pot(w, s_w: Optional[float] = None) -> PotTensor:
    if s_w is None:
        s_w = pot_scale(w)
    return PotTensor.from_codes(pot_encode(w, s_w), s_w)


def dequantize_pot(t: PotTensor) -> np.ndarray:
    return t.dequantize()


def fake_quant_pot(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    s_w = pot_scale(w)
    return pot_decode(pot_encode(w, s_w), s_w)


# -- uniform arms -------------------------------------------------------------

@dataclass(eq=False)
class LinearWeights:
    """Symmetric uniform integer weights; ``unit`` is the real value of one count."""

    values: np.ndarray
    unit: float

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def int_weights(self) -> np.ndarray:
        return self.values.astype(np.int32)

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.unit


def quantize_linear(w, levels: int = 127) -> LinearWeights:
    s_w = pot_scale(w)
    return LinearWeights(quantize_uniform(w, s_w, levels), s_w / levels)


def quantize_uniform(w, s_w: float, levels: int) -> np.ndarray:
    if not s_w > 0:
        raise ValueError("s_w must be positive")
    w = np.asarray(w, dtype=np.float64)
    return np.clip(round_half_away(w * levels / s_w), -levels, levels).astype(np.int8)


def quantize_uniform_int4(w, s_w: float) -> np.ndarray:
    return quantize_uniform(w, s_w, INT4_LEVELS)


def dequantize_uniform_int4(q, s_w: float) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * s_w / INT4_LEVELS


def fake_quant_uniform(w, levels: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    s_w = pot_scale(w)
    return quantize_uniform(w, s_w, levels).astype(np.float64) * s_w / levels


# -- straight-through estimator -------------------------------------------------

def ste_backward(grad_out, x, lo: float, hi: float) -> np.ndarray:
    """Pass ``grad_out`` where lo <= x <= hi, zero elsewhere."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    x = np.asarray(x)
    return np.where((x >= lo) & (x <= hi), grad_out, 0.0)
