"""Conv-BN fusion: the plain float fold and the PoT-preserving fold.

The PoT fold leaves the weight codes alone and pushes gamma/phi into a
per-output-channel fixed-point requantization multiplier instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from powshift.errors import OutOfRange, ShapeMismatch
from powshift.quantize import POT_EMAX, AffineParams, LinearWeights, PotTensor, round_half_away

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
MAX_SHIFT = 62


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        n = self.gamma.size
        if not (self.beta.size == self.mean.size == self.var.size == n):
            raise ShapeMismatch("BN parameter vectors differ in length")
        if (self.var < 0).any():
            raise ValueError("BN variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.size

    @property
    def phi(self) -> np.ndarray:
        return np.sqrt(self.var + self.eps)

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5) -> "BnParams":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.full(channels, 1.0 - eps), eps)


def fuse_conv_bn_float(w, b, bn: BnParams):
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    if w.shape[0] != bn.channels or b.shape != (bn.channels,):
        raise ShapeMismatch(f"conv has {w.shape[0]} output channels, BN has {bn.channels}")
    k = bn.gamma / bn.phi
    w_fused = w * k.reshape((-1,) + (1,) * (w.ndim - 1))
    b_fused = k * (b - bn.mean) + bn.beta
    return w_fused, b_fused


# -- fixed-point multipliers --------------------------------------------------

@dataclass(frozen=True)
class FixedPointMultiplier:
    m: int
    shift: int

    def __post_init__(self):
        if not INT32_MIN <= self.m <= INT32_MAX:
            raise OutOfRange(f"multiplier {self.m} exceeds int32")
        if not 0 <= self.shift <= MAX_SHIFT:
            raise OutOfRange(f"shift {self.shift} outside [0, {MAX_SHIFT}]")

    @property
    def real(self) -> float:
        return math.ldexp(self.m, -self.shift)


ZERO_MULTIPLIER = FixedPointMultiplier(0, 0)


def fxp_encode(M: float) -> FixedPointMultiplier:
    """Normalize M to m * 2**-shift with 2**30 <= |m| < 2**31."""
    M = float(M)
    if M == 0.0:
        return ZERO_MULTIPLIER
    if not math.isfinite(M) or abs(M) >= 2.0**31:
        raise OutOfRange(f"multiplier {M} outside (-2**31, 2**31)")
    frac, exp = math.frexp(M)  # 0.5 <= |frac| < 1
    shift = 31 - exp
    m = int(round_half_away(frac * 2.0**31))
    if abs(m) == 2**31:
        m //= 2
        shift -= 1
    if shift < 0:
        raise OutOfRange(f"multiplier {M} too large for a non-negative shift")
    if shift > MAX_SHIFT:
        # tiny multipliers lose normalization rather than range
        m = int(round_half_away(math.ldexp(M, MAX_SHIFT)))
        shift = MAX_SHIFT if m else 0
    return FixedPointMultiplier(m, shift)


def _rshift_round(prod, shift):
    if shift == 0:
        return prod
    half = 1 << (shift - 1)
    if isinstance(prod, np.ndarray):
        mag = (np.abs(prod) + half) >> shift
        return np.where(prod < 0, -mag, mag)
    mag = (abs(prod) + half) >> shift
    return -mag if prod < 0 else mag


def fxp_apply(acc, fm: FixedPointMultiplier):
    """round_half_away(acc * m / 2**shift) with an exact 64-bit product.

    Accumulators beyond int32 fall back to Python integers so the product can
    never wrap.
    """
    if isinstance(acc, (int, np.integer)):
        return _rshift_round(int(acc) * fm.m, fm.shift)
    acc = np.asarray(acc)
    if acc.size and np.abs(acc.astype(np.int64)).max() > INT32_MAX:
        obj = acc.astype(object)
        out = np.vectorize(lambda a: _rshift_round(a * fm.m, fm.shift), otypes=[object])(obj)
        return out.astype(np.int64)
    prod = acc.astype(np.int64) * np.int64(fm.m)
    return _rshift_round(prod, fm.shift)


# -- PoT fusion ---------------------------------------------------------------

def weight_unit(weights) -> float:
    """Real value of one integer weight count (PoT counts are 2**-7 s_w)."""
    if isinstance(weights, PotTensor):
        return weights.scale * 2.0**-POT_EMAX
    return weights.unit


@dataclass(eq=False)
class FusedQuantLayer:
    """Integer conv after the PoT-preserving fold.

    ``channel_scale`` (gamma/phi) and ``channel_bias`` (folded bias B) are
    kept in double precision only for the float simulation engine; the
    integer engines read ``requant`` and ``bias_q``. Weight-only layers have
    no activation params and an empty ``requant``.
    """

    weights: Union[PotTensor, LinearWeights]
    in_q: Optional[AffineParams]
    out_q: Optional[AffineParams]
    requant: List[FixedPointMultiplier]
    bias_q: np.ndarray
    channel_scale: np.ndarray
    channel_bias: np.ndarray
    stride: int = 1
    pad: int = 0

    @property
    def is_pot(self) -> bool:
        return isinstance(self.weights, PotTensor)

    @property
    def quantized(self) -> bool:
        return self.in_q is not None

    @property
    def z_x(self) -> int:
        return self.in_q.zero_point

    @property
    def z_y(self) -> int:
        return self.out_q.zero_point

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


def requant_multipliers(channel_scale, s_x: float, w_unit: float, s_y: float) -> List[FixedPointMultiplier]:
    return [fxp_encode(c * s_x * w_unit / s_y) for c in np.asarray(channel_scale, dtype=np.float64)]


def quantize_bias(channel_bias, s_y: float) -> np.ndarray:
    bq = round_half_away(np.asarray(channel_bias, dtype=np.float64) / s_y)
    if (bq < INT32_MIN).any() or (bq > INT32_MAX).any():
        raise OutOfRange("quantized bias does not fit in 32 bits")
    return bq.astype(np.int32)


def fuse_conv_bn_quant(
    weights: Union[PotTensor, LinearWeights],
    b,
    bn: Optional[BnParams],
    in_q: Optional[AffineParams],
    out_q: Optional[AffineParams],
    stride: int = 1,
    pad: int = 0,
) -> FusedQuantLayer:
    """Fold BN into the requant vector and bias; weights pass through untouched."""
    c_out = weights.shape[0]
    b = np.zeros(c_out) if b is None else np.asarray(b, dtype=np.float64)
    if bn is None:
        bn = BnParams.identity(c_out)
    if bn.channels != c_out or b.shape != (c_out,):
        raise ShapeMismatch(f"weights have {c_out} output channels, BN has {bn.channels}")
    channel_scale = bn.gamma / bn.phi
    channel_bias = bn.beta + channel_scale * (b - bn.mean)
    if in_q is None or out_q is None:
        requant, bias_q = [], np.zeros(c_out, dtype=np.int32)
    else:
        requant = requant_multipliers(channel_scale, in_q.scale, weight_unit(weights), out_q.scale)
        bias_q = quantize_bias(channel_bias, out_q.scale)
    return FusedQuantLayer(weights, in_q, out_q, requant, bias_q, channel_scale, channel_bias, stride, pad)


def fuse_conv_bn_pot(
    pot_w: PotTensor,
    b,
    bn: Optional[BnParams],
    s_x: float,
    z_x: int,
    s_y: float,
    z_y: int,
    stride: int = 1,
    pad: int = 0,
) -> FusedQuantLayer:
    if not isinstance(pot_w, PotTensor):
        raise TypeError("fuse_conv_bn_pot expects PoT weights")
    if not (s_x > 0 and s_y > 0):
        raise ValueError("activation scales must be positive")
    return fuse_conv_bn_quant(pot_w, b, bn, AffineParams(s_x, z_x), AffineParams(s_y, z_y), stride, pad)
