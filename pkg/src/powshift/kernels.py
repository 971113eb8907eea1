"""Convolution engines (float reference, integer MAC, integer BAC) and the
integer glue around them: requantization, LUT activations, pooling, add.

All tensors are NCHW numpy arrays. Integer engines return accumulators whose
unit is ``s_x * w_unit`` per count, where ``w_unit = s_w * 2**-7`` for PoT
weights.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from powshift.errors import AccumulatorOverflow, ShapeMismatch
from powshift.fuse import fxp_apply, fxp_encode
from powshift.quantize import (
    POT_EMAX,
    POT_SIGN_BIT,
    QMAX,
    QMIN,
    AffineParams,
    PotTensor,
    dequantize_affine,
    pack_nibbles,
    quantize_affine,
    unpack_nibbles,
)

# |x_q - z_x| <= 255 and |w| <= 128, so one term stays below 2**15 and
# 2**16 terms fit a signed 32-bit accumulator.
MAX_INT32_TERMS = 2**16
MAX_TERM = 255 * 128

__all__ = [
    "ACTIVATIONS", "ACTIVATION_IDS", "QTensor", "accumulator_dtype", "add_multipliers", "activation_lut", "add_requant", "build_lut", "conv2d_float",
    "conv2d_int_bac", "conv2d_int_mac", "global_avgpool_int", "im2col", "maxpool2", "pack_nibbles",
    "requantize", "thread_count", "unpack_nibbles",
]


@dataclass(eq=False)
class QTensor:
    values: np.ndarray
    q: AffineParams

    def dequantize(self) -> np.ndarray:
        return dequantize_affine(self.values, self.q)


def thread_count() -> int:
    """POWSHIFT_THREADS caps kernel parallelism; 0 or unset means one per CPU."""
    raw = os.environ.get("POWSHIFT_THREADS", "0").strip() or "0"
    n = int(raw)
    return n if n > 0 else (os.cpu_count() or 1)


def accumulator_dtype(c_in: int, k: int):
    return np.int32 if k * k * c_in <= MAX_INT32_TERMS else np.int64


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int, pad_value=0) -> np.ndarray:
    """(N, C, H, W) -> (N, Ho, Wo, C*k*k), column order (c, ky, kx)."""
    n, c, h, w = x.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeMismatch(f"kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=pad_value)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)


def _check_conv_shapes(x, w_shape):
    if x.ndim != 4 or len(w_shape) != 4:
        raise ShapeMismatch("expected NCHW input and (C_out, C_in, k, k) weights")
    if x.shape[1] != w_shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, weights expect {w_shape[1]}")
    if w_shape[2] != w_shape[3]:
        raise ShapeMismatch("only square kernels are supported")


def conv2d_float(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation in double precision with zero padding."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_conv_shapes(x, w.shape)
    c_out, _, k, _ = w.shape
    cols = im2col(x, k, stride, pad)
    out = cols @ w.reshape(c_out, -1).T
    if b is not None:
        out = out + np.asarray(b, dtype=np.float64)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _centered_cols(x_q, z_x, k, stride, pad, dtype):
    x_q = np.asarray(x_q)
    if x_q.size and (x_q.min() < QMIN or x_q.max() > QMAX):
        raise AccumulatorOverflow("activations outside int8 break the accumulator bound")
    cols = im2col(x_q.astype(dtype), k, stride, pad, pad_value=z_x)
    return cols - dtype(z_x)


def _split_channels(fn, c_out: int, threads: Optional[int]):
    """Run fn(lo, hi) over output-channel blocks; results concatenate on axis 1."""
    threads = min(thread_count() if threads is None else threads, c_out)
    if threads <= 1:
        return fn(0, c_out)
    bounds = np.linspace(0, c_out, threads + 1).astype(int)
    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(lambda i: fn(bounds[i], bounds[i + 1]), range(threads)))
    return np.concatenate(parts, axis=1)


def conv2d_int_mac(x_q, q_w, z_x: int, stride: int = 1, pad: int = 0, threads: Optional[int] = 1) -> np.ndarray:
    """acc = sum((x_q - z_x) * q_w); padded taps read z_x and contribute nothing."""
    q_w = np.asarray(q_w)
    _check_conv_shapes(np.asarray(x_q), q_w.shape)
    if q_w.size and np.abs(q_w.astype(np.int64)).max() > 128:
        raise AccumulatorOverflow("integer weights must lie in [-128, 128]")
    c_out, c_in, k, _ = q_w.shape
    dtype = accumulator_dtype(c_in, k)
    cols = _centered_cols(x_q, z_x, k, stride, pad, dtype)
    wmat = q_w.reshape(c_out, -1).astype(dtype)

    def block(lo, hi):
        return (cols @ wmat[lo:hi].T).transpose(0, 3, 1, 2)

    return np.ascontiguousarray(_split_channels(block, c_out, threads))


def conv2d_int_bac(x_q, pot_w: PotTensor, z_x: int, stride: int = 1, pad: int = 0, threads: Optional[int] = 1) -> np.ndarray:
    """Shift-accumulate convolution over PoT codes.

    Terms sharing a shift amount are summed first (signed selection, no
    multiplier) and the partial sum is shifted once: sum(v << s) == (sum v) << s
    for integers, so this equals the per-term definition exactly.
    """
    codes = pot_w.codes()
    _check_conv_shapes(np.asarray(x_q), codes.shape)
    c_out, c_in, k, _ = codes.shape
    dtype = accumulator_dtype(c_in, k)
    cols = _centered_cols(x_q, z_x, k, stride, pad, dtype)
    flat = codes.reshape(c_out, -1)
    shifts = POT_EMAX - (flat & 0x7).astype(np.int64)
    signs = np.where(flat & POT_SIGN_BIT, -1, 1).astype(dtype)

    def block(lo, hi):
        acc = np.zeros(cols.shape[:3] + (hi - lo,), dtype=dtype)
        sh_blk, sg_blk = shifts[lo:hi], signs[lo:hi]
        for sh in np.unique(sh_blk):
            select = np.where(sh_blk == sh, sg_blk, 0).astype(dtype)
            acc += np.left_shift(cols @ select.T, dtype(sh))
        return acc.transpose(0, 3, 1, 2)

    return np.ascontiguousarray(_split_channels(block, c_out, threads))


def requantize(acc, layer) -> np.ndarray:
    """y_q = clamp(fxp(acc_c, M_c) + bias_q_c + z_y) per output channel.

    ``layer`` needs ``requant``, ``bias_q`` and ``out_q`` (a FusedQuantLayer or
    any layer with the same fields).
    """
    acc = np.asarray(acc)
    if acc.shape[1] != len(layer.requant):
        raise ShapeMismatch(f"{acc.shape[1]} accumulator channels, {len(layer.requant)} multipliers")
    out = np.empty(acc.shape, dtype=np.int64)
    z_y = layer.out_q.zero_point
    for c, fm in enumerate(layer.requant):
        out[:, c] = fxp_apply(acc[:, c], fm) + int(layer.bias_q[c]) + z_y
    return np.clip(out, QMIN, QMAX).astype(np.int8)


# -- activations ---------------------------------------------------------------

def _silu(x):
    return x / (1.0 + np.exp(-x))


ACTIVATIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda x: x,
    "relu": lambda x: np.maximum(x, 0.0),
    "silu": _silu,
}
ACTIVATION_IDS = {name: i for i, name in enumerate(ACTIVATIONS)}


def build_lut(f, in_q: AffineParams, out_q: AffineParams) -> np.ndarray:
    """256-entry int8 table indexed by ``x_q + 128``."""
    if isinstance(f, str):
        f = ACTIVATIONS[f]
    grid = np.arange(QMIN, QMAX + 1)
    return quantize_affine(f(dequantize_affine(grid, in_q)), out_q)


def activation_lut(x_q, lut: np.ndarray) -> np.ndarray:
    return np.asarray(lut, dtype=np.int8)[np.asarray(x_q, dtype=np.int64) - QMIN]


# -- pooling and residual add --------------------------------------------------

def maxpool2(x):
    """2x2 stride-2 max pooling; odd trailing rows/columns are dropped."""
    x = np.asarray(x)
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    v = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    return v.max(axis=(3, 5))


def global_avgpool_int(x_q, q: AffineParams) -> np.ndarray:
    """Integer mean of (x_q - z) per channel, rounded half away, output keeps q."""
    x = np.asarray(x_q, dtype=np.int64) - q.zero_point
    n, c, h, w = x.shape
    total = x.reshape(n, c, -1).sum(axis=2)
    count = h * w
    mag = (2 * np.abs(total) + count) // (2 * count)
    mean = np.where(total < 0, -mag, mag)
    return np.clip(mean + q.zero_point, QMIN, QMAX).astype(np.int8).reshape(n, c, 1, 1)


def add_multipliers(a_q: AffineParams, b_q: AffineParams, out_q: AffineParams):
    return fxp_encode(a_q.scale / out_q.scale), fxp_encode(b_q.scale / out_q.scale)


def add_requant(a: QTensor, b: QTensor, out_q: AffineParams, multipliers=None) -> QTensor:
    """Saturating residual add through two fixed-point multipliers (<= 1 LSB)."""
    if a.values.shape != b.values.shape:
        raise ShapeMismatch(f"cannot add {a.values.shape} and {b.values.shape}")
    fm_a, fm_b = multipliers or add_multipliers(a.q, b.q, out_q)
    da = a.values.astype(np.int64) - a.q.zero_point
    db = b.values.astype(np.int64) - b.q.zero_point
    y = fxp_apply(da, fm_a) + fxp_apply(db, fm_b) + out_q.zero_point
    return QTensor(np.clip(y, QMIN, QMAX).astype(np.int8), out_q)
