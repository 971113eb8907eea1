"""Quantized (PWRQ) and float (PWRF) model containers, the sequential
executor with selectable engine, cross-engine verification and model stats.

Both containers are little-endian sectioned binaries::

    magic(4) u32 version u32 layer_count  model-block  layer*
    layer := u16 kind  u32 payload_len  payload

A model is a flat list of layers; an ``add`` layer names an earlier layer
(or -1 for the model input) whose output is its second operand.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from powshift import kernels
from powshift.errors import (
    BadMagic,
    CorruptSection,
    EmptyCalibrationSet,
    ShapeMismatch,
    UnsupportedEngine,
    UnsupportedLayer,
    ValidationFailed,
    VersionUnsupported,
)
from powshift.event_io import DEFAULT_WINDOW_US, EventFrame
from powshift.fuse import (
    BnParams,
    FixedPointMultiplier,
    FusedQuantLayer,
    fuse_conv_bn_quant,
)
from powshift.quantize import (
    AffineParams,
    CalibrationObserver,
    LinearWeights,
    PotTensor,
    dequantize_affine,
    quantize_affine,
    quantize_linear,
    quantize_pot,
    quantize_uniform,
    pot_scale,
    INT4_LEVELS,
)

PWRQ_MAGIC = b"PWRQ"
PWRF_MAGIC = b"PWRF"
FORMAT_VERSION = 1

KIND_IDS = {"conv_pot": 1, "conv_int8": 2, "maxpool": 3, "add": 4, "activation": 5, "gap": 6, "dense": 7}
KIND_NAMES = {v: k for k, v in KIND_IDS.items()}
FLOAT_KIND_IDS = {"conv": 1, "maxpool": 3, "add": 4, "activation": 5, "gap": 6, "dense": 7}
FLOAT_KIND_NAMES = {v: k for k, v in FLOAT_KIND_IDS.items()}

ENGINES = ("float", "mac", "bac")
SCHEMES = ("int8", "int4w", "log4w", "log4w_int8a")
ACTIVATION_SCHEMES = ("int8", "log4w_int8a")


# -- quantized layer specs --------------------------------------------------------

@dataclass(eq=False)
class ConvSpec:
    """conv_pot, conv_int8 or dense (a 1x1 conv over a 1x1 map)."""

    kind: str
    layer: FusedQuantLayer

    @property
    def in_q(self):
        return self.layer.in_q

    @property
    def out_q(self):
        return self.layer.out_q


@dataclass(eq=False)
class ActivationSpec:
    func: str
    in_q: Optional[AffineParams]
    out_q: Optional[AffineParams]
    lut: Optional[np.ndarray] = None
    kind: str = field(default="activation", init=False)


@dataclass(eq=False)
class MaxPoolSpec:
    q: Optional[AffineParams]
    kind: str = field(default="maxpool", init=False)

    @property
    def in_q(self):
        return self.q

    @property
    def out_q(self):
        return self.q


@dataclass(eq=False)
class GapSpec:
    q: Optional[AffineParams]
    kind: str = field(default="gap", init=False)

    @property
    def in_q(self):
        return self.q

    @property
    def out_q(self):
        return self.q


@dataclass(eq=False)
class AddSpec:
    tap: int
    in_q: Optional[AffineParams]
    tap_q: Optional[AffineParams]
    out_q: Optional[AffineParams]
    multipliers: Optional[Tuple[FixedPointMultiplier, FixedPointMultiplier]] = None
    kind: str = field(default="add", init=False)

    def __post_init__(self):
        if self.multipliers is None and self.out_q is not None:
            self.multipliers = kernels.add_multipliers(self.in_q, self.tap_q, self.out_q)


LayerSpec = Union[ConvSpec, ActivationSpec, MaxPoolSpec, GapSpec, AddSpec]


@dataclass(eq=False)
class QuantModel:
    layers: List[LayerSpec]
    input_q: Optional[AffineParams]
    in_shape: Tuple[int, int, int]
    window_us: int = DEFAULT_WINDOW_US
    version: int = FORMAT_VERSION

    @property
    def weight_only(self) -> bool:
        """True when activations stay float (log4w/int4w simulation models)."""
        return self.input_q is None

    def conv_layers(self):
        return [s for s in self.layers if isinstance(s, ConvSpec)]


# -- float model -------------------------------------------------------------------

@dataclass(eq=False)
class FloatConv:
    w: np.ndarray
    b: Optional[np.ndarray] = None
    bn: Optional[BnParams] = None
    stride: int = 1
    pad: int = 0
    kind: str = field(default="conv", init=False)


@dataclass(eq=False)
class FloatDense:
    w: np.ndarray  # (C_out, C_in)
    b: Optional[np.ndarray] = None
    kind: str = field(default="dense", init=False)


@dataclass(eq=False)
class FloatActivation:
    func: str
    kind: str = field(default="activation", init=False)


@dataclass(eq=False)
class FloatMaxPool:
    kind: str = field(default="maxpool", init=False)


@dataclass(eq=False)
class FloatGap:
    kind: str = field(default="gap", init=False)


@dataclass(eq=False)
class FloatAdd:
    tap: int
    kind: str = field(default="add", init=False)


@dataclass(eq=False)
class FloatModel:
    layers: list
    in_shape: Tuple[int, int, int]
    window_us: int = DEFAULT_WINDOW_US
    version: int = FORMAT_VERSION


# -- binary helpers ------------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.parts: List[bytes] = []

    def pack(self, fmt, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def raw(self, data: bytes):
        self.parts.append(bytes(data))

    def array(self, a, dtype):
        self.parts.append(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def qparams(self, q: Optional[AffineParams]):
        if q is None:
            self.pack("B", 0)
        else:
            self.pack("Bdb", 1, q.scale, q.zero_point)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, base: int = 0):
        self.data = data
        self.pos = 0
        self.base = base

    @property
    def offset(self):
        return self.base + self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptSection(self.offset, f"need {n} bytes, {len(self.data) - self.pos} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        vals = s.unpack(self.take(s.size))
        return vals if len(vals) > 1 else vals[0]

    def array(self, dtype, count):
        dtype = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).astype(dtype.newbyteorder("="))

    def qparams(self) -> Optional[AffineParams]:
        at = self.offset
        if not self.unpack("B"):
            return None
        scale, zp = self.unpack("db")
        try:
            return AffineParams(scale, zp)
        except ValueError as exc:
            raise CorruptSection(at, str(exc)) from None

    def done(self):
        if self.pos != len(self.data):
            raise CorruptSection(self.offset, f"{len(self.data) - self.pos} unexpected trailing bytes")


def _header(r: _Reader, magic: bytes):
    got = r.data[:4]
    if got != magic:
        raise BadMagic(magic, got)
    r.take(4)
    version, n_layers = r.unpack("II")
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"{magic.decode()} version {version} (supported: {FORMAT_VERSION})")
    return version, n_layers


def _write_model_block(w: _Writer, in_shape, window_us):
    c, h, wd = in_shape
    w.pack("HHHI", c, h, wd, window_us)


def _write_layer(w: _Writer, kind_id: int, payload: bytes):
    w.pack("HI", kind_id, len(payload))
    w.raw(payload)


# -- PWRQ --------------------------------------------------------------------------

def _conv_payload(spec: ConvSpec) -> bytes:
    L = spec.layer
    w = _Writer()
    c_out, c_in, k, _ = L.weights.shape
    w.pack("HHBBB", c_out, c_in, k, L.stride, L.pad)
    w.qparams(L.in_q)
    w.qparams(L.out_q)
    pot = isinstance(L.weights, PotTensor)
    w.pack("Bd", 1 if pot else 0, L.weights.scale if pot else L.weights.unit)
    w.pack("B", 1 if L.requant else 0)
    for fm in L.requant:
        w.pack("iB", fm.m, fm.shift)
    w.array(L.bias_q, "<i4")
    w.array(L.channel_scale, "<f8")
    w.array(L.channel_bias, "<f8")
    data = L.weights.packed if pot else np.ascontiguousarray(L.weights.values, dtype=np.int8).tobytes()
    w.pack("I", len(data))
    w.raw(data)
    return w.getvalue()


def _read_conv(r: _Reader, kind: str) -> ConvSpec:
    c_out, c_in, k, stride, pad = r.unpack("HHBBB")
    in_q, out_q = r.qparams(), r.qparams()
    pot, scale = r.unpack("Bd")
    if (kind == "conv_pot" and not pot) or (kind == "conv_int8" and pot):
        raise CorruptSection(r.offset, f"{kind} layer with mismatched weight format")
    has_requant = r.unpack("B")
    requant = []
    if has_requant:
        for _ in range(c_out):
            m, s = r.unpack("iB")
            try:
                requant.append(FixedPointMultiplier(m, s))
            except Exception as exc:
                raise CorruptSection(r.offset, str(exc)) from None
    bias_q = r.array("i4", c_out)
    channel_scale = r.array("f8", c_out)
    channel_bias = r.array("f8", c_out)
    n = c_out * c_in * k * k
    nbytes = r.unpack("I")
    data = r.take(nbytes)
    if pot:
        if nbytes != (n + 1) // 2:
            raise CorruptSection(r.offset, f"PoT weight section holds {nbytes} bytes, expected {(n + 1) // 2}")
        weights = PotTensor((c_out, c_in, k, k), bytes(data), scale)
    else:
        if nbytes != n:
            raise CorruptSection(r.offset, f"int8 weight section holds {nbytes} bytes, expected {n}")
        weights = LinearWeights(np.frombuffer(data, dtype=np.int8).reshape(c_out, c_in, k, k).copy(), scale)
    layer = FusedQuantLayer(weights, in_q, out_q, requant, bias_q.astype(np.int32), channel_scale, channel_bias, stride, pad)
    return ConvSpec(kind, layer)


def _layer_payload(spec) -> bytes:
    if isinstance(spec, ConvSpec):
        return _conv_payload(spec)
    w = _Writer()
    if isinstance(spec, ActivationSpec):
        w.pack("B", kernels.ACTIVATION_IDS[spec.func])
        w.qparams(spec.in_q)
        w.qparams(spec.out_q)
        if spec.lut is None:
            w.pack("H", 0)
        else:
            w.pack("H", len(spec.lut))
            w.array(spec.lut, np.int8)
    elif isinstance(spec, (MaxPoolSpec, GapSpec)):
        w.qparams(spec.q)
    elif isinstance(spec, AddSpec):
        w.pack("h", spec.tap)
        w.qparams(spec.in_q)
        w.qparams(spec.tap_q)
        w.qparams(spec.out_q)
        if spec.multipliers is None:
            w.pack("B", 0)
        else:
            w.pack("B", 1)
            for fm in spec.multipliers:
                w.pack("iB", fm.m, fm.shift)
    else:
        raise UnsupportedLayer(f"cannot serialize {type(spec).__name__}")
    return w.getvalue()


def _read_layer(r: _Reader, kind: str):
    if kind in ("conv_pot", "conv_int8", "dense"):
        return _read_conv(r, kind)
    if kind == "activation":
        func_id = r.unpack("B")
        names = list(kernels.ACTIVATIONS)
        if func_id >= len(names):
            raise CorruptSection(r.offset, f"unknown activation id {func_id}")
        in_q, out_q = r.qparams(), r.qparams()
        n = r.unpack("H")
        lut = r.array("i1", n).astype(np.int8) if n else None
        return ActivationSpec(names[func_id], in_q, out_q, lut)
    if kind == "maxpool":
        return MaxPoolSpec(r.qparams())
    if kind == "gap":
        return GapSpec(r.qparams())
    if kind == "add":
        tap = r.unpack("h")
        in_q, tap_q, out_q = r.qparams(), r.qparams(), r.qparams()
        mult = None
        if r.unpack("B"):
            mult = tuple(FixedPointMultiplier(*r.unpack("iB")) for _ in range(2))
        return AddSpec(tap, in_q, tap_q, out_q, mult)
    raise UnsupportedLayer(kind)


def save_pwrq(model: QuantModel) -> bytes:
    validate_model(model)
    w = _Writer()
    w.raw(PWRQ_MAGIC)
    w.pack("II", model.version, len(model.layers))
    _write_model_block(w, model.in_shape, model.window_us)
    w.qparams(model.input_q)
    for spec in model.layers:
        _write_layer(w, KIND_IDS[spec.kind], _layer_payload(spec))
    return w.getvalue()


def _iter_sections(r: _Reader, n_layers: int, names: Dict[int, str]):
    for _ in range(n_layers):
        at = r.offset
        kind_id, length = r.unpack("HI")
        if kind_id not in names:
            raise CorruptSection(at, f"unknown layer kind {kind_id}")
        body = _Reader(r.take(length), r.offset - length)
        yield names[kind_id], body


def load_pwrq(data: bytes) -> QuantModel:
    data = bytes(data)
    if data[:4] != PWRQ_MAGIC:
        raise BadMagic(PWRQ_MAGIC, data[:4])
    r = _Reader(data)
    version, n_layers = _header(r, PWRQ_MAGIC)
    c, h, wd, window_us = r.unpack("HHHI")
    input_q = r.qparams()
    layers = []
    for kind, body in _iter_sections(r, n_layers, KIND_NAMES):
        layers.append(_read_layer(body, kind))
        body.done()
    r.done()
    model = QuantModel(layers, input_q, (c, h, wd), window_us, version)
    validate_model(model)
    return model


# -- PWRF --------------------------------------------------------------------------

def save_pwrf(model: FloatModel) -> bytes:
    w = _Writer()
    w.raw(PWRF_MAGIC)
    w.pack("II", model.version, len(model.layers))
    _write_model_block(w, model.in_shape, model.window_us)
    for layer in model.layers:
        p = _Writer()
        if isinstance(layer, FloatConv):
            c_out, c_in, k, _ = layer.w.shape
            p.pack("HHBBBBB", c_out, c_in, k, layer.stride, layer.pad, layer.b is not None, layer.bn is not None)
            p.array(layer.w, "<f8")
            if layer.b is not None:
                p.array(layer.b, "<f8")
            if layer.bn is not None:
                for v in (layer.bn.gamma, layer.bn.beta, layer.bn.mean, layer.bn.var):
                    p.array(v, "<f8")
                p.pack("d", layer.bn.eps)
        elif isinstance(layer, FloatDense):
            c_out, c_in = layer.w.shape
            p.pack("HHB", c_out, c_in, layer.b is not None)
            p.array(layer.w, "<f8")
            if layer.b is not None:
                p.array(layer.b, "<f8")
        elif isinstance(layer, FloatActivation):
            p.pack("B", kernels.ACTIVATION_IDS[layer.func])
        elif isinstance(layer, FloatAdd):
            p.pack("h", layer.tap)
        elif not isinstance(layer, (FloatMaxPool, FloatGap)):
            raise UnsupportedLayer(type(layer).__name__)
        _write_layer(w, FLOAT_KIND_IDS[layer.kind], p.getvalue())
    return w.getvalue()


def load_pwrf(data: bytes) -> FloatModel:
    data = bytes(data)
    if data[:4] != PWRF_MAGIC:
        raise BadMagic(PWRF_MAGIC, data[:4])
    r = _Reader(data)
    version, n_layers = _header(r, PWRF_MAGIC)
    c, h, wd, window_us = r.unpack("HHHI")
    layers = []
    for kind, p in _iter_sections(r, n_layers, FLOAT_KIND_NAMES):
        if kind == "conv":
            c_out, c_in, k, stride, pad, has_b, has_bn = p.unpack("HHBBBBB")
            w = p.array("f8", c_out * c_in * k * k).reshape(c_out, c_in, k, k)
            b = p.array("f8", c_out) if has_b else None
            bn = None
            if has_bn:
                g, be, mu, var = (p.array("f8", c_out) for _ in range(4))
                bn = BnParams(g, be, mu, var, p.unpack("d"))
            layers.append(FloatConv(w, b, bn, stride, pad))
        elif kind == "dense":
            c_out, c_in, has_b = p.unpack("HHB")
            w = p.array("f8", c_out * c_in).reshape(c_out, c_in)
            layers.append(FloatDense(w, p.array("f8", c_out) if has_b else None))
        elif kind == "activation":
            func_id = p.unpack("B")
            names = list(kernels.ACTIVATIONS)
            if func_id >= len(names):
                raise CorruptSection(p.offset, f"unknown activation id {func_id}")
            layers.append(FloatActivation(names[func_id]))
        elif kind == "maxpool":
            layers.append(FloatMaxPool())
        elif kind == "gap":
            layers.append(FloatGap())
        elif kind == "add":
            layers.append(FloatAdd(p.unpack("h")))
        p.done()
    r.done()
    return FloatModel(layers, (c, h, wd), window_us, version)


# -- validation ----------------------------------------------------------------------

def _shape_after(spec_kind, geom, shape, index):
    c, h, w = shape
    if spec_kind in ("conv", "dense"):
        c_out, c_in, k, stride, pad = geom
        if c_in != c:
            raise ValidationFailed(f"layer {index}: expects {c_in} input channels, receives {c}")
        if spec_kind == "dense" and (h, w) != (1, 1):
            raise ValidationFailed(f"layer {index}: dense layer needs a 1x1 input map, got {h}x{w}")
        if h + 2 * pad < k or w + 2 * pad < k:
            raise ValidationFailed(f"layer {index}: kernel {k} larger than padded {h}x{w} input")
        return c_out, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    if spec_kind == "maxpool":
        if h < 2 or w < 2:
            raise ValidationFailed(f"layer {index}: maxpool on {h}x{w} map")
        return c, h // 2, w // 2
    if spec_kind == "gap":
        return c, 1, 1
    return shape


def validate_model(model: QuantModel) -> None:
    """Check the shape chain, the quant-param chain, LUTs and multipliers."""
    shapes = [tuple(model.in_shape)]
    out_qs = [model.input_q]
    quantized = model.input_q is not None
    for i, spec in enumerate(model.layers):
        prev_q, prev_shape = out_qs[-1], shapes[-1]
        if spec.in_q != prev_q:
            raise ValidationFailed(f"layer {i} ({spec.kind}): input params {spec.in_q} != previous output {prev_q}")
        if quantized and spec.out_q is None:
            raise ValidationFailed(f"layer {i} ({spec.kind}): missing output params in an integer model")
        if not quantized and spec.out_q is not None:
            raise ValidationFailed(f"layer {i} ({spec.kind}): activation params in a weight-only model")
        if isinstance(spec, ConvSpec):
            L = spec.layer
            c_out, c_in, k, k2 = L.weights.shape
            if k != k2:
                raise ValidationFailed(f"layer {i}: non-square kernel")
            if spec.kind == "conv_pot" and not L.is_pot:
                raise ValidationFailed(f"layer {i}: conv_pot layer without PoT weights")
            if spec.kind == "conv_int8" and L.is_pot:
                raise ValidationFailed(f"layer {i}: conv_int8 layer with PoT weights")
            if quantized and len(L.requant) != c_out:
                raise ValidationFailed(f"layer {i}: {len(L.requant)} requant multipliers for {c_out} channels")
            for name in ("bias_q", "channel_scale", "channel_bias"):
                if np.asarray(getattr(L, name)).shape != (c_out,):
                    raise ValidationFailed(f"layer {i}: {name} length != {c_out}")
            kind = "dense" if spec.kind == "dense" else "conv"
            shapes.append(_shape_after(kind, (c_out, c_in, k, L.stride, L.pad), prev_shape, i))
        elif isinstance(spec, ActivationSpec):
            if spec.func not in kernels.ACTIVATIONS:
                raise ValidationFailed(f"layer {i}: unknown activation {spec.func!r}")
            if quantized and (spec.lut is None or len(spec.lut) != 256):
                raise ValidationFailed(f"layer {i}: integer activation needs a 256-entry LUT")
            shapes.append(prev_shape)
        elif isinstance(spec, AddSpec):
            if not -1 <= spec.tap < i:
                raise ValidationFailed(f"layer {i}: add references tap {spec.tap}")
            if shapes[spec.tap + 1] != prev_shape:
                raise ValidationFailed(f"layer {i}: add operands {shapes[spec.tap + 1]} and {prev_shape} differ")
            if spec.tap_q != out_qs[spec.tap + 1]:
                raise ValidationFailed(f"layer {i}: add tap params do not match layer {spec.tap}")
            if quantized and spec.multipliers is None:
                raise ValidationFailed(f"layer {i}: add without multipliers")
            shapes.append(prev_shape)
        elif isinstance(spec, (MaxPoolSpec, GapSpec)):
            shapes.append(_shape_after(spec.kind, None, prev_shape, i))
        else:
            raise ValidationFailed(f"layer {i}: unknown layer type {type(spec).__name__}")
        out_qs.append(spec.out_q)


def output_shapes(model: QuantModel) -> List[Tuple[int, int, int]]:
    shapes = [tuple(model.in_shape)]
    for i, spec in enumerate(model.layers):
        if isinstance(spec, ConvSpec):
            L = spec.layer
            c_out, c_in, k, _ = L.weights.shape
            kind = "dense" if spec.kind == "dense" else "conv"
            shapes.append(_shape_after(kind, (c_out, c_in, k, L.stride, L.pad), shapes[-1], i))
        else:
            shapes.append(_shape_after(spec.kind, None, shapes[-1], i))
    return shapes[1:]


# -- execution ------------------------------------------------------------------------

@dataclass(eq=False)
class RunResult:
    logits: np.ndarray  # (N, C) real-valued
    output: np.ndarray  # last layer output (int8 for quantized models)
    taps: List[np.ndarray]
    input: np.ndarray

    @property
    def argmax(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


def _as_batch(frame, in_shape) -> np.ndarray:
    if isinstance(frame, EventFrame):
        frame = frame.values
    x = np.asarray(frame, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None] if in_shape[0] == 1 and x.shape[0] != 1 else x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(in_shape):
        raise ShapeMismatch(f"input {tuple(x.shape[1:]) if x.ndim == 4 else x.shape} does not match model input {tuple(in_shape)}")
    return x


def run_layer(spec, x, engine: str, history: Sequence[np.ndarray] = (), threads: Optional[int] = 1) -> np.ndarray:
    """Execute one layer. ``history[j + 1]`` is layer j's output, ``history[0]`` the input."""
    quantized = spec.out_q is not None
    if isinstance(spec, ConvSpec):
        L = spec.layer
        if spec.kind == "dense" and x.shape[2:] != (1, 1):
            raise ShapeMismatch(f"dense layer needs a 1x1 map, got {x.shape[2:]}")
        if engine == "float":
            xr = dequantize_affine(x, L.in_q) if quantized else x
            y = kernels.conv2d_float(xr, L.weights.dequantize(), None, L.stride, L.pad)
            y = y * L.channel_scale[None, :, None, None] + L.channel_bias[None, :, None, None]
            return quantize_affine(y, L.out_q) if quantized else y
        if engine == "bac" and L.is_pot:
            acc = kernels.conv2d_int_bac(x, L.weights, L.z_x, L.stride, L.pad, threads=threads)
        else:
            acc = kernels.conv2d_int_mac(x, L.weights.int_weights(), L.z_x, L.stride, L.pad, threads=threads)
        return kernels.requantize(acc, L)
    if isinstance(spec, ActivationSpec):
        if engine == "float" or not quantized:
            f = kernels.ACTIVATIONS[spec.func]
            if not quantized:
                return f(x)
            return quantize_affine(f(dequantize_affine(x, spec.in_q)), spec.out_q)
        return kernels.activation_lut(x, spec.lut)
    if isinstance(spec, MaxPoolSpec):
        return kernels.maxpool2(x)
    if isinstance(spec, GapSpec):
        if not quantized:
            return x.mean(axis=(2, 3), keepdims=True)
        if engine == "float":
            return quantize_affine(dequantize_affine(x, spec.q).mean(axis=(2, 3), keepdims=True), spec.q)
        return kernels.global_avgpool_int(x, spec.q)
    if isinstance(spec, AddSpec):
        other = history[spec.tap + 1]
        if not quantized:
            return x + other
        if engine == "float":
            y = dequantize_affine(x, spec.in_q) + dequantize_affine(other, spec.tap_q)
            return quantize_affine(y, spec.out_q)
        out = kernels.add_requant(kernels.QTensor(x, spec.in_q), kernels.QTensor(other, spec.tap_q), spec.out_q, spec.multipliers)
        return out.values
    raise UnsupportedLayer(type(spec).__name__)


def quantize_input(model: QuantModel, frame) -> np.ndarray:
    x = _as_batch(frame, model.in_shape)
    return x if model.input_q is None else quantize_affine(x, model.input_q)


def run(model: QuantModel, frame, engine: str = "bac", keep_taps: bool = True, threads: Optional[int] = 1) -> RunResult:
    """Run a frame (or an (N, C, H, W) batch) through the model.

    Integer models pass int8 tensors between layers for every engine; the
    float engine recomputes each layer in double precision from dequantized
    values and quantizes at the layer boundary.
    """
    if engine not in ENGINES:
        raise UnsupportedEngine(f"unknown engine {engine!r}")
    if model.weight_only and engine != "float":
        raise UnsupportedEngine(f"weight-only model can only run on the float engine, not {engine!r}")
    x = quantize_input(model, frame)
    history = [x]
    for spec in model.layers:
        x = run_layer(spec, x, engine, history, threads)
        history.append(x)
    out = x.reshape(x.shape[0], -1)
    last_q = model.layers[-1].out_q if model.layers else model.input_q
    logits = dequantize_affine(out, last_q) if last_q is not None else out.astype(np.float64)
    taps = history[1:] if keep_taps else []
    return RunResult(logits, out, taps, history[0])


def predict(model: QuantModel, frames, engine: str = "bac", batch: int = 256) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    outs = [run(model, frames[i : i + batch], engine, keep_taps=False).logits for i in range(0, len(frames), batch)]
    return np.concatenate(outs) if outs else np.zeros((0, 0))


# -- verification ----------------------------------------------------------------------

@dataclass
class VerifyReport:
    n_frames: int
    mac_equals_bac: bool
    worst_deviation: int
    per_layer_worst: List[int]
    first_failing_layer: Optional[int]

    @property
    def passed(self) -> bool:
        return self.mac_equals_bac and self.first_failing_layer is None


def random_frames(model: QuantModel, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(-1, 2, size=(n,) + tuple(model.in_shape)).astype(np.float64)


def verify_model(model: QuantModel, frames, tolerance: int = 1) -> VerifyReport:
    """mac vs bac bitwise, then bac vs the float engine layer by layer.

    The float reference for layer i is fed bac's own input to layer i, so the
    bound measures each layer's rounding rather than drift accumulated upstream.
    """
    if model.weight_only:
        raise UnsupportedEngine("verification needs an integer-executable model")
    mac = run(model, frames, "mac")
    bac = run(model, frames, "bac")
    same = all(np.array_equal(a, b) for a, b in zip(mac.taps, bac.taps))
    history = [bac.input] + bac.taps
    worst, first_fail = [], None
    for i, spec in enumerate(model.layers):
        ref = run_layer(spec, history[i], "float", history)
        dev = int(np.max(np.abs(ref.astype(np.int64) - history[i + 1].astype(np.int64)))) if ref.size else 0
        worst.append(dev)
        if dev > tolerance and first_fail is None:
            first_fail = i
    if not same and first_fail is None:
        first_fail = next(i for i, (a, b) in enumerate(zip(mac.taps, bac.taps)) if not np.array_equal(a, b))
    return VerifyReport(len(bac.input), same, max(worst, default=0), worst, first_fail)


# -- statistics ------------------------------------------------------------------------

def _weight_section_bytes(layer: FusedQuantLayer) -> int:
    w = layer.weights
    n = (w.size + 1) // 2 if isinstance(w, PotTensor) else w.size
    return 4 + n


def model_stats(model) -> Dict[str, object]:
    """Parameter counts, conv-weight fraction and packed-vs-float weight bytes.

    The float baseline is 4 bytes per weight regardless of the PWRF storage
    width. Per-layer rows are under ``layers``.
    """
    conv_w = conv_other = dense_w = dense_other = 0
    rows = []
    if isinstance(model, FloatModel):
        for i, layer in enumerate(model.layers):
            if isinstance(layer, FloatConv):
                conv_w += layer.w.size
                c = layer.w.shape[0]
                conv_other += (c if layer.b is not None else 0) + (2 * c if layer.bn is not None else 0)
                rows.append({"index": i, "kind": "conv", "weights": layer.w.size})
            elif isinstance(layer, FloatDense):
                dense_w += layer.w.size
                dense_other += layer.w.shape[0] if layer.b is not None else 0
                rows.append({"index": i, "kind": "dense", "weights": layer.w.size})
    else:
        for i, spec in enumerate(model.layers):
            if not isinstance(spec, ConvSpec):
                continue
            L = spec.layer
            n = L.weights.size
            c = L.out_channels
            stored = _weight_section_bytes(L)
            if spec.kind == "dense":
                dense_w += n
                dense_other += 2 * c
            else:
                conv_w += n
                conv_other += 2 * c
            rows.append({
                "index": i,
                "kind": spec.kind,
                "weights": n,
                "weight_bytes": stored,
                "float_bytes": 4 * n,
                "ratio": 4 * n / stored,
            })
    total = conv_w + conv_other + dense_w + dense_other
    report: Dict[str, object] = {
        "params_total": total,
        "params_conv_weights": conv_w,
        "params_conv_other": conv_other,
        "params_dense_weights": dense_w,
        "params_dense_other": dense_other,
        "conv_weight_fraction": conv_w / total if total else 0.0,
    }
    if isinstance(model, QuantModel):
        pot_rows = [r for r in rows if r["kind"] == "conv_pot"]
        n_pot = sum(r["weights"] for r in pot_rows)
        pot_bytes = sum(r["weight_bytes"] for r in pot_rows)
        all_bytes = sum(r["weight_bytes"] for r in rows)
        all_n = sum(r["weights"] for r in rows)
        report.update({
            "conv_pot_weights": n_pot,
            "conv_pot_weight_bytes": pot_bytes,
            "conv_pot_float_bytes": 4 * n_pot,
            "conv_pot_compression_ratio": (4 * n_pot / pot_bytes) if pot_bytes else 0.0,
            "weight_bytes": all_bytes,
            "float_weight_bytes": 4 * all_n,
            "compression_ratio": (4 * all_n / all_bytes) if all_bytes else 0.0,
        })
    report["layers"] = rows
    return report


# -- float forward and model quantization --------------------------------------------------

def _conv_like_indices(model: FloatModel) -> List[int]:
    return [i for i, l in enumerate(model.layers) if isinstance(l, (FloatConv, FloatDense))]


def _dense_as_conv(w):
    return np.asarray(w, dtype=np.float64)[:, :, None, None]


def float_forward(model: FloatModel, x, weight_map=None, collect: bool = False):
    """Inference-mode forward (BN uses running statistics).

    ``weight_map(index, w)`` lets callers substitute fake-quantized weights.
    Returns logits, or (logits, taps) with ``collect``; taps[0] is the input.
    """
    x = _as_batch(x, model.in_shape)
    taps = [x]
    for i, layer in enumerate(model.layers):
        if isinstance(layer, FloatConv):
            w = layer.w if weight_map is None else weight_map(i, layer.w)
            y = kernels.conv2d_float(x, w, layer.b, layer.stride, layer.pad)
            if layer.bn is not None:
                k = layer.bn.gamma / layer.bn.phi
                y = (y - layer.bn.mean[None, :, None, None]) * k[None, :, None, None] + layer.bn.beta[None, :, None, None]
            x = y
        elif isinstance(layer, FloatDense):
            w = layer.w if weight_map is None else weight_map(i, layer.w)
            x = kernels.conv2d_float(x, _dense_as_conv(w), layer.b)
        elif isinstance(layer, FloatActivation):
            x = kernels.ACTIVATIONS[layer.func](x)
        elif isinstance(layer, FloatMaxPool):
            x = kernels.maxpool2(x)
        elif isinstance(layer, FloatGap):
            x = x.mean(axis=(2, 3), keepdims=True)
        elif isinstance(layer, FloatAdd):
            x = x + taps[layer.tap + 1]
        else:
            raise UnsupportedLayer(type(layer).__name__)
        taps.append(x)
    logits = x.reshape(x.shape[0], -1)
    return (logits, taps) if collect else logits


def weight_scheme(model: FloatModel, scheme: str, exempt_first_last: bool = False) -> Dict[int, str]:
    """Weight format per conv-like layer index: 'pot', 'int8' or 'int4'."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    idx = _conv_like_indices(model)
    base = {"int8": "int8", "int4w": "int4", "log4w": "pot", "log4w_int8a": "pot"}[scheme]
    out = {i: base for i in idx}
    if exempt_first_last and idx:
        out[idx[0]] = out[idx[-1]] = "int8"
    return out


def quantize_weights(w, fmt: str):
    w = np.asarray(w, dtype=np.float64)
    if fmt == "pot":
        return quantize_pot(w)
    if fmt == "int4":
        return LinearWeights(quantize_uniform(w, pot_scale(w), INT4_LEVELS), pot_scale(w) / INT4_LEVELS)
    if fmt == "int8":
        return quantize_linear(w, 127)
    raise ValueError(fmt)


def fake_quant_weights(w, fmt: Optional[str]):
    if fmt is None:
        return w
    return quantize_weights(w, fmt).dequantize()


def calibrate_model(model: FloatModel, frames, formats: Dict[int, str], mode: str = "minmax", percentile: float = 99.9) -> List[AffineParams]:
    """Boundary params for the input and every layer output, in that order.

    Max-pool and global-average-pool outputs reuse their input params since
    the integer ops never leave the input grid.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size == 0 or len(frames) == 0:
        raise EmptyCalibrationSet("no calibration frames")
    observers = None
    keep = mode == "percentile"
    for start in range(0, len(frames), 256):
        _, taps = float_forward(model, frames[start : start + 256], lambda i, w: fake_quant_weights(w, formats.get(i)), collect=True)
        if observers is None:
            observers = [CalibrationObserver(keep) for _ in taps]
        for obs, t in zip(observers, taps):
            obs.update(t)
    params = [observers[0].params(mode, percentile)]
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (FloatMaxPool, FloatGap)):
            params.append(params[-1])
        else:
            params.append(observers[i + 1].params(mode, percentile))
    return params


def quantize_model(
    model: FloatModel,
    calib_frames=None,
    scheme: str = "log4w_int8a",
    exempt_first_last: bool = False,
    calib_mode: str = "minmax",
    percentile: float = 99.9,
    act_params: Optional[List[AffineParams]] = None,
) -> QuantModel:
    """Apply a weight scheme, calibrate activations and fold BN per layer.

    ``act_params`` (input first, then one per layer) overrides calibration,
    which is how training hands its fake-quant ranges to the exported model.
    """
    formats = weight_scheme(model, scheme, exempt_first_last)
    integer = scheme in ACTIVATION_SCHEMES
    if integer:
        if act_params is None:
            if calib_frames is None or len(calib_frames) == 0:
                raise EmptyCalibrationSet(f"scheme {scheme} needs calibration frames")
            act_params = calibrate_model(model, calib_frames, formats, calib_mode, percentile)
        if len(act_params) != len(model.layers) + 1:
            raise ValueError("act_params needs one entry for the input plus one per layer")
    else:
        act_params = [None] * (len(model.layers) + 1)
    layers: List[LayerSpec] = []
    for i, layer in enumerate(model.layers):
        in_q, out_q = act_params[i], act_params[i + 1]
        if isinstance(layer, (FloatConv, FloatDense)):
            fmt = formats[i]
            if isinstance(layer, FloatConv):
                w, b, bn, stride, pad = layer.w, layer.b, layer.bn, layer.stride, layer.pad
            else:
                w, b, bn, stride, pad = _dense_as_conv(layer.w), layer.b, None, 1, 0
            fused = fuse_conv_bn_quant(quantize_weights(w, fmt), b, bn, in_q, out_q, stride, pad)
            if isinstance(layer, FloatDense):
                kind = "dense"
            else:
                kind = "conv_pot" if fmt == "pot" else "conv_int8"
            layers.append(ConvSpec(kind, fused))
        elif isinstance(layer, FloatActivation):
            lut = kernels.build_lut(layer.func, in_q, out_q) if integer else None
            layers.append(ActivationSpec(layer.func, in_q, out_q, lut))
        elif isinstance(layer, FloatMaxPool):
            layers.append(MaxPoolSpec(in_q))
        elif isinstance(layer, FloatGap):
            layers.append(GapSpec(in_q))
        elif isinstance(layer, FloatAdd):
            layers.append(AddSpec(layer.tap, in_q, act_params[layer.tap + 1], out_q))
        else:
            raise UnsupportedLayer(type(layer).__name__)
    qm = QuantModel(layers, act_params[0], tuple(model.in_shape), model.window_us)
    validate_model(qm)
    return qm
