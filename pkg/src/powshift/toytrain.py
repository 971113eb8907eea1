"""Desk-scale quantization-aware training on the synthetic moving-bar task.

ToyNet is written directly in numpy (NHWC internally, double precision) with a
hand-derived backward pass, so gradients can be checked against finite
differences. Quantized modes run the forward pass on fake-quantized weights
and activations and route gradients through the straight-through estimator
onto full-precision master weights.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from powshift.errors import MissingBaseline, NonFiniteLoss, ShapeMismatch
from powshift.event_io import BarConfig, bar_dataset
from powshift.fuse import BnParams
from powshift.model_fmt import (
    FloatActivation,
    FloatConv,
    FloatDense,
    FloatGap,
    FloatMaxPool,
    FloatModel,
    QuantModel,
    calibrate_model,
    fake_quant_weights,
    predict,
    quantize_model,
    weight_scheme,
)
from powshift.quantize import AffineParams, affine_bounds, fake_quant_affine, pot_scale, ste_backward

log = logging.getLogger(__name__)

MODES = ("baseline", "int8_wa", "int4w", "log4w", "log4w_int8a")
MODE_SCHEME = {"int8_wa": "int8", "int4w": "int4w", "log4w": "log4w", "log4w_int8a": "log4w_int8a"}
ACT_MODES = ("int8_wa", "log4w_int8a")

CHANNELS = (8, 16, 32)
N_CLASSES = 8
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
# layer indices of the equivalent FloatModel: conv, act, pool, conv, act, pool, conv, act, gap, dense
QAT_MAX_EPOCHS = 20

CONV_LAYER_INDEX = (0, 3, 6)
ACT_LAYER_INDEX = (1, 4, 7)
DENSE_LAYER_INDEX = 9


# -- parameters ----------------------------------------------------------------------

def init_params(seed: int, in_channels: int = 1) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    c_in = in_channels
    for i, c in enumerate(CHANNELS, start=1):
        fan_in = c_in * 9
        params[f"conv{i}.w"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c, c_in, 3, 3))
        params[f"bn{i}.gamma"] = np.ones(c)
        params[f"bn{i}.beta"] = np.zeros(c)
        buffers[f"bn{i}.mean"] = np.zeros(c)
        buffers[f"bn{i}.var"] = np.ones(c)
        c_in = c
    params["fc.w"] = rng.normal(0.0, math.sqrt(1.0 / c_in), size=(N_CLASSES, c_in))
    params["fc.b"] = np.zeros(N_CLASSES)
    return params, buffers


def param_count(params) -> int:
    return int(sum(v.size for v in params.values()))


def to_float_model(params, buffers, in_shape=(1, 32, 32)) -> FloatModel:
    layers = []
    for i in range(1, len(CHANNELS) + 1):
        bn = BnParams(params[f"bn{i}.gamma"], params[f"bn{i}.beta"], buffers[f"bn{i}.mean"], buffers[f"bn{i}.var"], BN_EPS)
        layers.append(FloatConv(params[f"conv{i}.w"].copy(), None, bn, 1, 1))
        layers.append(FloatActivation("relu"))
        layers.append(FloatGap() if i == len(CHANNELS) else FloatMaxPool())
    layers.append(FloatDense(params["fc.w"].copy(), params["fc.b"].copy()))
    return FloatModel(layers, tuple(in_shape))


def from_float_model(model: FloatModel):
    kinds = [l.kind for l in model.layers]
    expected = ["conv", "activation", "maxpool", "conv", "activation", "maxpool", "conv", "activation", "gap", "dense"]
    if kinds != expected:
        raise ShapeMismatch(f"not a ToyNet layout: {kinds}")
    params, buffers = {}, {}
    for i, idx in enumerate(CONV_LAYER_INDEX, start=1):
        conv = model.layers[idx]
        params[f"conv{i}.w"] = conv.w.copy()
        params[f"bn{i}.gamma"] = conv.bn.gamma.copy()
        params[f"bn{i}.beta"] = conv.bn.beta.copy()
        buffers[f"bn{i}.mean"] = conv.bn.mean.copy()
        buffers[f"bn{i}.var"] = conv.bn.var.copy()
    dense = model.layers[DENSE_LAYER_INDEX]
    params["fc.w"] = dense.w.copy()
    params["fc.b"] = dense.b.copy() if dense.b is not None else np.zeros(dense.w.shape[0])
    return params, buffers


# -- quantization settings for one run ------------------------------------------------------

@dataclass
class QuantSetting:
    """Weight formats by layer name plus activation params at each boundary.

    ``act`` follows the FloatModel boundary order: input, then each layer.
    """

    weights: Dict[str, Optional[str]] = field(default_factory=dict)
    act: Optional[List[AffineParams]] = None

    @classmethod
    def for_mode(cls, mode: str, exempt_first_last: bool = False, act=None) -> "QuantSetting":
        if mode == "baseline":
            return cls()
        fm = to_float_model(*init_params(0))
        formats = weight_scheme(fm, MODE_SCHEME[mode], exempt_first_last)
        names = {idx: f"conv{i}.w" for i, idx in enumerate(CONV_LAYER_INDEX, start=1)}
        names[DENSE_LAYER_INDEX] = "fc.w"
        return cls({names[i]: f for i, f in formats.items()}, act if mode in ACT_MODES else None)


def _fq_act(x, setting: QuantSetting, boundary: int, masks: Optional[list]):
    if setting.act is None:
        return x
    q = setting.act[boundary]
    if masks is not None:
        masks.append((boundary, x))
    return fake_quant_affine(x, q)


# -- forward / backward ----------------------------------------------------------------------

def _im2col_nhwc(x):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, h, w, c, 3, 3)
    return win.reshape(n, h, w, c * 9)


def _col2im_nhwc(dcols, shape):
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, h + 2, w + 2, c))
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + h, kx : kx + w, :] += d[..., ky, kx]
    return dxp[:, 1:-1, 1:-1, :]


def _maxpool_fwd(x):
    n, h, w, c = x.shape
    v = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = np.argmax(v, axis=-1)
    return np.take_along_axis(v, idx[..., None], axis=-1)[..., 0], idx


def _maxpool_bwd(dy, idx, shape):
    n, h, w, c = shape
    dv = np.zeros(idx.shape + (4,))
    np.put_along_axis(dv, idx[..., None], dy[..., None], axis=-1)
    return dv.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def forward(params, buffers, x, setting: QuantSetting = QuantSetting(), train: bool = False, labels=None, update_stats: bool = True):
    """Logits (and loss, cache when labels are given) for x of shape (N, 1, H, W)."""
    cache = {"masks": [], "convs": []}
    masks = cache["masks"]
    a = np.asarray(x, dtype=np.float64).transpose(0, 2, 3, 1)
    a = _fq_act(a, setting, 0, masks)
    boundary = 1
    for i in range(1, len(CHANNELS) + 1):
        w_master = params[f"conv{i}.w"]
        w = fake_quant_weights(w_master, setting.weights.get(f"conv{i}.w"))
        c_out = w.shape[0]
        cols = _im2col_nhwc(a)
        z = cols @ w.reshape(c_out, -1).T
        gamma, beta = params[f"bn{i}.gamma"], params[f"bn{i}.beta"]
        if train:
            mu = z.mean(axis=(0, 1, 2))
            var = z.var(axis=(0, 1, 2))
            if update_stats:
                m = z.shape[0] * z.shape[1] * z.shape[2]
                buffers[f"bn{i}.mean"] = BN_MOMENTUM * buffers[f"bn{i}.mean"] + (1 - BN_MOMENTUM) * mu
                buffers[f"bn{i}.var"] = BN_MOMENTUM * buffers[f"bn{i}.var"] + (1 - BN_MOMENTUM) * var * m / max(m - 1, 1)
        else:
            mu, var = buffers[f"bn{i}.mean"], buffers[f"bn{i}.var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mu) * inv_std
        y = gamma * xhat + beta
        y = _fq_act(y, setting, boundary, masks)
        r = np.maximum(y, 0.0)
        r = _fq_act(r, setting, boundary + 1, masks)
        conv_cache = {"in_shape": a.shape, "cols": cols, "w": w, "xhat": xhat, "inv_std": inv_std, "y": y}
        if i < len(CHANNELS):
            a, conv_cache["pool_idx"] = _maxpool_fwd(r)
            conv_cache["pool_shape"] = r.shape
        else:
            conv_cache["gap_shape"] = r.shape
            a = r.mean(axis=(1, 2))
            a = _fq_act(a, setting, boundary + 2, masks)
        cache["convs"].append(conv_cache)
        boundary += 3
    w_fc = fake_quant_weights(params["fc.w"], setting.weights.get("fc.w"))
    logits = a @ w_fc.T + params["fc.b"]
    cache["fc_in"], cache["fc_w"] = a, w_fc
    logits = _fq_act(logits, setting, boundary, masks)
    if labels is None:
        return logits
    loss, dlogits = cross_entropy(logits, labels)
    cache["dlogits"] = dlogits
    return logits, loss, cache


def cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def backward(params, cache, setting: QuantSetting = QuantSetting()):
    grads = {}
    masks = {b: v for b, v in cache["masks"]}

    def ste(g, boundary):
        if setting.act is None:
            return g
        lo, hi = affine_bounds(setting.act[boundary])
        return ste_backward(g, masks[boundary], lo, hi)

    n_conv = len(CHANNELS)
    last_boundary = 3 * n_conv + 1
    d = ste(cache["dlogits"], last_boundary)
    grads["fc.b"] = d.sum(axis=0)
    g_wq = d.T @ cache["fc_in"]
    grads["fc.w"] = _weight_ste(g_wq, params["fc.w"], setting.weights.get("fc.w"))
    da = d @ cache["fc_w"]
    for i in range(n_conv, 0, -1):
        cc = cache["convs"][i - 1]
        boundary = 3 * (i - 1) + 1
        if i == n_conv:
            da = ste(da, boundary + 2)
            n, h, w, c = cc["gap_shape"]
            dr = np.broadcast_to(da[:, None, None, :] / (h * w), cc["gap_shape"])
        else:
            dr = _maxpool_bwd(da, cc["pool_idx"], cc["pool_shape"])
        dr = ste(dr, boundary + 1)
        dy = dr * (cc["y"] > 0)
        dy = ste(dy, boundary)
        xhat, inv_std = cc["xhat"], cc["inv_std"]
        gamma = params[f"bn{i}.gamma"]
        grads[f"bn{i}.gamma"] = (dy * xhat).sum(axis=(0, 1, 2))
        grads[f"bn{i}.beta"] = dy.sum(axis=(0, 1, 2))
        dxhat = dy * gamma
        m = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
        dz = (inv_std / m) * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
        w = cc["w"]
        c_out = w.shape[0]
        dzf = dz.reshape(-1, c_out)
        g_wq = (dzf.T @ cc["cols"].reshape(-1, cc["cols"].shape[-1])).reshape(w.shape)
        grads[f"conv{i}.w"] = _weight_ste(g_wq, params[f"conv{i}.w"], setting.weights.get(f"conv{i}.w"))
        if i > 1:
            dcols = dz @ w.reshape(c_out, -1)
            da = _col2im_nhwc(dcols, cc["in_shape"])
    return grads


def _weight_ste(g_wq, w_master, fmt):
    if fmt is None:
        return g_wq
    s = pot_scale(w_master)
    return ste_backward(g_wq, w_master, -s, s)


def forward_backward(params, buffers, frames, labels, setting: QuantSetting = QuantSetting(), update_stats: bool = True):
    """Training-mode loss and gradients w.r.t. the master parameters."""
    _, loss, cache = forward(params, buffers, frames, setting, train=True, labels=labels, update_stats=update_stats)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    return loss, backward(params, cache, setting)


def gradient_check(params, buffers, frames, labels, n_params: int = 20, step: float = 1e-6, seed: int = 0, floor: float = 1e-5):
    """Compare analytic gradients with central differences on random entries.

    Returns rows (name, flat_index, analytic, numeric, relative_error) where
    the relative error is |a - n| / max(|a|, |n|, floor).
    """
    rng = np.random.default_rng(seed)
    _, grads = forward_backward(params, buffers, frames, labels, update_stats=False)
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    picks = rng.choice(sizes.sum(), size=n_params, replace=False)
    bounds = np.cumsum(sizes)
    rows = []
    for flat in picks:
        j = int(np.searchsorted(bounds, flat, side="right"))
        name = names[j]
        idx = int(flat - (bounds[j - 1] if j else 0))
        p = params[name].reshape(-1)
        orig = p[idx]
        p[idx] = orig + step
        lp = forward(params, buffers, frames, train=True, labels=labels, update_stats=False)[1]
        p[idx] = orig - step
        lm = forward(params, buffers, frames, train=True, labels=labels, update_stats=False)[1]
        p[idx] = orig
        num = (lp - lm) / (2 * step)
        ana = float(grads[name].reshape(-1)[idx])
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        rows.append((name, idx, ana, num, rel))
    return rows


# -- EMA -----------------------------------------------------------------------------------

def ema_update(shadow, params, decay: float):
    """shadow <- decay * shadow + (1 - decay) * params, for arrays or dicts of arrays."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    if isinstance(shadow, dict):
        if shadow.keys() != params.keys():
            raise ShapeMismatch("EMA shadow and parameters have different keys")
        return {k: ema_update(shadow[k], params[k], decay) for k in shadow}
    shadow = np.asarray(shadow, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if shadow.shape != params.shape:
        raise ShapeMismatch(f"EMA shadow {shadow.shape} vs parameters {params.shape}")
    return decay * shadow + (1.0 - decay) * params


class EmaModel:
    """Shadow of parameters and BN statistics.

    The float shadow keeps accumulating; ``quantized`` is the re-quantized
    view refreshed after every update and is what gets evaluated/exported.
    Re-quantizing the shadow in place would pin it to its first grid point.

    The decay warms up as ``decay * (1 - exp(-updates / tau))`` so a short
    run is not dominated by the initial weights and their BN statistics;
    ``tau=0`` disables the ramp.
    """

    def __init__(self, params, buffers, decay: float = 0.999, setting: QuantSetting = QuantSetting(), tau: float = 100.0):
        self.decay = decay
        self.tau = tau
        self.setting = setting
        self.params = {k: v.copy() for k, v in params.items()}
        self.buffers = {k: v.copy() for k, v in buffers.items()}
        self.updates = 0
        self._requantize()

    def current_decay(self) -> float:
        if self.tau <= 0:
            return self.decay
        return self.decay * (1.0 - math.exp(-self.updates / self.tau))

    def update(self, params, buffers):
        self.updates += 1
        d = self.current_decay()
        self.params = ema_update(self.params, params, d)
        self.buffers = ema_update(self.buffers, buffers, d)
        self._requantize()

    def _requantize(self):
        self.quantized = {k: fake_quant_weights(v, self.setting.weights.get(k)) for k, v in self.params.items()}


# -- training loop ------------------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = "baseline"
    epochs: int = 20
    batch_size: int = 8
    lr: Optional[float] = None
    lr_final: float = 1e-4  # baseline: linear decay target
    lr_milestones: Tuple[int, ...] = (5, 8, 15)
    lr_gamma: float = 0.1
    momentum: float = 0.9
    ema: Optional[bool] = None
    ema_decay: float = 0.999
    ema_tau: float = 100.0
    seed: int = 0
    data_seed: int = 1
    n_train_per_class: int = 64
    n_test_per_class: int = 32
    n_calib: int = 128
    exempt_first_last: bool = False
    bar: BarConfig = BarConfig()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.lr is None:
            self.lr = 0.01 if self.mode == "baseline" else 1e-4
        if self.ema is None:
            self.ema = self.mode != "baseline"
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.mode != "baseline" and self.epochs > QAT_MAX_EPOCHS:
            raise ValueError(f"quantization-aware fine-tuning runs at most {QAT_MAX_EPOCHS} epochs")
        if not 0 < self.ema_decay < 1:
            raise ValueError("EMA decay must lie in (0, 1)")

    def lr_at(self, epoch: int) -> float:
        if self.mode == "baseline":
            if self.epochs <= 1:
                return self.lr
            return self.lr + (self.lr_final - self.lr) * epoch / (self.epochs - 1)
        return self.lr * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)


@dataclass
class TrainResult:
    config: TrainConfig
    float_model: FloatModel
    quant_model: Optional[QuantModel]
    history: List[dict]
    setting: QuantSetting


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


_DATA_CACHE: Dict[tuple, Dataset] = {}


def make_dataset(cfg: TrainConfig) -> Dataset:
    key = (cfg.data_seed, cfg.n_train_per_class, cfg.n_test_per_class, cfg.bar)
    if key not in _DATA_CACHE:
        tx, ty = bar_dataset(cfg.n_train_per_class, 2 * cfg.data_seed, cfg.bar)
        vx, vy = bar_dataset(cfg.n_test_per_class, 2 * cfg.data_seed + 1, cfg.bar)
        _DATA_CACHE[key] = Dataset(tx, ty, vx, vy)
    return _DATA_CACHE[key]


def accuracy(logits, labels) -> float:
    """Fraction of argmax hits; ties go to the lowest class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty dataset")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model, frames, labels, engine: str = "bac", setting: QuantSetting = QuantSetting()) -> float:
    """Accuracy of a QuantModel, FloatModel, (params, buffers) pair or callable."""
    if isinstance(model, QuantModel):
        logits = predict(model, frames, engine)
    elif isinstance(model, FloatModel):
        p, b = from_float_model(model)
        logits = _batched_logits(p, b, frames, setting)
    elif isinstance(model, tuple):
        logits = _batched_logits(model[0], model[1], frames, setting)
    else:
        logits = model(frames)
    return accuracy(logits, labels)


def _batched_logits(params, buffers, frames, setting, batch: int = 256):
    out = [forward(params, buffers, frames[i : i + batch], setting) for i in range(0, len(frames), batch)]
    return np.concatenate(out)


def train(cfg: TrainConfig, baseline: Optional[FloatModel] = None) -> TrainResult:
    """Run one training mode; quantized modes fine-tune from ``baseline``."""
    data = make_dataset(cfg)
    rng = np.random.default_rng(cfg.seed)
    if cfg.mode == "baseline":
        params, buffers = init_params(cfg.seed)
        setting = QuantSetting()
    else:
        if baseline is None:
            raise MissingBaseline(f"mode {cfg.mode} fine-tunes a trained baseline; train mode 'baseline' first")
        params, buffers = from_float_model(baseline)
        act = None
        if cfg.mode in ACT_MODES:
            formats = weight_scheme(baseline, MODE_SCHEME[cfg.mode], cfg.exempt_first_last)
            act = calibrate_model(baseline, data.train_x[: cfg.n_calib], formats)
        setting = QuantSetting.for_mode(cfg.mode, cfg.exempt_first_last, act)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    ema = EmaModel(params, buffers, cfg.ema_decay, setting, cfg.ema_tau) if cfg.ema else None
    history = []
    n = len(data.train_x)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = forward_backward(params, buffers, data.train_x[idx], data.train_y[idx], setting)
            losses.append(loss * len(idx))
            for k in params:
                velocity[k] = cfg.momentum * velocity[k] + grads[k]
                params[k] = params[k] - lr * velocity[k]
            if ema is not None:
                ema.update(params, buffers)
        eval_p, eval_b = (ema.params, ema.buffers) if ema is not None else (params, buffers)
        row = {
            "epoch": epoch + 1,
            "mode": cfg.mode,
            "train_acc": evaluate((eval_p, eval_b), data.train_x, data.train_y, setting=setting),
            "test_acc": evaluate((eval_p, eval_b), data.test_x, data.test_y, setting=setting),
            "loss": float(np.sum(losses) / n),
        }
        history.append(row)
        log.info("%s epoch %d lr %.2e loss %.4f train %.3f test %.3f", cfg.mode, epoch + 1, lr, row["loss"], row["train_acc"], row["test_acc"])
    final_p, final_b = (ema.params, ema.buffers) if ema is not None else (params, buffers)
    fm = to_float_model(final_p, final_b, data.train_x.shape[1:])
    qm = None
    if cfg.mode != "baseline":
        qm = quantize_model(fm, data.train_x[: cfg.n_calib], MODE_SCHEME[cfg.mode], cfg.exempt_first_last, act_params=setting.act)
    return TrainResult(cfg, fm, qm, history, setting)


METRICS_COLUMNS = ("epoch", "mode", "train_acc", "test_acc", "loss")


def metrics_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for row in history:
        w.writerow([row["epoch"], row["mode"], f"{row['train_acc']:.6f}", f"{row['test_acc']:.6f}", f"{row['loss']:.8f}"])
    return buf.getvalue()


def read_metrics_csv(text: str) -> List[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({"epoch": int(r["epoch"]), "mode": r["mode"], "train_acc": float(r["train_acc"]), "test_acc": float(r["test_acc"]), "loss": float(r["loss"])})
    return rows
