"""Builders and independent reference implementations shared by the tests."""

from __future__ import annotations

import numpy as np

from powshift.fuse import BnParams
from powshift.model_fmt import FloatActivation, FloatConv, FloatDense, FloatGap, FloatMaxPool, FloatModel


def naive_conv(x, w, stride=1, pad=0, pad_value=0.0):
    """Direct loop cross-correlation; slow but obviously correct."""
    x = np.asarray(x)
    w = np.asarray(w)
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    assert ci == c
    xp = np.full((n, c, h + 2 * pad, wd + 2 * pad), pad_value, dtype=np.result_type(x, w, np.float64) if x.dtype.kind == "f" else np.int64)
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=xp.dtype)
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


def random_bn(rng, c):
    return BnParams(
        rng.uniform(0.5, 1.5, c),
        rng.normal(0, 0.2, c),
        rng.normal(0, 0.2, c),
        rng.uniform(0.3, 2.0, c),
    )


def toy_float_model(seed=0, channels=(8, 16, 32), n_classes=8, in_hw=32):
    """ToyNet-shaped float model with random weights."""
    rng = np.random.default_rng(seed)
    layers = []
    c_in = 1
    for i, c in enumerate(channels):
        w = rng.normal(0, np.sqrt(2.0 / (9 * c_in)), (c, c_in, 3, 3))
        layers.append(FloatConv(w, None, random_bn(rng, c), 1, 1))
        layers.append(FloatActivation("relu"))
        layers.append(FloatGap() if i == len(channels) - 1 else FloatMaxPool())
        c_in = c
    layers.append(FloatDense(rng.normal(0, 0.3, (n_classes, c_in)), rng.normal(0, 0.1, n_classes)))
    return FloatModel(layers, (1, in_hw, in_hw))


def random_three_conv_model(rng):
    """Three conv+BN layers with random geometry and activations in between."""
    c = [int(rng.integers(1, 4))] + [int(v) for v in rng.integers(1, 9, size=3)]
    hw = int(rng.integers(5, 12))
    layers = []
    size = hw
    for i in range(3):
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        if size + 2 * pad < k:
            pad = k // 2
        size = (size + 2 * pad - k) // stride + 1
        w = rng.normal(0, 1.0 / np.sqrt(k * k * c[i]), (c[i + 1], c[i], k, k))
        b = rng.normal(0, 0.1, c[i + 1]) if rng.random() < 0.5 else None
        layers.append(FloatConv(w, b, random_bn(rng, c[i + 1]), stride, pad))
        if i < 2:
            layers.append(FloatActivation(str(rng.choice(["relu", "silu", "identity"]))))
    return FloatModel(layers, (c[0], hw, hw))


def random_frames(rng, n, shape):
    return rng.integers(-1, 2, size=(n,) + tuple(shape)).astype(np.float64)
