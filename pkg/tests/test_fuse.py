import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import naive_conv, random_bn
from powshift import fuse as F
from powshift.errors import OutOfRange, ShapeMismatch
from powshift.kernels import conv2d_int_bac, requantize
from powshift.quantize import AffineParams, dequantize_affine, quantize_affine, quantize_pot


def test_identity_bn_leaves_weights():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=4)
    wf, bf = F.fuse_conv_bn_float(w, b, F.BnParams.identity(4))
    assert np.allclose(wf, w, rtol=1e-15) and np.allclose(bf, b, rtol=1e-15)


def test_hand_substituted_bn():
    w = np.ones((1, 1, 1, 1))
    bn = F.BnParams([2.0], [1.0], [3.0], [4.0 - 1e-5])
    wf, bf = F.fuse_conv_bn_float(w, np.array([0.5]), bn)
    assert wf[0, 0, 0, 0] == pytest.approx(1.0)
    assert bf[0] == pytest.approx(0.5 - 2.0)


def test_float_fusion_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        F.fuse_conv_bn_float(np.ones((3, 1, 1, 1)), None, F.BnParams.identity(4))


@pytest.mark.parametrize("seed", range(5))
def test_float_fusion_dual_path(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(5, 3, 3, 3))
    b = rng.normal(size=5)
    bn = random_bn(rng, 5)
    x = rng.normal(size=(4, 3, 7, 7))
    z = naive_conv(x, w, 1, 1) + b[None, :, None, None]
    ref = (z - bn.mean[None, :, None, None]) / np.sqrt(bn.var + bn.eps)[None, :, None, None] * bn.gamma[None, :, None, None] + bn.beta[None, :, None, None]
    wf, bf = F.fuse_conv_bn_float(w, b, bn)
    y = naive_conv(x, wf, 1, 1) + bf[None, :, None, None]
    assert (np.abs(y - ref) <= 1e-5 * (1 + np.abs(ref))).all()


def test_bn_rejects_negative_variance():
    with pytest.raises(ValueError):
        F.BnParams([1.0], [0.0], [0.0], [-1.0])


# -- fixed-point multipliers -----------------------------------------------------------

@pytest.mark.parametrize("M, m, s", [(0.125, 2**30, 33), (-0.125, -(2**30), 33), (1.0, 2**30, 30)])
def test_fxp_encode_examples(M, m, s):
    assert F.fxp_encode(M) == F.FixedPointMultiplier(m, s)


def test_fxp_zero_and_range():
    assert F.fxp_encode(0.0) == F.FixedPointMultiplier(0, 0)
    with pytest.raises(OutOfRange):
        F.fxp_encode(2.0**31)
    with pytest.raises(OutOfRange):
        F.fxp_encode(float("nan"))


@given(st.floats(-30, 30).map(lambda e: 2.0**e), st.sampled_from([1.0, -1.0]))
def test_fxp_normalized_and_accurate(mag, sign):
    M = sign * mag
    fm = F.fxp_encode(M)
    assert 2**30 <= abs(fm.m) < 2**31
    assert abs(fm.real - M) <= abs(M) * 2.0**-30


def test_fxp_apply_examples():
    fm = F.fxp_encode(0.125)
    assert F.fxp_apply(64, fm) == 8
    assert F.fxp_apply(0, fm) == 0
    assert F.fxp_apply(-64, fm) == -8


def test_fxp_apply_million_pairs_against_double():
    rng = np.random.default_rng(7)
    n = 1_000_000
    acc = rng.integers(-(2**24), 2**24 + 1, n)
    exps = rng.uniform(-20, 4, 200)
    Ms = np.sign(rng.uniform(-1, 1, 200)) * 2.0**exps
    for i, M in enumerate(Ms):
        chunk = acc[i * (n // 200) : (i + 1) * (n // 200)]
        got = F.fxp_apply(chunk, F.fxp_encode(M))
        ref = np.sign(chunk * M) * np.floor(np.abs(chunk * M) + 0.5)
        assert np.abs(got - ref).max() <= 1


@given(st.integers(-(2**40), 2**40), st.floats(-4, 4).filter(lambda v: abs(v) > 1e-6))
def test_fxp_apply_matches_exact_rational(acc, M):
    # Python integers give an exact reference for round_half_away(acc*m/2**s)
    fm = F.fxp_encode(M)
    num = acc * fm.m
    den = 1 << fm.shift
    mag = (2 * abs(num) + den) // (2 * den)
    expected = -mag if num < 0 else mag
    assert F.fxp_apply(acc, fm) == expected
    assert F.fxp_apply(np.array([acc]), fm)[0] == expected


def test_fxp_multiplier_validation():
    with pytest.raises(OutOfRange):
        F.FixedPointMultiplier(2**31, 0)
    with pytest.raises(OutOfRange):
        F.FixedPointMultiplier(1, 63)


# -- PoT fusion -----------------------------------------------------------------------------

def test_pot_fusion_identity_case():
    rng = np.random.default_rng(3)
    w = quantize_pot(rng.normal(size=(4, 2, 3, 3)), 1.0)
    b = np.array([0.4, -1.6, 2.5, 0.0])
    L = F.fuse_conv_bn_pot(w, b, F.BnParams.identity(4), 1.0, 0, 1.0, 0)
    assert all(fm == F.fxp_encode(2.0**-7) for fm in L.requant)
    assert list(L.bias_q) == [0, -2, 3, 0]


def test_pot_fusion_zero_gamma_channel():
    rng = np.random.default_rng(4)
    w = quantize_pot(rng.normal(size=(2, 1, 3, 3)))
    bn = F.BnParams([0.0, 1.0], [0.3, 0.0], [0.0, 0.0], [1.0, 1.0])
    L = F.fuse_conv_bn_pot(w, None, bn, 0.1, 5, 0.05, -3)
    assert L.requant[0] == F.FixedPointMultiplier(0, 0)
    x = rng.integers(-128, 128, (1, 1, 6, 6)).astype(np.int8)
    y = requantize(conv2d_int_bac(x, w, 5, 1, 1), L)
    assert (y[:, 0] == np.clip(L.bias_q[0] - 3, -128, 127)).all()


@given(st.integers(0, 2**31))
def test_pot_fusion_never_touches_codes(seed):
    rng = np.random.default_rng(seed)
    w = quantize_pot(rng.normal(size=(3, 2, 3, 3)))
    before = bytes(w.packed)
    L = F.fuse_conv_bn_pot(w, rng.normal(size=3), random_bn(rng, 3), rng.uniform(0.01, 1), int(rng.integers(-128, 128)), rng.uniform(0.01, 1), int(rng.integers(-128, 128)))
    assert L.weights.packed == before
    assert len(L.requant) == L.out_channels == 3


@pytest.mark.parametrize("seed", range(20))
def test_pot_fusion_integer_pipeline_within_one_lsb(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out, k = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.choice([1, 3]))
    w = quantize_pot(rng.normal(size=(c_out, c_in, k, k)))
    b = rng.normal(0, 0.2, c_out)
    bn = random_bn(rng, c_out)
    in_q = AffineParams(float(rng.uniform(0.005, 0.05)), int(rng.integers(-20, 20)))
    out_q = AffineParams(float(rng.uniform(0.01, 0.1)), int(rng.integers(-20, 20)))
    L = F.fuse_conv_bn_pot(w, b, bn, in_q.scale, in_q.zero_point, out_q.scale, out_q.zero_point, 1, k // 2)
    x_q = rng.integers(-128, 128, (2, c_in, 6, 6)).astype(np.int8)
    y = requantize(conv2d_int_bac(x_q, w, in_q.zero_point, 1, k // 2), L)
    # reference: DQ(x) * DQ(w) -> conv bias -> BN -> quantize, all in double
    z = naive_conv(dequantize_affine(x_q, in_q), w.dequantize(), 1, k // 2) + b[None, :, None, None]
    bnr = (z - bn.mean[None, :, None, None]) / bn.phi[None, :, None, None] * bn.gamma[None, :, None, None] + bn.beta[None, :, None, None]
    ref = quantize_affine(bnr, out_q)
    assert np.abs(y.astype(int) - ref.astype(int)).max() <= 1


def test_pot_fusion_reproduces_float_fusion():
    rng = np.random.default_rng(11)
    w = quantize_pot(rng.normal(size=(4, 3, 3, 3)))
    b = rng.normal(size=4)
    bn = random_bn(rng, 4)
    wf, bf = F.fuse_conv_bn_float(w.dequantize(), b, bn)
    L = F.fuse_conv_bn_pot(w, b, bn, 0.02, 0, 0.05, 0)
    # effective per-count weight times requant scale, back in real units
    real_w = w.int_weights() * np.array([fm.real for fm in L.requant])[:, None, None, None] * 0.05 / 0.02
    assert np.allclose(real_w, wf, rtol=2**-29)
    assert np.allclose(L.channel_bias, bf)
    assert np.allclose(L.bias_q, np.sign(bf / 0.05) * np.floor(np.abs(bf / 0.05) + 0.5))


def test_bias_overflow_raises():
    w = quantize_pot(np.ones((1, 1, 1, 1)))
    with pytest.raises(OutOfRange):
        F.fuse_conv_bn_pot(w, np.array([1e9]), None, 1.0, 0, 1e-3, 0)


def test_pot_fusion_rejects_non_pot_and_bad_scales():
    w = quantize_pot(np.ones((1, 1, 1, 1)))
    with pytest.raises(TypeError):
        F.fuse_conv_bn_pot(np.ones((1, 1, 1, 1)), None, None, 1.0, 0, 1.0, 0)
    with pytest.raises(ValueError):
        F.fuse_conv_bn_pot(w, None, None, 0.0, 0, 1.0, 0)
    with pytest.raises(ShapeMismatch):
        F.fuse_conv_bn_pot(w, None, F.BnParams.identity(2), 1.0, 0, 1.0, 0)


def test_phi_uses_plus_epsilon():
    bn = F.BnParams([1.0], [0.0], [0.0], [0.0], eps=1e-5)
    assert bn.phi[0] == pytest.approx(math.sqrt(1e-5))
