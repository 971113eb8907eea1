from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import naive_conv
from powshift import kernels as K
from powshift.errors import AccumulatorOverflow, ShapeMismatch
from powshift.fuse import fxp_encode
from powshift.quantize import AffineParams, PotTensor, dequantize_affine, quantize_affine, quantize_pot


def pot_from_codes(codes, scale=1.0):
    return PotTensor.from_codes(np.asarray(codes, dtype=np.uint8), scale)


def int8(a):
    return np.asarray(a, dtype=np.int8)


def fake_layer(Ms, bias_q, z_y=0):
    return SimpleNamespace(requant=[fxp_encode(m) for m in Ms], bias_q=np.asarray(bias_q), out_q=AffineParams(1.0, z_y))


# -- float reference -------------------------------------------------------------

def test_float_conv_examples():
    assert K.conv2d_float(np.full((1, 1, 1, 1), 2.0), np.full((1, 1, 1, 1), 3.0))[0, 0, 0, 0] == 6.0
    assert K.conv2d_float(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))[0, 0, 0, 0] == 9.0
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    ident = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(K.conv2d_float(x, ident), x)


@pytest.mark.parametrize("stride, pad, k", [(1, 0, 3), (2, 1, 3), (1, 1, 1), (3, 2, 3)])
def test_float_conv_matches_loop(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 8, 7))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    ref = naive_conv(x, w, stride, pad) + b[None, :, None, None]
    assert np.allclose(K.conv2d_float(x, w, b, stride, pad), ref, rtol=1e-12, atol=1e-12)


def test_float_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        K.conv2d_float(np.ones((1, 2, 3, 3)), np.ones((1, 1, 3, 3)))
    with pytest.raises(ShapeMismatch):
        K.conv2d_float(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


# -- integer engines -----------------------------------------------------------------

def test_mac_single_term():
    w = pot_from_codes([[[[3]]]])
    assert K.conv2d_int_mac(int8([[[[5]]]]), w.int_weights(), 0)[0, 0, 0, 0] == 80


def test_bac_single_term_negative():
    w = pot_from_codes([[[[8 | 3]]]])
    assert K.conv2d_int_bac(int8([[[[5]]]]), w, 0)[0, 0, 0, 0] == -80


@pytest.mark.parametrize("sign", [0, 8])
def test_bac_smallest_weight_is_shift_zero(sign):
    w = pot_from_codes([[[[sign | 7]]]])
    out = K.conv2d_int_bac(int8([[[[-20]]]]), w, 13)[0, 0, 0, 0]
    assert out == (-33 if sign == 0 else 33)


def test_input_at_zero_point_gives_zero():
    rng = np.random.default_rng(1)
    w = quantize_pot(rng.normal(size=(3, 2, 3, 3)))
    x = np.full((1, 2, 5, 5), -17, dtype=np.int8)
    assert not K.conv2d_int_mac(x, w.int_weights(), -17, 1, 1).any()
    assert not K.conv2d_int_bac(x, w, -17, 1, 1).any()


def test_padding_reads_zero_point():
    # 1x1 input, 3x3 kernel: the eight outer taps (weight 128) all land on padding
    codes = np.zeros((1, 1, 3, 3), dtype=np.uint8)
    codes[0, 0, 1, 1] = 2
    w = pot_from_codes(codes)
    x = int8([[[[10]]]])
    got = K.conv2d_int_bac(x, w, 4, 1, 1)[0, 0, 0, 0]
    assert got == (10 - 4) * 32
    assert K.conv2d_int_mac(x, w.int_weights(), 4, 1, 1)[0, 0, 0, 0] == got


@st.composite
def conv_case(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    c_in, c_out = draw(st.integers(1, 6)), draw(st.integers(1, 6))
    k = draw(st.sampled_from([1, 3, 5]))
    stride = draw(st.integers(1, 3))
    pad = draw(st.integers(0, k // 2))
    h = draw(st.integers(max(1, k - 2 * pad), 9))
    w = draw(st.integers(max(1, k - 2 * pad), 9))
    n = draw(st.integers(1, 2))
    x = rng.integers(-128, 128, (n, c_in, h, w)).astype(np.int8)
    pot = pot_from_codes(rng.integers(0, 16, (c_out, c_in, k, k)), float(rng.uniform(0.01, 2)))
    z = int(rng.integers(-128, 128))
    return x, pot, z, stride, pad


@given(conv_case())
def test_bac_equals_mac(case):
    x, pot, z, stride, pad = case
    mac = K.conv2d_int_mac(x, pot.int_weights(), z, stride, pad)
    bac = K.conv2d_int_bac(x, pot, z, stride, pad)
    assert mac.dtype == bac.dtype
    assert np.array_equal(mac, bac)


@given(conv_case())
def test_mac_matches_scaled_float_oracle(case):
    x, pot, z, stride, pad = case
    q = AffineParams(0.03125, z)
    # padded input value must dequantize to exactly zero
    real = naive_conv(dequantize_affine(x, q), pot.dequantize(), stride, pad, 0.0)
    counts = np.rint(real * 2**7 / (q.scale * pot.scale)).astype(np.int64)
    assert np.array_equal(K.conv2d_int_mac(x, pot.int_weights(), z, stride, pad), counts)


def test_accumulator_dtype_boundary():
    assert K.accumulator_dtype(2**16, 1) is np.int32
    assert K.accumulator_dtype(2**16 + 1, 1) is np.int64
    assert K.accumulator_dtype(7281, 3) is np.int32
    assert K.accumulator_dtype(7282, 3) is np.int64


@pytest.mark.parametrize("c_in, dtype", [(2**16, np.int32), (2**16 + 1, np.int64)])
def test_worst_case_sum_at_boundary(c_in, dtype):
    x = np.full((1, c_in, 1, 1), 127, dtype=np.int8)
    w = pot_from_codes(np.zeros((1, c_in, 1, 1)))
    acc = K.conv2d_int_bac(x, w, -128)
    assert acc.dtype == dtype
    assert int(acc[0, 0, 0, 0]) == c_in * 255 * 128
    assert np.array_equal(acc, K.conv2d_int_mac(x, w.int_weights(), -128))


def test_mac_rejects_out_of_range():
    with pytest.raises(AccumulatorOverflow):
        K.conv2d_int_mac(int8([[[[1]]]]), np.full((1, 1, 1, 1), 129), 0)
    with pytest.raises(AccumulatorOverflow):
        K.conv2d_int_mac(np.full((1, 1, 1, 1), 300), np.ones((1, 1, 1, 1), dtype=np.int64), 0)


def test_thread_split_is_bitwise_deterministic():
    rng = np.random.default_rng(5)
    x = rng.integers(-128, 128, (2, 8, 12, 12)).astype(np.int8)
    w = quantize_pot(rng.normal(size=(13, 8, 3, 3)))
    ref = K.conv2d_int_bac(x, w, 3, 1, 1, threads=1)
    for t in (2, 4, 13, 32):
        assert np.array_equal(K.conv2d_int_bac(x, w, 3, 1, 1, threads=t), ref)
        assert np.array_equal(K.conv2d_int_mac(x, w.int_weights(), 3, 1, 1, threads=t), ref)


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("POWSHIFT_THREADS", "3")
    assert K.thread_count() == 3
    monkeypatch.setenv("POWSHIFT_THREADS", "0")
    assert K.thread_count() >= 1


# -- requantize --------------------------------------------------------------------------

def test_requantize_examples():
    acc = np.full((1, 1, 1, 1), 64)
    assert K.requantize(acc, fake_layer([0.125], [0]))[0, 0, 0, 0] == 8
    assert K.requantize(np.full((1, 1, 1, 1), 10**9), fake_layer([0.5], [0]))[0, 0, 0, 0] == 127
    assert K.requantize(np.full((1, 1, 1, 1), -(10**9)), fake_layer([0.5], [0]))[0, 0, 0, 0] == -128


def test_requantize_dead_channel():
    acc = np.full((1, 2, 2, 2), 12345)
    y = K.requantize(acc, fake_layer([0.0, 1.0], [7, 0], z_y=-3))
    assert (y[:, 0] == 4).all()


def test_requantize_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        K.requantize(np.zeros((1, 3, 1, 1)), fake_layer([1.0], [0]))


# -- LUT activations ------------------------------------------------------------------

def test_lut_identity_and_relu():
    q = AffineParams(0.1, 0)
    assert list(K.build_lut("identity", q, q)) == list(range(-128, 128))
    assert list(K.build_lut("relu", q, q)) == [max(0, i) for i in range(-128, 128)]


def test_lut_silu_exhaustive():
    in_q, out_q = AffineParams(0.07, -11), AffineParams(0.04, -90)
    lut = K.build_lut("silu", in_q, out_q)
    for i in range(-128, 128):
        x = in_q.scale * (i - in_q.zero_point)
        y = x / (1 + np.exp(-x)) / out_q.scale + out_q.zero_point
        ref = int(np.clip(np.sign(y) * np.floor(abs(y) + 0.5), -128, 127))
        assert lut[i + 128] == ref


@given(st.lists(st.integers(-128, 127), min_size=1, max_size=50))
def test_lut_application_equals_direct(xs):
    in_q, out_q = AffineParams(0.05, 4), AffineParams(0.03, -20)
    lut = K.build_lut("silu", in_q, out_q)
    x = int8(xs)
    direct = quantize_affine(K.ACTIVATIONS["silu"](dequantize_affine(x, in_q)), out_q)
    assert np.array_equal(K.activation_lut(x, lut), direct)


# -- pooling and add ----------------------------------------------------------------------

def test_maxpool_example():
    assert K.maxpool2(int8([[[[1, 2], [3, 4]]]]))[0, 0, 0, 0] == 4


@given(st.integers(0, 2**31))
def test_maxpool_matches_loop(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-128, 128, (1, 2, 5, 6)).astype(np.int8)
    out = K.maxpool2(x)
    assert out.shape == (1, 2, 2, 3)
    for c in range(2):
        for i in range(2):
            for j in range(3):
                assert out[0, c, i, j] == max(x[0, c, 2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1))


def test_global_avgpool_rounds_half_away():
    q = AffineParams(1.0, 0)
    x = int8([[[[1, 2], [0, 0]]], [[[-1, -2], [0, 0]]]])
    out = K.global_avgpool_int(x, q)
    assert out[0, 0, 0, 0] == 1 and out[1, 0, 0, 0] == -1


def test_add_with_zeros_is_identity():
    q = AffineParams(0.05, -7)
    x = np.random.default_rng(2).integers(-128, 128, (1, 3, 4, 4)).astype(np.int8)
    zeros = np.full_like(x, -7)
    y = K.add_requant(K.QTensor(x, q), K.QTensor(zeros, q), q)
    assert np.abs(y.values.astype(int) - x.astype(int)).max() <= 1


@given(st.integers(0, 2**31))
def test_add_within_one_lsb(seed):
    rng = np.random.default_rng(seed)
    qa, qb, qo = (AffineParams(float(rng.uniform(0.01, 0.2)), int(rng.integers(-50, 50))) for _ in range(3))
    a = rng.integers(-128, 128, (1, 2, 3, 3)).astype(np.int8)
    b = rng.integers(-128, 128, (1, 2, 3, 3)).astype(np.int8)
    got = K.add_requant(K.QTensor(a, qa), K.QTensor(b, qb), qo).values
    ref = quantize_affine(dequantize_affine(a, qa) + dequantize_affine(b, qb), qo)
    assert np.abs(got.astype(int) - ref.astype(int)).max() <= 1


def test_add_shape_mismatch():
    q = AffineParams(1.0, 0)
    with pytest.raises(ShapeMismatch):
        K.add_requant(K.QTensor(np.zeros((1, 1, 2, 2), np.int8), q), K.QTensor(np.zeros((1, 1, 2, 3), np.int8), q), q)


def test_nibble_helpers_reexported():
    assert K.pack_nibbles([0x3, 0xA]) == bytes([0xA3])
    assert list(K.unpack_nibbles(bytes([0xA3]), 2)) == [3, 10]
