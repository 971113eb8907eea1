import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from powshift import quantize as q
from powshift.errors import EmptyCalibrationSet

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def brute_pot_code(w, s_w):
    """Enumerate the 16-entry codebook and pick by log-domain rounding."""
    mag = max(abs(w), s_w * 2.0**-10)
    t = -math.log2(mag / s_w)
    e = int(math.floor(abs(t) + 0.5)) * (1 if t >= 0 else -1)
    e = min(max(e, 0), 7)
    return (8 if w < 0 else 0) | e


def sorted_percentile(values, p):
    """Linear-interpolated percentile from a sort; independent of np.percentile."""
    v = sorted(values)
    pos = (len(v) - 1) * p / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


# -- rounding and affine -----------------------------------------------------------

@pytest.mark.parametrize("x, expected", [(0.5, 1), (-0.5, -1), (1.5, 2), (-2.5, -3), (2.4999, 2), (0.0, 0)])
def test_round_half_away(x, expected):
    assert q.round_half_away(x) == expected


def test_affine_basic_values():
    p = q.AffineParams(0.1, 0)
    assert q.quantize_affine(1.0, p) == 10
    assert q.quantize_affine(12.77, p) == 127
    assert q.quantize_affine(-100.0, p) == -128


def test_affine_params_validation():
    with pytest.raises(ValueError):
        q.AffineParams(0.0, 0)
    with pytest.raises(ValueError):
        q.AffineParams(1.0, 128)


def test_calibrate_minmax_exact_range():
    p = q.calibrate_affine([np.array([0.0, 255 * 0.1])])
    assert p.scale == pytest.approx(0.1, rel=1e-12)
    assert p.zero_point == -128


def test_calibrate_all_zero_is_degenerate():
    p = q.calibrate_affine([np.zeros(5), np.zeros(3)])
    assert (p.scale, p.zero_point) == (1.0, 0)


def test_calibrate_constant_nonzero_clamps_zero_point():
    assert q.calibrate_affine([np.full(4, 3.0)]).zero_point == -3
    assert q.calibrate_affine([np.full(4, -500.0)]).zero_point == 127


def test_calibrate_percentile_matches_sort_oracle():
    draws = np.random.default_rng(2024).standard_normal(10_000)
    p = q.calibrate_affine([draws[:4000], draws[4000:]], mode="percentile", percentile=99.9)
    lo = sorted_percentile(draws.tolist(), 0.1)
    hi = sorted_percentile(draws.tolist(), 99.9)
    assert p.scale == pytest.approx((hi - lo) / 255, rel=1e-12)
    assert p.zero_point == int(q.round_half_away(-128 - lo / p.scale))


def test_calibrate_errors():
    with pytest.raises(EmptyCalibrationSet):
        q.calibrate_affine([])
    with pytest.raises(EmptyCalibrationSet):
        q.calibrate_affine([np.zeros(0)])
    with pytest.raises(ValueError):
        q.calibrate_affine([np.ones(3)], mode="percentile", percentile=40)


@given(st.lists(hnp.arrays(np.float64, st.integers(1, 30), elements=finite), min_size=1, max_size=6), st.integers(1, 5))
def test_observer_merge_is_shard_invariant(chunks, split):
    whole = q.CalibrationObserver(keep_values=True)
    for c in chunks:
        whole.update(c)
    a, b = q.CalibrationObserver(True), q.CalibrationObserver(True)
    for i, c in enumerate(chunks):
        (a if i < split else b).update(c)
    merged = a.merge(b)
    assert merged.params() == whole.params()
    assert merged.params("percentile", 99.0) == whole.params("percentile", 99.0)


@given(hnp.arrays(np.float64, st.integers(1, 50), elements=finite))
def test_affine_requantize_is_idempotent(x):
    p = q.calibrate_affine([x])
    xq = q.quantize_affine(x, p)
    assert np.array_equal(q.quantize_affine(q.dequantize_affine(xq, p), p), xq)


@given(hnp.arrays(np.float64, st.integers(2, 50), elements=finite))
def test_affine_error_within_half_step(x):
    p = q.calibrate_affine([x])
    lo, hi = q.affine_bounds(p)
    inside = (x >= lo) & (x <= hi)
    err = np.abs(q.fake_quant_affine(x, p) - x)
    assert (err[inside] <= p.scale / 2 * (1 + 1e-9) + 1e-12).all()


@given(hnp.arrays(np.float64, st.integers(1, 50), elements=finite))
def test_calibrated_zero_is_exact(x):
    p = q.calibrate_affine([x])
    assert q.dequantize_affine(q.quantize_affine(0.0, p), p) == 0.0


# -- PoT ------------------------------------------------------------------------

def test_pot_scale_values():
    assert q.pot_scale([0.5, -0.25]) == 0.5
    assert q.pot_scale(np.zeros((3, 3))) == 1.0


@given(hnp.arrays(np.float64, st.integers(1, 100), elements=finite))
def test_pot_scale_is_max_abs(w):
    expected = max(abs(float(v)) for v in w)
    assert q.pot_scale(w) == (expected if expected > 0 else 1.0)


def test_pot_exact_power_of_two():
    t = q.quantize_pot(np.array([0.5]), 1.0)
    assert t.codes()[0] == 1
    assert t.dequantize()[0] == 0.5


def test_pot_log_domain_rounding():
    t = q.quantize_pot(np.array([-0.3]), 1.0)
    assert t.codes()[0] == 8 | 2
    assert t.dequantize()[0] == -0.25


def test_pot_clamps_small_weights():
    t = q.quantize_pot(np.array([0.001, 0.0]), 1.0)
    assert list(t.codes()) == [7, 7]
    assert t.dequantize()[0] == 2.0**-7


def test_pot_codebook_is_all_16_powers():
    codes = np.arange(16, dtype=np.uint8)
    vals = q.pot_decode(codes, 1.0)
    assert sorted(np.abs(vals[:8])) == sorted(2.0 ** -np.arange(8))
    assert (vals[8:] == -vals[:8]).all()
    assert (np.diff(np.abs(vals[:8])) < 0).all()
    assert list(q.pot_int_weights(codes)) == [128 >> e for e in range(8)] + [-(128 >> e) for e in range(8)]


@given(hnp.arrays(np.float64, st.integers(1, 64), elements=finite), st.floats(0.01, 100))
def test_pot_encode_matches_brute_force(w, s_w):
    codes = q.pot_encode(w, s_w)
    assert list(codes) == [brute_pot_code(float(v), s_w) for v in w]


@given(hnp.arrays(np.float64, st.integers(1, 64), elements=finite))
def test_pot_idempotent(w):
    t = q.quantize_pot(w)
    d = t.dequantize()
    again = q.quantize_pot(d, t.scale)
    assert again.packed == t.packed
    # max|d| == s_w, so re-deriving the scale lands on the same grid
    assert np.array_equal(q.fake_quant_pot(d), d)


@given(hnp.arrays(np.float64, st.integers(1, 64), elements=st.floats(-10, 10, allow_nan=False)))
def test_pot_log_error_at_most_half(w):
    s_w = q.pot_scale(w)
    d = q.quantize_pot(w, s_w).dequantize()
    in_cell = (np.abs(w) >= s_w * 2**-7.5) & (np.abs(w) <= s_w)
    err = np.abs(np.log2(np.abs(d[in_cell])) - np.log2(np.abs(w[in_cell])))
    assert (err <= 0.5 + 1e-12).all()


def test_nibble_layout():
    assert q.pack_nibbles([0x3, 0xA]) == bytes([0xA3])
    assert q.pack_nibbles([0x3, 0xA, 0x5]) == bytes([0xA3, 0x05])


@pytest.mark.parametrize("first", range(16))
def test_nibble_round_trip_all_codes_both_positions(first):
    for second in range(16):
        packed = q.pack_nibbles([first, second])
        assert list(q.unpack_nibbles(packed, 2)) == [first, second]
        assert list(q.unpack_nibbles(q.pack_nibbles([second, first, second]), 3)) == [second, first, second]


def test_nibble_round_trip_random():
    codes = np.random.default_rng(1).integers(0, 16, 10_001).astype(np.uint8)
    packed = q.pack_nibbles(codes)
    assert len(packed) == 5001
    assert np.array_equal(q.unpack_nibbles(packed, codes.size), codes)


def test_nibble_rejects_wide_codes():
    with pytest.raises(ValueError):
        q.pack_nibbles([16])


# -- uniform int4 -------------------------------------------------------------

def test_int4_values():
    assert q.quantize_uniform_int4(np.array([1.0]), 1.0)[0] == 7
    assert q.quantize_uniform_int4(np.array([0.0]), 1.0)[0] == 0
    q3 = q.quantize_uniform_int4(np.array([0.3]), 1.0)[0]
    assert q3 == 2
    assert q.dequantize_uniform_int4(q3, 1.0) == pytest.approx(2 / 7)


@given(hnp.arrays(np.float64, st.integers(1, 40), elements=finite), st.floats(0.01, 100))
def test_int4_range(w, s_w):
    v = q.quantize_uniform_int4(w, s_w)
    assert (np.abs(v) <= 7).all()


# -- STE ---------------------------------------------------------------------------

def test_ste_passes_inside_and_blocks_outside():
    g = np.array([1.0, 2.0, 3.0])
    out = q.ste_backward(g, np.array([0.0, 1.0, 2.0]), -1.0, 1.0)
    assert list(out) == [1.0, 2.0, 0.0]
    assert q.ste_backward(np.array([5.0]), np.array([1.0 + 1]), -1.0, 1.0)[0] == 0.0
    with pytest.raises(ValueError):
        q.ste_backward(g, g, 1.0, 1.0)


def test_ste_matches_finite_difference_of_clipped_identity():
    # STE treats fake-quant as clip(x, lo, hi); away from the clip edges the
    # clipped composite loss is smooth and its central difference matches.
    rng = np.random.default_rng(0)
    p = q.AffineParams(0.05, 3)
    lo, hi = q.affine_bounds(p)
    x = rng.uniform(lo - 2, hi + 2, 200)
    x = x[(np.abs(x - lo) > 1e-3) & (np.abs(x - hi) > 1e-3)]

    def loss(v):
        return np.sum(np.clip(v, lo, hi) ** 2)

    grad = q.ste_backward(2 * q.fake_quant_affine(x, p), x, lo, hi)
    h = 1e-6
    num = np.array([(loss(x + h * e) - loss(x - h * e)) / (2 * h) for e in np.eye(x.size)])
    assert np.allclose(grad, num, atol=p.scale + 1e-4)
    assert (grad[(x < lo) | (x > hi)] == 0).all()
