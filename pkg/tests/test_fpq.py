import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msfp.fpq import (
    FpFormat,
    FpQuantizerParams,
    IntQuantizerParams,
    all_formats,
    fp_grid,
    fp_quantize,
    int_quantize,
    mse,
    unit_grid,
)
from oracles import brute_force, enumerate_grid


FORMATS = [f for bits in (4, 6, 8) for signed in (True, False) for f in all_formats(bits, signed)]


def test_e1m2_signed_grid():
    grid = fp_grid(FpQuantizerParams(FpFormat(1, 2), 3.5))
    expected = [-3.5, -3.0, -2.5, -2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5]
    np.testing.assert_array_equal(grid, expected)


def test_e0m3_is_uniform():
    grid = fp_grid(FpQuantizerParams(FpFormat(0, 3), 1.0))
    np.testing.assert_allclose(grid, np.arange(-7, 8) / 7, rtol=0, atol=1e-15)
    assert grid.size == 15


def test_unsigned_zero_point_shift():
    grid = fp_grid(FpQuantizerParams(FpFormat(2, 1, signed=False), 1.0, -0.25))
    assert grid.min() == -0.25
    assert grid.max() == 0.75


@pytest.mark.parametrize("fmt", FORMATS, ids=str)
def test_grid_matches_bit_pattern_enumeration(fmt):
    params = FpQuantizerParams(fmt, 1.7, 0.0 if fmt.signed else -0.12)
    np.testing.assert_allclose(fp_grid(params), enumerate_grid(fmt, 1.7, params.zero_point), rtol=1e-15, atol=1e-15)


@pytest.mark.parametrize("fmt", FORMATS, ids=str)
def test_grid_cardinality(fmt):
    grid = unit_grid(fmt)
    n = fmt.bits
    assert grid.size <= 2**n
    assert np.all(np.diff(grid) > 0)
    if fmt.signed:
        assert grid.size == 2**n - 1
    else:
        assert grid.size == 2**n


def test_all_formats_order_and_count():
    assert [str(f) for f in all_formats(4, True)] == ["E3M0", "E2M1", "E1M2", "E0M3"]
    assert [str(f) for f in all_formats(4, False)] == ["uE4M0", "uE3M1", "uE2M2", "uE1M3", "uE0M4"]
    with pytest.raises(ValueError):
        all_formats(1, True)


def test_format_parse_and_bits():
    fmt = FpFormat.parse("e4m3")
    assert (fmt.exponent_bits, fmt.mantissa_bits, fmt.signed, fmt.bits) == (4, 3, True, 8)
    assert FpFormat.parse("E2M2", signed=False).bits == 4
    with pytest.raises(ValueError):
        FpFormat.parse("int4")
    with pytest.raises(ValueError):
        FpFormat(0, 0)


def test_params_validation():
    with pytest.raises(ValueError):
        FpQuantizerParams(FpFormat(2, 1), 0.0)
    with pytest.raises(ValueError):
        FpQuantizerParams(FpFormat(2, 1), 1.0, -0.1)
    with pytest.raises(ValueError):
        FpQuantizerParams(FpFormat(2, 2, False), 1.0, -0.5)
    with pytest.raises(ValueError):
        FpQuantizerParams(FpFormat(2, 2, False), 1.0, 0.1)


def test_params_dict_round_trip():
    p = FpQuantizerParams(FpFormat(3, 0, False), 2.25, -0.18)
    assert FpQuantizerParams.from_dict(p.to_dict()) == p
    assert p.to_dict() == {"e": 3, "m": 0, "signed": False, "maxval": 2.25, "zero_point": -0.18}


def test_on_grid_values_unchanged():
    params = FpQuantizerParams(FpFormat(2, 1), 2.0)
    grid = fp_grid(params)
    np.testing.assert_array_equal(fp_quantize(grid, params), grid)


def test_clip_above_range():
    assert fp_quantize(100.0, FpQuantizerParams(FpFormat(1, 2), 3.5)) == 3.5
    assert fp_quantize(-100.0, FpQuantizerParams(FpFormat(1, 2), 3.5)) == -3.5


def test_huge_and_infinite_inputs_clip():
    params = FpQuantizerParams(FpFormat(2, 1), 2.0)
    out = fp_quantize([1e300, -1e300, np.inf, -np.inf], params)
    np.testing.assert_array_equal(out, [2.0, -2.0, 2.0, -2.0])


def test_gaussian_matches_brute_force():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(10_000)
    params = FpQuantizerParams(FpFormat(2, 1), 2.0)
    np.testing.assert_array_equal(fp_quantize(x, params), brute_force(x, fp_grid(params)))


def test_ties_go_to_smaller_magnitude():
    params = FpQuantizerParams(FpFormat(1, 2), 3.5)
    # midpoints of the 0.5-spaced grid
    x = np.array([0.25, -0.25, 1.25, -1.25, 3.25, -3.25])
    np.testing.assert_array_equal(fp_quantize(x, params), [0.0, 0.0, 1.0, -1.0, 3.0, -3.0])


def test_quantize_keeps_shape():
    x = np.arange(24, dtype=float).reshape(2, 3, 4) / 10
    assert fp_quantize(x, FpQuantizerParams(FpFormat(2, 1), 2.0)).shape == (2, 3, 4)


@st.composite
def quantizers(draw):
    fmt = draw(st.sampled_from(FORMATS))
    maxval = draw(st.floats(1e-3, 1e3))
    zp = 0.0 if fmt.signed else draw(st.floats(-0.3, 0.0))
    return FpQuantizerParams(fmt, maxval, zp)


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(quantizers(), arrays(np.float64, st.integers(1, 50), elements=finite))
def test_projection(params, x):
    q = fp_quantize(x, params)
    np.testing.assert_array_equal(fp_quantize(q, params), q)


@settings(max_examples=200, deadline=None)
@given(quantizers(), arrays(np.float64, st.integers(2, 50), elements=finite))
def test_monotone(params, x):
    x = np.sort(x)
    assert np.all(np.diff(fp_quantize(x, params)) >= 0)


@settings(max_examples=200, deadline=None)
@given(quantizers(), arrays(np.float64, st.integers(1, 50), elements=finite))
def test_nearest_point_optimal(params, x):
    np.testing.assert_array_equal(fp_quantize(x, params), brute_force(x, fp_grid(params)))


@settings(max_examples=100, deadline=None)
@given(quantizers())
def test_unsigned_minimum_is_zero_point(params):
    if not params.signed:
        assert fp_grid(params)[0] == params.zero_point
    assert fp_grid(params)[-1] == pytest.approx(params.maxval + params.zero_point, rel=1e-14)


def test_int_quantize_examples():
    assert int_quantize(3.4, IntQuantizerParams(1.0, 0, -8, 7)) == 3.0
    assert int_quantize(100.0, IntQuantizerParams(0.5, 0, -8, 7)) == 3.5
    assert int_quantize(0.37, IntQuantizerParams(0.1, 2, 0, 15)) == pytest.approx(0.6, abs=1e-15)


def test_int_quantize_half_to_even():
    p = IntQuantizerParams(1.0, 0, -8, 7)
    np.testing.assert_array_equal(int_quantize([0.5, 1.5, 2.5, -0.5], p), [0.0, 2.0, 2.0, -0.0])


def test_int_params_validation():
    with pytest.raises(ValueError):
        IntQuantizerParams(0.0)
    with pytest.raises(ValueError):
        IntQuantizerParams(1.0, 0, 3, 3)


def test_mse_examples():
    x = np.array([0.3, -1.2])
    assert mse(x, x) == 0.0
    assert mse([0, 0], [1, 1]) == 1.0
    assert mse([1, 2, 3], [1, 1, 1]) == pytest.approx(5 / 3, rel=1e-15)
    with pytest.raises(ValueError):
        mse([1, 2], [1, 2, 3])


@pytest.mark.parametrize("bits,signed", list(itertools.product((4, 6, 8), (True, False))))
def test_grid_is_sorted_and_unique(bits, signed):
    for fmt in all_formats(bits, signed):
        g = fp_grid(FpQuantizerParams(fmt, 0.9, 0.0 if signed else -0.3))
        assert np.all(np.diff(g) > 0)
