import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mxfp4sim.fp4_numerics import (
    E8M0_MIN,
    FP4_VALUES,
    InvalidInput,
    Rounding,
    codes_to_values,
    decode_fp4,
    encode_fp4,
    quantize_scalar,
    round_fp4,
    scale_value,
    shared_exponent,
    values_to_codes,
)

from oracles import e2m1_formula, fit_exponent, nearest_e2m1

E2M1_SET = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, -0.5, -1.0, -1.5, -2.0, -3.0, -4.0, -6.0}


def test_decode_matches_formula_for_every_code():
    for code in range(16):
        assert decode_fp4(code) == e2m1_formula(code)
    assert {decode_fp4(c) for c in range(16)} == E2M1_SET


@pytest.mark.parametrize(
    "bits, value",
    [(0b0000, 0.0), (0b0111, 6.0), (0b1010, -1.0), (0b1000, 0.0), (0b0001, 0.5)],
)
def test_decode_examples(bits, value):
    assert decode_fp4(bits) == value


def test_encode_decode_round_trip_on_canonical_codes():
    for code in range(16):
        if code == 8:  # negative zero is not canonical
            continue
        assert encode_fp4(decode_fp4(code)) == code
    with pytest.raises(InvalidInput):
        encode_fp4(2.5)


@pytest.mark.parametrize(
    "x, expected",
    [(0.0, 0.0), (2.4, 2.0), (7.0, 6.0), (-7.0, -6.0), (0.75, 1.0), (0.25, 0.0),
     (1.25, 1.0), (1.75, 2.0), (2.5, 2.0), (3.5, 4.0), (5.0, 4.0), (-2.6, -3.0)],
)
def test_nearest_even_examples(x, expected):
    assert decode_fp4(quantize_scalar(x)) == expected
    assert nearest_e2m1(x) == expected


def test_nearest_never_emits_negative_zero():
    assert quantize_scalar(-0.1) == 0
    assert quantize_scalar(-0.0) == 0


def test_non_finite_scalar_rejected():
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(InvalidInput):
            quantize_scalar(bad)


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=-6.0, max_value=6.0, allow_nan=False))
def test_nearest_is_optimal(x):
    got = decode_fp4(quantize_scalar(x))
    assert all(abs(got - x) <= abs(v - x) for v in E2M1_SET)


def test_stochastic_midpoint_probability():
    rng = np.random.default_rng(7)
    q = round_fp4(np.full(200_000, 2.5), Rounding.STOCHASTIC, rng)
    assert set(np.unique(q)) == {2.0, 3.0}
    p_up = np.mean(q == 3.0)
    # binomial sd at p=0.5 is ~0.0011
    assert abs(p_up - 0.5) < 0.006


def test_stochastic_saturates_deterministically():
    rng = np.random.default_rng(0)
    q = round_fp4(np.array([7.0, -9.0, 6.0] * 1000), Rounding.STOCHASTIC, rng)
    assert np.all(q.reshape(-1, 3) == [6.0, -6.0, 6.0])


def test_stochastic_needs_generator():
    with pytest.raises(ValueError):
        round_fp4(np.array([1.2]), Rounding.STOCHASTIC)


def test_stochastic_stays_on_bracketing_neighbours():
    rng = np.random.default_rng(3)
    x = rng.uniform(-6, 6, size=5000)
    q = round_fp4(x, Rounding.STOCHASTIC, rng)
    vals = np.array(sorted(E2M1_SET))
    lo = vals[np.searchsorted(vals, x, side="right") - 1]
    hi = vals[np.minimum(np.searchsorted(vals, x, side="left"), vals.size - 1)]
    assert np.all((q == lo) | (q == hi))


def test_stochastic_is_reproducible():
    x = np.linspace(-5.9, 5.9, 999)
    a = round_fp4(x, Rounding.STOCHASTIC, np.random.default_rng(42))
    b = round_fp4(x, Rounding.STOCHASTIC, np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_nearest_is_deterministic():
    x = np.random.default_rng(1).normal(0, 3, 1000)
    assert np.array_equal(round_fp4(x), round_fp4(x))


@pytest.mark.parametrize(
    "block, e",
    [([6.0, 1.0, -2.0], 0), ([48.0, 1.0], 3), ([-48.0], 3), ([1.0], -2), ([7.0], 1), ([0.75], -3)],
)
def test_shared_exponent_examples(block, e):
    assert shared_exponent(block) == e
    assert shared_exponent(block) == fit_exponent(max(abs(v) for v in block))


def test_shared_exponent_zero_block_and_errors():
    assert shared_exponent(np.zeros(32)) == E8M0_MIN
    with pytest.raises(InvalidInput):
        shared_exponent([1.0, math.nan])
    with pytest.raises(InvalidInput):
        shared_exponent([])


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=1e-30, max_value=1e30))
def test_shared_exponent_fits_block_max(amax):
    e = shared_exponent([amax, -amax / 3])
    assert e == fit_exponent(amax)
    scaled = amax / 2.0**e
    # the block max lands in the upper part of the FP4 range without clipping
    assert 3.0 < scaled <= 6.0


def test_shared_exponent_clamps_to_e8m0_range():
    assert shared_exponent([1e300]) == 127
    assert shared_exponent([1e-300]) == -127


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(sorted(E2M1_SET)), st.integers(min_value=-120, max_value=120))
def test_round_trip_of_representable_values(v, e):
    x = v * 2.0**e
    block = [x, 6.0 * 2.0**e]
    se = shared_exponent(block)
    assert se == e
    assert decode_fp4(quantize_scalar(x / scale_value(se))) * scale_value(se) == x


def test_codes_to_values_table():
    assert np.array_equal(codes_to_values(np.arange(16)), FP4_VALUES)


def test_scalar_and_vector_paths_agree():
    xs = np.linspace(-7.5, 7.5, 30001)
    scalar = np.array([quantize_scalar(x) for x in xs.tolist()])
    assert np.array_equal(scalar, values_to_codes(round_fp4(xs)))
    ups = sum(quantize_scalar(0.25, Rounding.STOCHASTIC, np.random.default_rng(s)) == 1 for s in range(400))
    assert 150 < ups < 250
