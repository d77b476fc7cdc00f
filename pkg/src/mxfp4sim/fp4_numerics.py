"""E2M1 element coding, E8M0 shared exponents and the two rounding modes.

Code layout of a 4-bit element (sign in the high bit)::

    bit 3   sign
    bit 2-1 exponent (bias 1, 0 = subnormal)
    bit 0   mantissa

Magnitudes for codes 0..7 are 0, 0.5, 1, 1.5, 2, 3, 4, 6. Codes 8..15 are
their negatives; code 8 (negative zero) decodes to 0.0 and is never emitted.
"""

from __future__ import annotations

import enum
import math

import numpy as np

FP4_MAX = 6.0
FP4_EMAX = 2  # unbiased exponent of the top binade
FP4_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
FP4_VALUES = np.concatenate([FP4_MAGNITUDES, -FP4_MAGNITUDES])
FP4_VALUES[8] = 0.0  # -0 decodes equal to zero

E8M0_MIN = -127
E8M0_MAX = 127
E8M0_NAN = -128  # sentinel; fits the signed-byte serialization

BLOCK_SIZE = 32

_MAG_CODE = {m: i for i, m in enumerate(FP4_MAGNITUDES.tolist())}


class Rounding(enum.Enum):
    NEAREST_EVEN = "nearest"
    STOCHASTIC = "stochastic"


class InvalidInput(ValueError):
    """Raised for non-finite inputs or invalid quantization state."""


def decode_fp4(code: int) -> float:
    """Return the E2M1 value of a 4-bit code."""
    return float(FP4_VALUES[int(code) & 0xF])


def encode_fp4(value: float) -> int:
    """Exact inverse of :func:`decode_fp4` for representable values."""
    mag = abs(float(value))
    idx = np.flatnonzero(FP4_MAGNITUDES == mag)
    if idx.size == 0:
        raise InvalidInput(f"{value!r} is not an E2M1 value")
    sign = 8 if value < 0 and mag != 0 else 0
    return sign | int(idx[0])


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise InvalidInput("input contains NaN or Inf")


def round_fp4(
    x: np.ndarray,
    rounding: Rounding = Rounding.NEAREST_EVEN,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Round already-scaled values onto the E2M1 grid, saturating at +-6.

    Returns float64 values on the grid, whose spacing is 0.5 below 2, 1 in
    [2, 4) and 2 in [4, 6].
    """
    x = np.asarray(x, dtype=np.float64)
    mag = np.minimum(np.abs(x), FP4_MAX)
    ulp = 0.5 + 0.5 * (mag >= 2.0) + (mag >= 4.0)
    steps = mag / ulp
    if rounding is Rounding.NEAREST_EVEN:
        # integer step counts are even exactly when the mantissa bit is 0
        q = np.rint(steps)
    else:
        if rng is None:
            raise ValueError("stochastic rounding needs a Generator")
        q = np.floor(steps)
        q += rng.random(steps.shape) < (steps - q)
    return np.copysign(q * ulp, x) + 0.0


def values_to_codes(values: np.ndarray) -> np.ndarray:
    """Map E2M1 grid values to canonical uint8 codes."""
    values = np.asarray(values, dtype=np.float64)
    mag_idx = np.searchsorted(FP4_MAGNITUDES, np.abs(values))
    if np.any(FP4_MAGNITUDES[np.minimum(mag_idx, 7)] != np.abs(values)):
        raise InvalidInput("value off the E2M1 grid")
    sign = (values < 0) & (mag_idx != 0)
    return (mag_idx | (sign.astype(np.intp) << 3)).astype(np.uint8)


def codes_to_values(codes: np.ndarray) -> np.ndarray:
    return FP4_VALUES[np.asarray(codes, dtype=np.intp) & 0xF]


def quantize_scalar(
    x: float,
    rounding: Rounding = Rounding.NEAREST_EVEN,
    rng: np.random.Generator | None = None,
) -> int:
    """Quantize one finite real to an FP4 code (no scaling applied).

    Plain-float twin of :func:`round_fp4` for per-element callers.
    """
    x = float(x)
    if not math.isfinite(x):
        raise InvalidInput(f"cannot quantize non-finite value {x!r}")
    mag = min(abs(x), FP4_MAX)
    ulp = 0.5 if mag < 2.0 else 1.0 if mag < 4.0 else 2.0
    steps = mag / ulp
    if rounding is Rounding.NEAREST_EVEN:
        q = round(steps)  # half to even
    else:
        if rng is None:
            raise ValueError("stochastic rounding needs a Generator")
        q = math.floor(steps)
        q += rng.random() < steps - q
    code = _MAG_CODE[q * ulp]
    return code | 8 if x < 0 and code else code


def exponent_from_amax(amax: np.ndarray) -> np.ndarray:
    """Vectorized shared exponent for block maxima (see shared_exponent)."""
    amax = np.asarray(amax, dtype=np.float64)
    mant, exp = np.frexp(amax)  # amax = mant * 2**exp, mant in [0.5, 1)
    e = (exp - 1) - FP4_EMAX
    # the top binade only reaches 6, so a block max with mantissa > 1.5
    # moves up one binade instead of clipping
    e = e + (mant > 0.75)
    e = np.clip(e, E8M0_MIN, E8M0_MAX)
    return np.where(amax == 0, E8M0_MIN, e).astype(np.int16)


def shared_exponent(block) -> int:
    """E8M0 exponent for one block: the block max's exponent less FP4's emax.

    ``floor(log2(amax)) - 2``, bumped by one when ``amax / 2**e`` would exceed
    6 so the largest element is representable without saturating. An
    all-zero block gets the minimum exponent.
    """
    block = np.asarray(block, dtype=np.float64)
    if block.size == 0:
        raise InvalidInput("empty block")
    _check_finite(block)
    return int(exponent_from_amax(np.max(np.abs(block))))


def scale_value(e: int) -> float:
    if e == E8M0_NAN:
        raise InvalidInput("E8M0 NaN scale")
    return float(np.ldexp(1.0, e))
