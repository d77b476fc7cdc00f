"""MXFP4 tensor quantization under the 1x32, 32x1 and 32x32 block layouts.

Also holds the per-tensor E4M3 quantizer used as the FP8 baseline and the
quantization-error metrics.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from mxfp4sim.fp4_numerics import (
    BLOCK_SIZE,
    E8M0_NAN,
    InvalidInput,
    Rounding,
    _check_finite,
    codes_to_values,
    exponent_from_amax,
    round_fp4,
    values_to_codes,
)


class QuantLayout(enum.Enum):
    ROW_1X32 = "row"  # 32 consecutive elements along the last axis
    COL_32X1 = "col"  # 32 consecutive elements along the first axis
    BLOCK_32X32 = "block"

    @property
    def block_shape(self) -> tuple[int, int]:
        return {
            QuantLayout.ROW_1X32: (1, BLOCK_SIZE),
            QuantLayout.COL_32X1: (BLOCK_SIZE, 1),
            QuantLayout.BLOCK_32X32: (BLOCK_SIZE, BLOCK_SIZE),
        }[self]


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def scale_grid_shape(shape: tuple[int, int], layout: QuantLayout) -> tuple[int, int]:
    br, bc = layout.block_shape
    return _ceil_div(shape[0], br), _ceil_div(shape[1], bc)


@dataclass
class QuantizedTensor:
    shape: tuple[int, int]
    codes: np.ndarray  # uint8, one code per element, same shape as the tensor
    scales: np.ndarray  # int16 E8M0 exponents, one per block
    layout: QuantLayout

    def __post_init__(self):
        if self.codes.shape != tuple(self.shape):
            raise InvalidInput("codes shape does not match tensor shape")
        if self.scales.shape != scale_grid_shape(self.shape, self.layout):
            raise InvalidInput("scale grid does not match layout")

    def expanded_scales(self) -> np.ndarray:
        """Per-element exponents, broadcast from the block grid."""
        br, bc = self.layout.block_shape
        full = np.repeat(np.repeat(self.scales, br, axis=0), bc, axis=1)
        return full[: self.shape[0], : self.shape[1]]

    def to_bytes(self) -> bytes:
        return serialize(self)


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInput(f"expected a 2-D tensor, got shape {x.shape}")
    _check_finite(x)
    return x


def _blocked(x: np.ndarray, layout: QuantLayout) -> np.ndarray:
    """View (or zero-padded copy) of x shaped (grid_r, br, grid_c, bc)."""
    br, bc = layout.block_shape
    gr, gc = scale_grid_shape(x.shape, layout)
    if (gr * br, gc * bc) != x.shape:
        padded = np.zeros((gr * br, gc * bc))
        padded[: x.shape[0], : x.shape[1]] = x
        x = padded
    return x.reshape(gr, br, gc, bc)


def block_exponents(x: np.ndarray, layout: QuantLayout) -> np.ndarray:
    """Shared exponent for every block of ``x``; ragged edges use their own amax."""
    return exponent_from_amax(np.abs(_blocked(x, layout)).max(axis=(1, 3)))


def _scaled_grid_values(x, layout, rounding, rng):
    """Per-element grid values and the (grid_r, 1, grid_c, 1) block scales."""
    blocks = _blocked(x, layout)
    scales = exponent_from_amax(np.abs(blocks).max(axis=(1, 3)))
    factor = np.ldexp(1.0, scales.astype(np.int64))[:, None, :, None]
    values = round_fp4(blocks / factor, rounding, rng)
    return values, scales, factor


def _unblock(blocks: np.ndarray, shape) -> np.ndarray:
    gr, br, gc, bc = blocks.shape
    return blocks.reshape(gr * br, gc * bc)[: shape[0], : shape[1]]


def quantize_tensor(
    x,
    layout: QuantLayout = QuantLayout.ROW_1X32,
    rounding: Rounding = Rounding.NEAREST_EVEN,
    rng: np.random.Generator | None = None,
) -> QuantizedTensor:
    x = _as_matrix(x)
    values, scales, _ = _scaled_grid_values(x, layout, rounding, rng)
    codes = values_to_codes(_unblock(values, x.shape))
    return QuantizedTensor(x.shape, codes, scales, layout)


def dequantize_tensor(q: QuantizedTensor) -> np.ndarray:
    if np.any(q.scales == E8M0_NAN):
        raise InvalidInput("NaN E8M0 scale in quantized tensor")
    factor = np.ldexp(1.0, q.scales.astype(np.int64))[:, None, :, None]
    return _unblock(_blocked(codes_to_values(q.codes), q.layout) * factor, q.shape)


def fake_quantize(
    x,
    layout: QuantLayout = QuantLayout.ROW_1X32,
    rounding: Rounding = Rounding.NEAREST_EVEN,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """dequantize_tensor(quantize_tensor(x)) without materializing codes."""
    x = _as_matrix(x)
    values, _, factor = _scaled_grid_values(x, layout, rounding, rng)
    return _unblock(values * factor, x.shape)


# --- simulated FP8 (E4M3, per-tensor power-of-two scale) ------------------

E4M3_MAX = 448.0
E4M3_MIN_EXP = -6  # smallest normal binade
E4M3_MANT_BITS = 3


def e4m3_table() -> np.ndarray:
    """All 256 E4M3 (fn variant) code values; NaN for the two NaN codes."""
    out = np.empty(256)
    for code in range(256):
        s, e, m = code >> 7, (code >> 3) & 0xF, code & 0x7
        if e == 0xF and m == 0x7:
            v = np.nan
        elif e == 0:
            v = m / 8 * 2.0**-6
        else:
            v = (1 + m / 8) * 2.0 ** (e - 7)
        out[code] = -v if s else v
    return out


def round_e4m3(x: np.ndarray) -> np.ndarray:
    """Round onto the E4M3 grid with ties to even, saturating at +-448."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.minimum(np.abs(x), E4M3_MAX)
    _, exp = np.frexp(mag)
    ulp = np.ldexp(1.0, np.maximum(exp - 1, E4M3_MIN_EXP) - E4M3_MANT_BITS)
    return np.copysign(np.minimum(np.rint(mag / ulp) * ulp, E4M3_MAX), x) + 0.0


def fp8_scale_exponent(amax: float) -> int:
    """Largest k such that amax * 2**k stays within the E4M3 range."""
    if amax == 0:
        return 0
    _, exp = np.frexp(amax)
    k = 8 - (int(exp) - 1)  # puts amax in the [256, 512) binade
    if np.ldexp(amax, k) > E4M3_MAX:
        k -= 1
    return k


def quantize_fp8(x) -> np.ndarray:
    """Project ``x`` onto the per-tensor scaled E4M3 grid (dequantized)."""
    x = _as_matrix(x)
    k = fp8_scale_exponent(float(np.max(np.abs(x))) if x.size else 0.0)
    return np.ldexp(round_e4m3(np.ldexp(x, k)), -k)


# --- error metrics ---------------------------------------------------------


def quant_error_stats(x, q: QuantizedTensor) -> dict:
    """MSE, max abs error and per-block MSE keyed by row-major block index."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(q.shape):
        raise InvalidInput(f"shape mismatch: {x.shape} vs {q.shape}")
    err = x - dequantize_tensor(q)
    sq = err**2
    br, bc = q.layout.block_shape
    gr, gc = q.scales.shape
    per_block = {}
    for i in range(gr):
        for j in range(gc):
            blk = sq[i * br : (i + 1) * br, j * bc : (j + 1) * bc]
            per_block[i * gc + j] = float(blk.mean())
    return {
        "mse": float(sq.mean()) if sq.size else 0.0,
        "max_abs_err": float(np.abs(err).max()) if err.size else 0.0,
        "per_block_mse": per_block,
    }


# --- serialization ---------------------------------------------------------
#
# magic "MXQT", version u8, layout tag u8 (0 row, 1 col, 2 block),
# rows u32, cols u32 (little endian), packed codes: two per byte, the
# element with the lower row-major index in the high nibble, odd counts
# padded with a zero nibble; then scale exponents as int8 in row-major order.

_MAGIC = b"MXQT"
_LAYOUT_TAGS = [QuantLayout.ROW_1X32, QuantLayout.COL_32X1, QuantLayout.BLOCK_32X32]


def serialize(q: QuantizedTensor) -> bytes:
    flat = q.codes.reshape(-1).astype(np.uint8)
    if flat.size % 2:
        flat = np.append(flat, np.uint8(0))
    packed = (flat[0::2] << 4) | flat[1::2]
    header = _MAGIC + struct.pack(
        "<BBII", 1, _LAYOUT_TAGS.index(q.layout), q.shape[0], q.shape[1]
    )
    return header + packed.astype(np.uint8).tobytes() + q.scales.astype(np.int8).tobytes()


def deserialize(data: bytes) -> QuantizedTensor:
    if data[:4] != _MAGIC:
        raise InvalidInput("not a serialized QuantizedTensor")
    version, tag, rows, cols = struct.unpack_from("<BBII", data, 4)
    if version != 1 or tag >= len(_LAYOUT_TAGS):
        raise InvalidInput("unsupported header")
    layout = _LAYOUT_TAGS[tag]
    off = 4 + struct.calcsize("<BBII")
    n = rows * cols
    nbytes = _ceil_div(n, 2)
    packed = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off)
    codes = np.empty(2 * nbytes, dtype=np.uint8)
    codes[0::2] = packed >> 4
    codes[1::2] = packed & 0xF
    grid = scale_grid_shape((rows, cols), layout)
    scales = np.frombuffer(
        data, dtype=np.int8, count=grid[0] * grid[1], offset=off + nbytes
    ).astype(np.int16)
    return QuantizedTensor(
        (rows, cols), codes[:n].reshape(rows, cols), scales.reshape(grid), layout
    )

