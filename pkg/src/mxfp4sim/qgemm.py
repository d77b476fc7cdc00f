"""Fprop, Dgrad and Wgrad GEMMs with optional Hadamard injection.

Each path rotates both operands along their shared contraction axis, so in
exact arithmetic the rotation cancels (H H^T = I); quantization then sees
the rotated operands. Products are computed on dequantized float64 values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from mxfp4sim.block_quant import QuantLayout, fake_quantize, quantize_fp8
from mxfp4sim.fp4_numerics import Rounding
from mxfp4sim.hadamard import HadamardSpec, apply_rotation


class GemmPath(enum.Enum):
    FPROP = "fprop"
    DGRAD = "dgrad"
    WGRAD = "wgrad"


class Numeric(enum.Enum):
    EXACT = "exact"
    FP8 = "fp8"
    MXFP4 = "mxfp4"


# (activation/gradient operand, weight-or-second operand)
DEFAULT_LAYOUTS = {
    GemmPath.FPROP: (QuantLayout.ROW_1X32, QuantLayout.BLOCK_32X32),
    GemmPath.DGRAD: (QuantLayout.ROW_1X32, QuantLayout.BLOCK_32X32),
    GemmPath.WGRAD: (QuantLayout.ROW_1X32, QuantLayout.ROW_1X32),
}


@dataclass(frozen=True)
class PathConfig:
    numeric: Numeric = Numeric.EXACT
    hadamard: HadamardSpec | None = None
    rounding: Rounding = Rounding.NEAREST_EVEN
    layouts: tuple[QuantLayout, QuantLayout] | None = None

    def layouts_for(self, path: GemmPath) -> tuple[QuantLayout, QuantLayout]:
        return self.layouts or DEFAULT_LAYOUTS[path]


EXACT = PathConfig()


def _quant(a: np.ndarray, cfg: PathConfig, layout, rng) -> np.ndarray:
    if cfg.numeric is Numeric.EXACT:
        return a
    if cfg.numeric is Numeric.FP8:
        return quantize_fp8(a)
    if cfg.rounding is Rounding.STOCHASTIC and rng is None:
        raise ValueError("stochastic MXFP4 path needs an rng")
    return fake_quantize(a, layout, cfg.rounding, rng)


def _contract(a: np.ndarray, b: np.ndarray, cfg: PathConfig, path: GemmPath, rng):
    """a @ b.T with both operands rotated and quantized along their columns."""
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"{path.value}: contraction mismatch {a.shape[1]} vs {b.shape[1]}"
        )
    if cfg.hadamard is not None:
        a = apply_rotation(a, cfg.hadamard, "cols")
        b = apply_rotation(b, cfg.hadamard, "cols")
    la, lb = cfg.layouts_for(path)
    return _quant(a, cfg, la, rng) @ _quant(b, cfg, lb, rng).T


def _mat(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D operand, got shape {a.shape}")
    return a


def fprop(x, w, cfg: PathConfig = EXACT, rng=None) -> np.ndarray:
    """Y = X W^T computed as (XH)(WH)^T; x is [tokens, d_in], w is [d_out, d_in]."""
    return _contract(_mat(x), _mat(w), cfg, GemmPath.FPROP, rng)


def dgrad(dy, w, cfg: PathConfig = EXACT, rng=None) -> np.ndarray:
    """dX = dY W computed as (dY H)(W^T H)^T, contracting over d_out."""
    return _contract(_mat(dy), _mat(w).T, cfg, GemmPath.DGRAD, rng)


def wgrad(dy, x, cfg: PathConfig = EXACT, rng=None) -> np.ndarray:
    """dW = dY^T X computed as (dY^T H)(X^T H)^T, contracting over tokens."""
    return _contract(_mat(dy).T, _mat(x).T, cfg, GemmPath.WGRAD, rng)
