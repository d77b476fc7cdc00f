"""Tiled Hadamard rotations (H16/H32), deterministic or with random signs."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SUPPORTED_SIZES = (16, 32)


@dataclass(frozen=True)
class HadamardSpec:
    size: int = 16
    randomized: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.size not in SUPPORTED_SIZES:
            raise ValueError(f"unsupported Hadamard size {self.size}")

    @property
    def tag(self) -> str:
        return f"{'rand' if self.randomized else 'det'}{self.size}"

    @classmethod
    def from_tag(cls, tag: str, seed: int = 0) -> HadamardSpec | None:
        """Parse ``none``, ``det16``, ``det32`` or ``rand16`` (also ``rand32``)."""
        if tag == "none":
            return None
        for prefix, randomized in (("det", False), ("rand", True)):
            if tag.startswith(prefix) and tag[len(prefix):].isdigit():
                return cls(int(tag[len(prefix):]), randomized, seed)
        raise ValueError(f"unknown Hadamard tag {tag!r}")


def sylvester(n: int) -> np.ndarray:
    """Unnormalized Sylvester Hadamard matrix of order n (a power of two)."""
    if n < 1 or n & (n - 1):
        raise ValueError(f"Sylvester order must be a power of two, got {n}")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


@lru_cache(maxsize=None)
def _normalized(n: int) -> np.ndarray:
    h = sylvester(n) / np.sqrt(n)
    h.setflags(write=False)
    return h


def sign_diagonal(spec: HadamardSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    return rng.choice(np.array([-1.0, 1.0]), size=spec.size)


def build_hadamard(spec: HadamardSpec) -> np.ndarray:
    """Orthonormal H (or H @ D with a seeded +-1 diagonal D)."""
    h = _normalized(spec.size)
    if spec.randomized:
        return h * sign_diagonal(spec)[None, :]
    return h.copy()


def _segments(x: np.ndarray, n: int, axis: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected a 2-D tensor")
    if axis == "rows":
        x = x.T
    elif axis != "cols":
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    if x.shape[1] % n:
        raise ValueError(
            f"rotated axis length {x.shape[1]} is not a multiple of {n}"
        )
    return x.reshape(x.shape[0], -1, n)


def _restore(seg: np.ndarray, shape, axis: str) -> np.ndarray:
    out = seg.reshape(shape[1], shape[0]).T if axis == "rows" else seg.reshape(shape)
    return np.ascontiguousarray(out)


def apply_rotation(x, spec: HadamardSpec, axis: str = "cols") -> np.ndarray:
    """Multiply every contiguous ``spec.size`` segment along ``axis`` by H.

    ``axis="cols"`` rotates each row's segments (X -> X H block-diagonal);
    ``axis="rows"`` does the same down each column.
    """
    x = np.asarray(x, dtype=np.float64)
    seg = _segments(x, spec.size, axis)
    return _restore(seg @ build_hadamard(spec), x.shape, axis)


def apply_inverse(x, spec: HadamardSpec, axis: str = "cols") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    seg = _segments(x, spec.size, axis)
    return _restore(seg @ build_hadamard(spec).T, x.shape, axis)


def fwht(seg: np.ndarray) -> np.ndarray:
    """Unnormalized in-order Walsh-Hadamard transform over the last axis."""
    out = np.array(seg, dtype=np.float64, copy=True)
    n = out.shape[-1]
    lead = out.shape[:-1]
    h = 1
    while h < n:
        v = out.reshape(*lead, n // (2 * h), 2, h)
        a = v[..., 0, :].copy()
        b = v[..., 1, :]
        v[..., 0, :] += b
        v[..., 1, :] = a - b
        h *= 2
    return out


def fast_apply(x, spec: HadamardSpec, axis: str = "cols") -> np.ndarray:
    """Same result as :func:`apply_rotation` via an O(n log n) butterfly."""
    x = np.asarray(x, dtype=np.float64)
    seg = fwht(_segments(x, spec.size, axis)) / np.sqrt(spec.size)
    if spec.randomized:
        seg = seg * sign_diagonal(spec)
    return _restore(seg, x.shape, axis)
