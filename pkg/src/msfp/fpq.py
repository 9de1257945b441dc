"""Simulated low-bit integer and floating-point quantization.

Values are kept in float64 carriers; a quantizer only restricts them to a
finite grid. FP grids are built from an ExMy format with subnormals at
exponent code 0, then rescaled so the largest magnitude equals ``maxval``.
Unsigned grids are optionally shifted by a zero point.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "FpFormat",
    "FpQuantizerParams",
    "IntQuantizerParams",
    "fp_grid",
    "grid_scale",
    "unit_grid",
    "fp_quantize",
    "quantize_to_grid",
    "int_quantize",
    "mse",
    "all_formats",
]


@dataclass(frozen=True)
class FpFormat:
    exponent_bits: int
    mantissa_bits: int
    signed: bool = True

    def __post_init__(self):
        if self.exponent_bits < 0 or self.mantissa_bits < 0:
            raise ValueError("exponent and mantissa bit counts must be >= 0")
        if self.exponent_bits + self.mantissa_bits == 0:
            raise ValueError("format needs at least one exponent or mantissa bit")

    @property
    def bits(self) -> int:
        return self.exponent_bits + self.mantissa_bits + int(self.signed)

    @property
    def name(self) -> str:
        return f"E{self.exponent_bits}M{self.mantissa_bits}"

    def __str__(self) -> str:
        return self.name if self.signed else f"u{self.name}"

    @classmethod
    def parse(cls, name: str, signed: bool = True) -> "FpFormat":
        name = name.strip().upper()
        if not (name.startswith("E") and "M" in name):
            raise ValueError(f"not an ExMy format name: {name!r}")
        e, m = name[1:].split("M")
        return cls(int(e), int(m), signed)


def all_formats(bits: int, signed: bool) -> list[FpFormat]:
    """Every ExMy split of ``bits`` (one bit goes to the sign when signed),
    ordered from most exponent bits to fewest."""
    payload = bits - int(signed)
    if payload < 1:
        raise ValueError(f"{bits}-bit {'signed' if signed else 'unsigned'} format has no payload")
    return [FpFormat(e, payload - e, signed) for e in range(payload, -1, -1)]


@dataclass(frozen=True)
class FpQuantizerParams:
    format: FpFormat
    maxval: float
    zero_point: float = 0.0

    def __post_init__(self):
        if not self.maxval > 0:
            raise ValueError(f"maxval must be positive, got {self.maxval}")
        if self.format.signed and self.zero_point != 0:
            raise ValueError("signed formats carry no zero point")
        if not self.format.signed and not -0.3 - 1e-12 <= self.zero_point <= 0:
            raise ValueError(f"unsigned zero point must lie in [-0.3, 0], got {self.zero_point}")

    @property
    def signed(self) -> bool:
        return self.format.signed

    def to_dict(self) -> dict:
        return {
            "e": self.format.exponent_bits,
            "m": self.format.mantissa_bits,
            "signed": self.format.signed,
            "maxval": float(self.maxval),
            "zero_point": float(self.zero_point),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FpQuantizerParams":
        fmt = FpFormat(int(d["e"]), int(d["m"]), bool(d["signed"]))
        return cls(fmt, float(d["maxval"]), float(d["zero_point"]))


@dataclass(frozen=True)
class IntQuantizerParams:
    scale: float
    zero_point: int = 0
    lower: int = -128
    upper: int = 127

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not self.lower < self.upper:
            raise ValueError("clip bounds need lower < upper")


@lru_cache(maxsize=None)
def _unit_magnitudes(e: int, m: int) -> np.ndarray:
    mant = np.arange(2**m, dtype=np.float64) / 2**m
    values = [2.0 * mant]  # exponent code 0: subnormals, includes exact zero
    for code in range(1, 2**e):
        values.append(2.0**code * (1.0 + mant))
    out = np.unique(np.concatenate(values))
    out.setflags(write=False)
    return out


def unit_grid(fmt: FpFormat) -> np.ndarray:
    """Grid at bias 0 (largest magnitude ``2^(2^e-1) * (2 - 2^-m)``)."""
    mags = _unit_magnitudes(fmt.exponent_bits, fmt.mantissa_bits)
    if fmt.signed:
        return np.concatenate([-mags[:0:-1], mags])
    return mags


def grid_scale(params: FpQuantizerParams) -> float:
    """Factor mapping the bias-0 grid onto one whose maximum is ``maxval``."""
    mags = _unit_magnitudes(params.format.exponent_bits, params.format.mantissa_bits)
    return params.maxval / mags[-1]


def fp_grid(params: FpQuantizerParams) -> np.ndarray:
    """Sorted, duplicate-free representable values of a calibrated quantizer."""
    grid = unit_grid(params.format) * grid_scale(params) + params.zero_point
    # wide-exponent formats can collapse tiny steps onto the zero point
    return np.unique(grid)


def quantize_to_grid(x, grid: np.ndarray) -> np.ndarray:
    """Nearest value of a sorted ``grid`` for every element of ``x``.

    Values beyond the grid clip to its ends; ties go to the grid value with
    the smaller magnitude.
    """
    x = np.asarray(x, dtype=np.float64)
    if grid.size == 1:
        return np.full_like(x, grid[0])
    # clipping first keeps huge inputs from absorbing both distances
    x = np.clip(x, grid[0], grid[-1])
    j = np.clip(np.searchsorted(grid, x, side="right"), 1, grid.size - 1)
    hi = grid.take(j)
    j -= 1
    lo = grid.take(j)
    d_lo = np.abs(x - lo)
    d_hi = np.abs(hi - x)
    take_hi = d_hi < d_lo
    take_hi |= (d_hi == d_lo) & (np.abs(hi) < np.abs(lo))
    return np.where(take_hi, hi, lo)


def fp_quantize(x, params: FpQuantizerParams) -> np.ndarray:
    return quantize_to_grid(x, fp_grid(params))


def int_quantize(x, params: IntQuantizerParams) -> np.ndarray:
    """``clip(round(x / s) + z, l, u) * s`` with round-half-to-even."""
    x = np.asarray(x, dtype=np.float64)
    codes = np.clip(np.rint(x / params.scale) + params.zero_point, params.lower, params.upper)
    return codes * params.scale


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = (a - b).ravel()
    return float(np.mean(d * d))
