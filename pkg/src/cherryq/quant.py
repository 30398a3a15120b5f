"""Weight quantization primitives.

Symmetric path ("full range" MinMax): with ``S = max|x| / 2**(k-1)``::

    code = round(clip(x / S, -2**(k-1) + eps, 2**(k-1) - eps) - 0.5)
    x_hat = S * (code + 0.5)

so the grid ``{S * (n + 0.5)}`` is symmetric about zero and has no zero
level. ``round`` is round-half-away-from-zero. A group whose values are all
zero gets ``S = 0``, codes 0 and dequantizes to zeros.

The asymmetric path spans ``[min, max]`` with ``2**k`` levels and is used
by the per-column scale trick.

Codes pack LSB-first into a little-endian bit stream: 4 codes per byte at
k=2, 8 codes per 3 bytes at k=3, 2 per byte at k=4. Signed codes are offset
by ``2**(k-1)`` before packing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorruptCheckpointError, DataError

PACK_LAYOUT = "lsb-bitstream-v1"


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 3
    group_size: int = 128
    clip_eps: float = 0.01
    cherry_fraction: float = 1 / 256
    scale_trick: bool | None = None  # None -> on iff bits == 2
    scale_grid_points: int = 20

    def __post_init__(self):
        if self.bits not in (2, 3, 4):
            raise ConfigError(f"bits must be 2, 3 or 4, got {self.bits}")
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")
        if not 0 < self.clip_eps < 0.5:
            raise ConfigError(f"clip_eps must be in (0, 0.5), got {self.clip_eps}")
        # 0 is allowed: it is the plain QAT baseline
        if not 0 <= self.cherry_fraction < 1:
            raise ConfigError(f"cherry_fraction must be in [0, 1), got {self.cherry_fraction}")
        if self.scale_grid_points < 1:
            raise ConfigError("scale_grid_points must be >= 1")
        if self.scale_trick is None:
            object.__setattr__(self, "scale_trick", self.bits == 2)

    def to_dict(self) -> dict:
        return {"bits": self.bits, "group_size": self.group_size, "clip_eps": self.clip_eps,
                "cherry_fraction": self.cherry_fraction, "scale_trick": self.scale_trick,
                "scale_grid_points": self.scale_grid_points}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls(**d)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_input(x) -> np.ndarray:
    x = np.asarray(x)
    if x.size == 0:
        raise DataError("cannot quantize an empty array")
    if not np.all(np.isfinite(x)):
        raise DataError("cannot quantize non-finite values")
    return x


def code_range(k: int, symmetric: bool = True) -> tuple[int, int]:
    if symmetric:
        return -(1 << (k - 1)), (1 << (k - 1)) - 1
    return 0, (1 << k) - 1


# -- symmetric ------------------------------------------------------------------

def symmetric_scale(x, k: int, axis=None, keepdims=False) -> np.ndarray:
    x = np.asarray(x)
    return (np.abs(x).max(axis=axis, keepdims=keepdims) / (1 << (k - 1))).astype(np.float32)


def _codes_for_scale(x: np.ndarray, scale: np.ndarray, k: int, eps: float) -> np.ndarray:
    half = 1 << (k - 1)
    scale64 = np.asarray(scale, dtype=np.float64)
    safe = np.where(scale64 > 0, scale64, 1.0)
    ratio = np.clip(x.astype(np.float64) / safe, -half + eps, half - eps)
    codes = round_half_away(ratio - 0.5)
    codes = np.where(scale64 > 0, codes, 0)
    return codes.astype(np.int8)


def quantize_symmetric(x, k: int, eps: float = 0.01, scale=None) -> tuple[np.ndarray, np.float32]:
    """Quantize a whole array with one scale.

    ``scale`` overrides the MinMax scale; with it, requantizing values that
    already sit on that scale's grid returns the same codes.
    """
    x = _check_input(x)
    s = symmetric_scale(x, k) if scale is None else np.float32(scale)
    return _codes_for_scale(x, s, k, eps), np.float32(s)


def dequantize(codes, scale, k: int) -> np.ndarray:
    codes = np.asarray(codes)
    lo, hi = code_range(k)
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise DataError(f"code outside [{lo}, {hi}] for k={k}")
    scale = np.asarray(scale, dtype=np.float32)
    out = scale * (codes.astype(np.float32) + np.float32(0.5))
    return np.where(scale > 0, out, np.float32(0)).astype(np.float32)


def fake_quant(x, k: int, eps: float = 0.01, scale=None) -> np.ndarray:
    codes, s = quantize_symmetric(x, k, eps, scale)
    return dequantize(codes, s, k)


# -- asymmetric -----------------------------------------------------------------

def _asym_codes(x: np.ndarray, scale: np.ndarray, zero: np.ndarray, k: int) -> np.ndarray:
    scale64 = np.asarray(scale, dtype=np.float64)
    safe = np.where(scale64 > 0, scale64, 1.0)
    codes = round_half_away((x.astype(np.float64) - zero) / safe)
    codes = np.clip(codes, 0, (1 << k) - 1)
    return np.where(scale64 > 0, codes, 0).astype(np.uint8)


def quantize_asymmetric(x, k: int) -> tuple[np.ndarray, np.float32, np.float32]:
    """Min-max grid: ``x_hat = scale * code + zero_point``, codes in ``[0, 2**k - 1]``."""
    x = _check_input(x)
    lo, hi = np.float32(x.min()), np.float32(x.max())
    scale = np.float32((np.float64(hi) - lo) / ((1 << k) - 1))
    return _asym_codes(x, scale, lo, k), scale, lo


def dequantize_asymmetric(codes, scale, zero_point, k: int) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > (1 << k) - 1):
        raise DataError(f"asymmetric code outside [0, {(1 << k) - 1}]")
    scale = np.asarray(scale, dtype=np.float32)
    zero = np.asarray(zero_point, dtype=np.float32)
    return (scale * codes.astype(np.float32) + zero).astype(np.float32)


# -- grouped --------------------------------------------------------------------

@dataclass
class GroupedQuant:
    """Row-wise contiguous groups of ``group_size`` columns, one scale each.

    ``scales`` (and ``zero_points`` on the asymmetric path) are (rows, n_groups).
    The last group of a row may be partial.
    """

    codes: np.ndarray
    scales: np.ndarray
    k: int
    group_size: int
    shape: tuple[int, int]
    zero_points: np.ndarray | None = None

    @property
    def symmetric(self) -> bool:
        return self.zero_points is None

    @property
    def n_groups(self) -> int:
        return self.scales.size

    def dequantize(self) -> np.ndarray:
        rows, cols = self.shape
        if cols == 0:
            return np.zeros(self.shape, np.float32)
        scale = _expand_groups(self.scales.astype(np.float32), self.group_size, cols)
        if self.symmetric:
            return dequantize(self.codes, scale, self.k)
        zero = _expand_groups(self.zero_points.astype(np.float32), self.group_size, cols)
        return dequantize_asymmetric(self.codes, scale, zero, self.k)


def _expand_groups(per_group: np.ndarray, group_size: int, cols: int) -> np.ndarray:
    return np.repeat(per_group, group_size, axis=1)[:, :cols]


def _grouped_view(m: np.ndarray, group_size: int, fill: float = 0.0) -> np.ndarray:
    rows, cols = m.shape
    n_groups = -(-cols // group_size)
    pad = n_groups * group_size - cols
    if pad:
        m = np.concatenate([m, np.full((rows, pad), fill, dtype=m.dtype)], axis=1)
    return m.reshape(rows, n_groups, group_size)


def quantize_grouped(matrix, k: int, group_size: int, eps: float = 0.01, symmetric: bool = True,
                     scale_dtype=np.float32) -> GroupedQuant:
    """Group-quantize a 2-D matrix.

    ``scale_dtype=np.float16`` rounds scales (and zero points) to storage
    precision *before* computing codes, so the stored codes are the nearest
    grid points for the stored scales.
    """
    m = np.asarray(matrix)
    if group_size <= 0:
        raise ConfigError(f"group_size must be positive, got {group_size}")
    if m.ndim != 2:
        raise ConfigError(f"quantize_grouped expects a 2-D matrix, got shape {m.shape}")
    rows, cols = m.shape
    if cols == 0:
        empty = np.zeros((rows, 0), np.float32)
        return GroupedQuant(np.zeros((rows, 0), np.int8 if symmetric else np.uint8), empty, k,
                            group_size, (rows, 0), None if symmetric else empty.copy())
    _check_input(m)
    if symmetric:
        g = _grouped_view(m, group_size)
        scales = (np.abs(g).max(axis=2) / (1 << (k - 1))).astype(scale_dtype)
        full = _expand_groups(scales.astype(np.float32), group_size, cols)
        codes = _codes_for_scale(m, full, k, eps)
        return GroupedQuant(codes, scales, k, group_size, (rows, cols))
    lo = _grouped_view(m, group_size, fill=np.inf).min(axis=2)
    hi = _grouped_view(m, group_size, fill=-np.inf).max(axis=2)
    scales = ((hi.astype(np.float64) - lo) / ((1 << k) - 1)).astype(scale_dtype)
    zeros = lo.astype(scale_dtype)
    full_s = _expand_groups(scales.astype(np.float32), group_size, cols)
    full_z = _expand_groups(zeros.astype(np.float32), group_size, cols)
    codes = _asym_codes(m, full_s, full_z, k)
    return GroupedQuant(codes, scales, k, group_size, (rows, cols), zeros)


def fake_quant_grouped(matrix, k: int, group_size: int, eps: float = 0.01, symmetric: bool = True,
                       scale_dtype=np.float32) -> np.ndarray:
    return quantize_grouped(matrix, k, group_size, eps, symmetric, scale_dtype).dequantize()


# -- packing --------------------------------------------------------------------

@dataclass
class PackedBlob:
    data: bytes
    k: int
    count: int
    layout: str = PACK_LAYOUT
    signed: bool = field(default=True)


def packed_length(count: int, k: int) -> int:
    return -(-count * k // 8)


def pack_codes(codes, k: int, signed: bool = True) -> PackedBlob:
    codes = np.asarray(codes).reshape(-1)
    lo, hi = code_range(k, signed)
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise DataError(f"code outside [{lo}, {hi}] for k={k}")
    u = (codes.astype(np.int16) - lo).astype(np.uint8)
    bits = ((u[:, None] >> np.arange(k, dtype=np.uint8)) & 1).astype(np.uint8).reshape(-1)
    return PackedBlob(np.packbits(bits, bitorder="little").tobytes(), k, int(codes.size), PACK_LAYOUT, signed)


def unpack_codes(blob: PackedBlob) -> np.ndarray:
    k, count = blob.k, blob.count
    if blob.layout != PACK_LAYOUT:
        raise CorruptCheckpointError(f"unknown packing layout {blob.layout!r}")
    if len(blob.data) != packed_length(count, k):
        raise CorruptCheckpointError(
            f"packed blob holds {len(blob.data)} bytes, expected {packed_length(count, k)} for {count} codes")
    bits = np.unpackbits(np.frombuffer(blob.data, dtype=np.uint8), bitorder="little")
    if bits[count * k:].any():
        raise CorruptCheckpointError("nonzero padding bits in packed blob")
    u = (bits[:count * k].reshape(count, k).astype(np.int16) << np.arange(k, dtype=np.int16)).sum(axis=1)
    lo, _ = code_range(k, blob.signed)
    return (u + lo).astype(np.int8 if blob.signed else np.uint8)


# -- bit accounting ---------------------------------------------------------------

def cherry_count(cols: int, fraction: float) -> int:
    """Number of cherry columns: ``max(1, round(cols * fraction))``, 0 when fraction is 0."""
    if fraction <= 0:
        return 0
    return max(1, int(math.floor(cols * fraction + 0.5)))


def avg_bits(config: QuantConfig, rows: int, cols: int) -> float:
    """Storage bits per weight: codes, 16-bit group scales, 16-bit cherry values and indices,
    plus a 16-bit per-column scale when the scale trick is on."""
    if rows <= 0 or cols <= 0:
        raise ConfigError("matrix shape must be positive")
    k = config.bits
    n_cherry = cherry_count(cols, config.cherry_fraction)
    bits = k + 16 / config.group_size + config.cherry_fraction * (16 - k) + 16 * n_cherry / (rows * cols)
    if config.scale_trick:
        bits += 16 / rows
    return bits
