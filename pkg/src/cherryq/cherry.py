"""Cherry-column selection and the mixed-precision matrix container.

A :class:`MixedMatrix` keeps its cherry columns as float16 values plus
uint16 column indices; the remaining ("normal") columns are compacted in
order and group-quantized. On the scale-trick path the normal part stores
``Q(w * s)`` and reconstruction divides by the per-column ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorruptCheckpointError
from .quant import GroupedQuant, QuantConfig, cherry_count, quantize_grouped


def select_cherry_columns(impact, fraction: float) -> np.ndarray:
    """Columns with the highest row-averaged impact, returned sorted ascending.

    Ties go to the lower column index. Returns an empty array for fraction 0.
    """
    values = getattr(impact, "values", impact)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigError(f"impact must be 2-D, got shape {values.shape}")
    cols = values.shape[1]
    if not 0 <= fraction < 1:
        raise ConfigError(f"cherry fraction must be in [0, 1), got {fraction}")
    k = cherry_count(cols, fraction)
    if k >= cols:
        raise ConfigError(f"{k} cherry columns would leave no normal columns out of {cols}")
    if k == 0:
        return np.zeros(0, dtype=np.uint16)
    score = values.mean(axis=0)
    top = np.argsort(-score, kind="stable")[:k]
    return np.sort(top).astype(np.uint16)


def normal_columns(cols: int, cherry_indices) -> np.ndarray:
    mask = np.ones(cols, dtype=bool)
    mask[np.asarray(cherry_indices, dtype=np.int64)] = False
    return np.flatnonzero(mask)


@dataclass
class MixedMatrix:
    rows: int
    cols: int
    cherry_indices: np.ndarray          # uint16, strictly increasing
    cherry_values: np.ndarray           # float16, (rows, n_cherry)
    normal: GroupedQuant                # over the compacted normal columns
    trick_scales: np.ndarray | None = None  # float16, one per normal column

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    def validate(self) -> None:
        idx = self.cherry_indices.astype(np.int64)
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[-1] >= self.cols):
            raise CorruptCheckpointError("cherry indices must be strictly increasing and < cols")
        n_normal = self.cols - idx.size
        if self.cherry_values.shape != (self.rows, idx.size):
            raise CorruptCheckpointError(f"cherry values shape {self.cherry_values.shape} inconsistent")
        if self.normal.shape != (self.rows, n_normal):
            raise CorruptCheckpointError(f"normal part shape {self.normal.shape} inconsistent")
        if self.trick_scales is not None and self.trick_scales.shape != (n_normal,):
            raise CorruptCheckpointError("per-column scales do not match normal column count")

    def storage_bits(self) -> int:
        """Bits actually held: codes, 16-bit scales (and zero points), cherries, indices, column scales."""
        q = self.normal
        bits = q.codes.size * q.k + 16 * q.scales.size
        if q.zero_points is not None:
            bits += 16 * q.zero_points.size
        bits += 16 * self.cherry_values.size + 16 * self.cherry_indices.size
        if self.trick_scales is not None:
            bits += 16 * self.trick_scales.size
        return bits

    def bits_per_weight(self) -> float:
        return self.storage_bits() / (self.rows * self.cols)


def split_weights(weight, cherry_indices, config: QuantConfig, trick_scales=None) -> MixedMatrix:
    """Keep cherry columns at float16, group-quantize the rest with float16 scales."""
    w = np.asarray(weight, dtype=np.float32)
    if w.ndim != 2:
        raise ConfigError(f"weight must be 2-D, got shape {w.shape}")
    rows, cols = w.shape
    idx = np.asarray(cherry_indices, dtype=np.int64).reshape(-1)
    if len(np.unique(idx)) != idx.size:
        raise ConfigError("duplicate cherry indices")
    if idx.size and (idx.min() < 0 or idx.max() >= cols):
        raise ConfigError(f"cherry index out of range for {cols} columns")
    if cols > 65536:
        raise ConfigError("cherry indices are stored as uint16; too many columns")
    idx = np.sort(idx)
    normal_idx = normal_columns(cols, idx)
    w_normal = w[:, normal_idx]
    scales16 = None
    if trick_scales is not None:
        scales16 = np.asarray(trick_scales).astype(np.float16)
        if scales16.shape != (normal_idx.size,):
            raise ConfigError("trick scales must have one entry per normal column")
        w_normal = w_normal * scales16.astype(np.float32)
    q = quantize_grouped(w_normal, config.bits, config.group_size, config.clip_eps,
                         symmetric=trick_scales is None, scale_dtype=np.float16)
    m = MixedMatrix(rows, cols, idx.astype(np.uint16), w[:, idx].astype(np.float16), q, scales16)
    m.validate()
    return m


def reconstruct(mixed: MixedMatrix) -> np.ndarray:
    mixed.validate()
    out = np.empty((mixed.rows, mixed.cols), dtype=np.float32)
    normal = mixed.normal.dequantize()
    if mixed.trick_scales is not None:
        normal = normal / mixed.trick_scales.astype(np.float32)
    idx = mixed.cherry_indices.astype(np.int64)
    out[:, normal_columns(mixed.cols, idx)] = normal
    out[:, idx] = mixed.cherry_values.astype(np.float32)
    return out
