"""Binary checkpoint format (little-endian throughout).

::

    "CHRQ" | u16 version | u32 header_len | header (UTF-8 JSON, sorted keys)
    u32 n_sections | section * n_sections
    u32 CRC-32 of every preceding byte

    section := u16 name_len | name | u8 kind | u8 ndim | u32 * ndim shape | payload
      kind 0 (raw):   f32 * prod(shape)
      kind 1 (mixed): u8 bits | u32 group_size | u8 flags (1 = asymmetric, 2 = column scales)
                      u32 n_cherry | u16 * n_cherry indices | f16 * rows*n_cherry cherry values
                      u32 groups_per_row | f16 * rows*groups scales | [f16 * rows*groups zero points]
                      u32 n_bytes | packed codes | [f16 * n_normal column scales]

The header holds the model config, the quant config (``null`` for a
full-precision checkpoint) and the run manifest.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .cherry import MixedMatrix, reconstruct
from .errors import ConfigMismatchError, CorruptCheckpointError
from .model import ModelConfig, ToyLM
from .quant import GroupedQuant, PackedBlob, QuantConfig, pack_codes, packed_length, unpack_codes

MAGIC = b"CHRQ"
VERSION = 1
KIND_RAW, KIND_MIXED = 0, 1
FLAG_ASYM, FLAG_TRICK = 1, 2


@dataclass
class Checkpoint:
    model_config: ModelConfig
    quant_config: QuantConfig | None = None
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    mixed: dict[str, MixedMatrix] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ToyLM, mixed: dict[str, MixedMatrix] | None = None,
                   quant_config: QuantConfig | None = None, manifest: dict | None = None) -> "Checkpoint":
        mixed = dict(mixed or {})
        tensors = {n: t.data.astype(np.float32) for n, t in model.params.items() if n not in mixed}
        return cls(model.config, quant_config, tensors, mixed, dict(manifest or {}))

    def names(self) -> list[str]:
        order = list(ToyLM(self.model_config).params)
        return [n for n in order if n in self.tensors or n in self.mixed]

    def weights(self) -> dict[str, np.ndarray]:
        """Dense float32 weights; mixed matrices are reconstructed."""
        out = {n: t for n, t in self.tensors.items()}
        out.update({n: reconstruct(m) for n, m in self.mixed.items()})
        return out

    def to_model(self) -> ToyLM:
        model = ToyLM(self.model_config)
        model.load_state_dict(self.weights())
        return model


def _header(ckpt: Checkpoint) -> bytes:
    head = {"model": ckpt.model_config.to_dict(),
            "quant": ckpt.quant_config.to_dict() if ckpt.quant_config else None,
            "manifest": ckpt.manifest}
    return json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _f16(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f2").tobytes()


def serialize(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    header = _header(ckpt)
    parts += [struct.pack("<I", len(header)), header]
    names = ckpt.names()
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw_name)), raw_name]
        if name in ckpt.mixed:
            m = ckpt.mixed[name]
            m.validate()
            q = m.normal
            parts.append(struct.pack("<BB2I", KIND_MIXED, 2, m.rows, m.cols))
            flags = (0 if q.symmetric else FLAG_ASYM) | (FLAG_TRICK if m.trick_scales is not None else 0)
            parts.append(struct.pack("<BIB", q.k, q.group_size, flags))
            parts += [struct.pack("<I", m.cherry_indices.size),
                      np.ascontiguousarray(m.cherry_indices, dtype="<u2").tobytes(),
                      _f16(m.cherry_values)]
            groups = q.scales.shape[1]
            parts += [struct.pack("<I", groups), _f16(q.scales)]
            if not q.symmetric:
                parts.append(_f16(q.zero_points))
            blob = pack_codes(q.codes, q.k, signed=q.symmetric)
            parts += [struct.pack("<I", len(blob.data)), blob.data]
            if m.trick_scales is not None:
                parts.append(_f16(m.trick_scales))
        else:
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
            parts.append(struct.pack("<BB", KIND_RAW, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0
        self.section = "header"

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"unexpected end of data in section {self.section!r}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int, shape=None) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        a = np.frombuffer(self.take(size * count), dtype=dtype).copy()
        return a.reshape(shape) if shape is not None else a


def deserialize(buf: bytes, expect_model: ModelConfig | None = None) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic bytes in section 'header': not a CHRQ checkpoint")
    if len(buf) < 10:
        raise CorruptCheckpointError("checksum mismatch: file truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checksum mismatch: file truncated or corrupted")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version} in section 'header'")
    (hlen,) = r.unpack("<I")
    try:
        head = json.loads(r.take(hlen).decode("utf-8"))
        model_config = ModelConfig.from_dict(head["model"])
        quant_config = QuantConfig.from_dict(head["quant"]) if head["quant"] else None
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"malformed header: {exc}") from exc
    if expect_model is not None and expect_model != model_config:
        raise ConfigMismatchError(f"checkpoint model config {model_config} does not match expected {expect_model}")
    ckpt = Checkpoint(model_config, quant_config, manifest=head.get("manifest", {}))
    expected_shapes = {n: t.shape for n, t in ToyLM(model_config).params.items()}
    (n_sections,) = r.unpack("<I")
    for _ in range(n_sections):
        r.section = "section table"
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        r.section = name
        kind, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        if name not in expected_shapes:
            raise CorruptCheckpointError(f"unknown section {name!r}")
        if tuple(shape) != expected_shapes[name]:
            raise ConfigMismatchError(f"section {name!r} has shape {shape}, model expects {expected_shapes[name]}")
        if kind == KIND_RAW:
            ckpt.tensors[name] = r.array("<f4", int(np.prod(shape)), shape).astype(np.float32)
        elif kind == KIND_MIXED:
            ckpt.mixed[name] = _read_mixed(r, name, shape)
        else:
            raise CorruptCheckpointError(f"unknown section kind {kind} in section {name!r}")
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after last section")
    return ckpt


def _read_mixed(r: _Reader, name: str, shape) -> MixedMatrix:
    if len(shape) != 2:
        raise CorruptCheckpointError(f"mixed section {name!r} must be 2-D")
    rows, cols = shape
    k, group_size, flags = r.unpack("<BIB")
    if k not in (2, 3, 4) or group_size < 1:
        raise CorruptCheckpointError(f"bad quantization parameters in section {name!r}")
    (n_cherry,) = r.unpack("<I")
    if n_cherry >= cols:
        raise CorruptCheckpointError(f"too many cherry columns in section {name!r}")
    idx = r.array("<u2", n_cherry).astype(np.uint16)
    if n_cherry and (np.any(np.diff(idx.astype(np.int64)) <= 0) or int(idx[-1]) >= cols):
        raise CorruptCheckpointError(f"cherry index out of bounds in section {name!r}")
    cherry = r.array("<f2", rows * n_cherry, (rows, n_cherry)).astype(np.float16)
    n_normal = cols - n_cherry
    (groups,) = r.unpack("<I")
    if groups != -(-n_normal // group_size):
        raise CorruptCheckpointError(f"group count inconsistent in section {name!r}")
    scales = r.array("<f2", rows * groups, (rows, groups)).astype(np.float16)
    zeros = r.array("<f2", rows * groups, (rows, groups)).astype(np.float16) if flags & FLAG_ASYM else None
    (nbytes,) = r.unpack("<I")
    count = rows * n_normal
    if nbytes != packed_length(count, k):
        raise CorruptCheckpointError(f"packed code length inconsistent in section {name!r}")
    blob = PackedBlob(r.take(nbytes), k, count, signed=not flags & FLAG_ASYM)
    codes = unpack_codes(blob).reshape(rows, n_normal)
    trick = r.array("<f2", n_normal).astype(np.float16) if flags & FLAG_TRICK else None
    q = GroupedQuant(codes, scales, k, group_size, (rows, n_normal), zeros)
    return MixedMatrix(rows, cols, idx, cherry, q, trick)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = serialize(ckpt)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expect_model: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return deserialize(fh.read(), expect_model)
