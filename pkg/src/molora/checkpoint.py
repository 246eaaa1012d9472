"""Adapter-only binary checkpoints.

Layout, all integers little-endian:

    magic             4 bytes  b"MLRA"
    format version    u32
    metadata length   u32, then UTF-8 JSON: model config, train config, seed
    tensor count      u32
    per tensor:       name length u32 + UTF-8 name (dotted path),
                      ndim u32 + dims (u32 each),
                      payload byte offset u64
    payload length    u64
    payload           float32 little-endian, row-major, in table order

Only trainable tensors are stored, each exactly once; offsets tile the
payload with no gaps or overlap. Base weights are never serialized; a
loader reconstructs the frozen base from the recorded config and creation
seed. Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .model import DecoderModel

MAGIC = b"MLRA"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(CheckpointError):
    """Format version is not readable by this code."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint metadata does not match the provided base model."""


class TruncatedPayloadError(CheckpointError):
    """File ends before the declared content."""


class FormatError(CheckpointError):
    """Structurally invalid table or payload tiling."""


def save_checkpoint(model: DecoderModel, path, train_config=None,
                    seed: int = 0) -> None:
    """Write every trainable tensor plus config metadata to ``path``."""
    named = model.named_trainable()
    meta = {
        "model": model.config.to_dict(),
        "train": train_config.to_dict() if train_config is not None else None,
        "seed": seed,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")

    table = bytearray()
    payload = bytearray()
    for name, t in named:
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        name_b = name.encode("utf-8")
        table += struct.pack("<I", len(name_b)) + name_b
        table += struct.pack("<I", t.ndim)
        table += b"".join(struct.pack("<I", d) for d in t.shape)
        table += struct.pack("<Q", len(payload))
        payload += raw

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(meta_bytes)) + meta_bytes
    blob += struct.pack("<I", len(named))
    blob += table
    blob += struct.pack("<Q", len(payload)) + payload

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a checkpoint: (metadata, name -> float32 array)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path} is not an adapter checkpoint")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersionError(
            f"format version {version}, expected {VERSION}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))

    entries = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        offset = r.u64()
        entries.append((name, shape, offset))

    payload_len = r.u64()
    expected = 0
    for name, shape, offset in entries:
        if offset != expected:
            raise FormatError(
                f"tensor {name!r} at offset {offset}, expected {expected}: "
                "offsets must tile the payload")
        expected += 4 * int(np.prod(shape, dtype=np.int64))
    if payload_len != expected:
        raise FormatError(
            f"declared payload {payload_len} bytes, table requires {expected}")
    payload = r.take(payload_len)
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after payload")

    names = [e[0] for e in entries]
    if len(names) != len(set(names)):
        raise FormatError("duplicate tensor names in table")

    tensors = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=offset).reshape(shape)
        tensors[name] = np.ascontiguousarray(arr)
    return meta, tensors


def read_metadata(path) -> dict:
    meta, _ = read_checkpoint(path)
    return meta


def load_checkpoint(path, base_model: DecoderModel) -> DecoderModel:
    """Load adapter tensors into a base model built with a matching config.

    The round trip save -> load onto the same base reproduces forward
    outputs bitwise (float32 models).
    """
    meta, tensors = read_checkpoint(path)
    model_meta = meta.get("model")
    if model_meta != base_model.config.to_dict():
        differing = sorted(
            k for k in set(model_meta or {}) | set(base_model.config.to_dict())
            if (model_meta or {}).get(k) != base_model.config.to_dict().get(k))
        raise ConfigMismatchError(
            f"checkpoint config differs from base model on keys {differing}")
    named = dict(base_model.named_trainable())
    missing = sorted(set(named) - set(tensors))
    extra = sorted(set(tensors) - set(named))
    if missing or extra:
        raise ConfigMismatchError(
            f"tensor table mismatch: missing {missing}, unexpected {extra}")
    for name, arr in tensors.items():
        target = named[name]
        if target.shape != arr.shape:
            raise ConfigMismatchError(
                f"tensor {name!r} has shape {arr.shape}, model expects "
                f"{target.shape}")
        target.data[...] = arr.astype(target.data.dtype)
    return base_model


def payload_nbytes(model: DecoderModel) -> int:
    """Exact payload size: four bytes per trainable parameter."""
    return 4 * model.trainable_param_count()
