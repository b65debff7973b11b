"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"TKHZCKPT"
    version    uint32    currently 1
    header_len uint32
    header     header_len bytes, UTF-8, key-sorted JSON of ArchConfig
    blob       float32 tensors in ``tensor_shapes(arch)`` order, C-contiguous
    checksum   uint64    first 8 bytes of BLAKE2b(blob), little-endian
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

from .config import ArchConfig, ConfigError
from .model import ModelCheckpoint, tensor_shapes

MAGIC = b"TKHZCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ArchMismatchError(CheckpointError):
    pass


def blob_checksum(blob: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    header = ckpt.arch.to_header().encode("utf-8")
    blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in ckpt.params.values())
    return b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(header)),
        header,
        blob,
        struct.pack("<Q", blob_checksum(blob)),
    ])


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def decode_checkpoint(data: bytes, arch: ArchConfig | None = None) -> ModelCheckpoint:
    if len(data) < len(MAGIC) + 8:
        raise TruncatedCheckpointError("file too short for a checkpoint header")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint file")
    version, header_len = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    if len(data) < start + header_len:
        raise TruncatedCheckpointError("checkpoint truncated inside the header")
    try:
        stored = ArchConfig.from_header(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if arch is not None and arch != stored:
        raise ArchMismatchError(f"checkpoint holds {stored}, requested {arch}")

    shapes = tensor_shapes(stored)
    n_floats = sum(int(np.prod(s)) for s in shapes.values())
    blob_start = start + header_len
    blob_end = blob_start + 4 * n_floats
    if len(data) < blob_end + 8:
        raise TruncatedCheckpointError(
            f"checkpoint truncated: expected {blob_end + 8} bytes, got {len(data)}"
        )
    if len(data) > blob_end + 8:
        raise CheckpointError("trailing bytes after checksum")
    blob = data[blob_start:blob_end]
    (checksum,) = struct.unpack_from("<Q", data, blob_end)
    if checksum != blob_checksum(blob):
        raise CheckpointError("checksum mismatch; checkpoint blob is corrupt")

    flat = np.frombuffer(blob, dtype="<f4")
    params, offset = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        params[name] = flat[offset:offset + size].reshape(shape).astype(np.float32)
        offset += size
    return ModelCheckpoint(stored, params)


def load_checkpoint(path: str | os.PathLike, arch: ArchConfig | None = None) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), arch)
