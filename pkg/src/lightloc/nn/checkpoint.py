"""Binary checkpoint format with a JSON sidecar.

Layout (all integers little-endian)::

    magic   b"LLCK"
    u16     format version
    u32     tensor count
    per tensor:
        u16 name length, utf-8 name
        u8  ndim, u32 * ndim shape
        f64 * prod(shape) values (C order)
    u32     CRC-32 of every preceding byte

The sidecar ``<path>.json`` carries architecture, calibration and
preprocessing settings.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"LLCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_tensors(blob: bytes) -> dict:
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return out


def checksum(tensors: dict) -> int:
    return zlib.crc32(encode_tensors(tensors))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, tensors: dict, sidecar: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors))
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    tensors = decode_tensors(path.read_bytes())
    meta = json.loads(sidecar_path(path).read_text())
    return tensors, meta
