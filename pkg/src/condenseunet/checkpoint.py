"""Binary checkpoint container.

Layout (little-endian):

    magic     8 bytes  b"CUNETCKP"
    version   u32
    digest    32 bytes SHA-256 of the canonical config JSON
    meta_len  u32, then meta JSON (UTF-8, sorted keys) holding the config
    n_records u32, then per record:
        name_len u16, name (UTF-8), dtype code u8, ndim u8, dims u32 * ndim, raw payload

Writes go to a temporary file that is renamed over the target.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"CUNETCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(canonical_json(config)).digest()


def _dtype_code(arr: np.ndarray) -> int:
    for code, dt in _DTYPES.items():
        if arr.dtype == dt:
            return code
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def encode(config: dict, meta: dict, arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), config_digest(config)]
    meta_bytes = canonical_json({"config": config, "meta": meta})
    parts += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        name_b = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_b)) + name_b + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(blob: bytes, source: str = "checkpoint") -> tuple:
    try:
        return _decode(blob, source)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: truncated or corrupt ({exc})") from None


def _decode(blob: bytes, source: str) -> tuple:
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not a checkpoint")
    pos = 8
    (version,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    digest = blob[pos:pos + 32]
    pos += 32
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    payload = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    if config_digest(payload["config"]) != digest:
        raise CheckpointError(f"{source}: config digest mismatch")
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = OrderedDict()
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: record {name} has unknown dtype code {code}")
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(blob):
            raise CheckpointError(f"{source}: record {name} truncated")
        arrays[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - pos} trailing bytes")
    return payload["config"], payload["meta"], arrays


def save_checkpoint(path, config: dict, meta: dict, arrays) -> None:
    path = Path(path)
    blob = encode(config, meta, arrays)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    return decode(path.read_bytes(), str(path))
