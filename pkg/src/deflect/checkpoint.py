"""DFLT checkpoint files.

Layout (little-endian)::

    b"DFLT" | u32 version | u32 config_len | config (UTF-8 JSON) | u32 count
    count x ( u16 name_len | name | u8 precision | u8 ndim | u32 dims[ndim] | raw data )
    u64 checksum  (blake2b-64 of every preceding byte)
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from deflect.data import FormatError, atomic_write
from deflect.tensor import Tensor

MAGIC = b"DFLT"
VERSION = 1
_PRECISION = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class IntegrityError(ValueError):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode_checkpoint(params: Mapping[str, Tensor | np.ndarray], config: Mapping | None = None) -> bytes:
    cfg = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        if arr.dtype not in _TAG:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAG[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_PRECISION[_TAG[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 20:
        raise FormatError(f"checkpoint too short: {len(buf)} bytes", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    body, stored = buf[:-8], buf[-8:]
    if _checksum(body) != stored:
        raise IntegrityError("checkpoint checksum mismatch")
    version, cfg_len = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise FormatError(f"unknown checkpoint version {version}", 4)
    off = 12
    config = json.loads(body[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    params = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + n].decode("utf-8")
            off += n
            tag, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            dt = _PRECISION[tag]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(body):
                raise FormatError(f"tensor {name!r} truncated: need {size} bytes", off)
            params[name] = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).astype(dt.newbyteorder("="))
            off += size
    except (struct.error, KeyError) as exc:
        raise FormatError(f"malformed tensor record: {exc}", off) from exc
    if off != len(body):
        raise FormatError(f"{len(body) - off} trailing bytes", off)
    return params, config


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], config: Mapping | None = None) -> int:
    payload = encode_checkpoint(params, config)
    atomic_write(path, payload)
    return len(payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())
