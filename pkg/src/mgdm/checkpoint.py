"""Flat binary tensor archive with an embedded JSON config record.

Layout (all integers little-endian):
    magic "MGDM" | u32 version | u64 config-length | config JSON bytes |
    u64 tensor count | records...
Each record: u16 name-length | name bytes (utf-8) | u8 dtype tag
(0 = float64, 1 = float32) | u8 rank | rank x u64 extents | raw payload.

Round-trips are bit-exact for float64 tensors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MGDM"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += struct.pack("<Q", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<Q", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        name_b = name.encode("utf-8")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<BB", _TAGS[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
        blob += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(blob))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (cfg_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    config = json.loads(raw[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<Q", raw, off)
    off += 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        tag, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
        shape = struct.unpack_from(f"<{rank}Q", raw, off) if rank else ()
        off += 8 * rank
        dtype = _DTYPES[tag]
        n_elems = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = n_elems * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=n_elems, offset=off).reshape(shape)
        off += nbytes
        tensors[name] = arr.astype(np.float64) if tag == 1 else arr.copy()
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return tensors, config
