"""Flat binary container for named arrays (checkpoints and sample caches).

Layout (all integers little-endian):

    magic   4 bytes  b"GMS1"
    version 1 byte   0x01
    count   uint32   number of records
    record:
        name_len uint16, name utf-8 bytes
        dtype    uint8  (0 = float32, 1 = float64)
        ndim     uint8
        dims     ndim * uint32
        values   raw little-endian floats, C order

Records keep their write order, so loading preserves the parameter-store
iteration order.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GMS1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerError(ValueError):
    """Malformed or unsupported container file."""


def save_arrays(path, arrays: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                arr = arr.astype(np.float64)
            code = _CODES[arr.dtype]
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def load_arrays(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version = blob[4]
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    (count,) = struct.unpack_from("<I", blob, 5)
    off = 9
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        if code not in _DTYPES:
            raise ContainerError(f"{path}: unknown dtype code {code} for record {name!r}")
        dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(dims).copy()
        off += n * dt.itemsize
        out[name] = arr
    return out


def save_params(store, path):
    save_arrays(path, store.state_dict())


def load_params(store, path):
    store.load_state_dict(load_arrays(path))
