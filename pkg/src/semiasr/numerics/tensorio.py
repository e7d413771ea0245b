"""Binary tensor files.

Layout: ``b"MPET"``, u8 version, u8 dtype (0=f32, 1=f64), u8 rank,
rank little-endian u64 dims, then the row-major little-endian payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"MPET"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    if arr.ndim > 255:
        raise TensorFormatError(f"rank {arr.ndim} too large")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic; not an MPET tensor")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    off = 7
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - off != count * dt.itemsize:
        raise TensorFormatError(f"payload size {len(buf) - off} does not match shape {dims}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def save_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
