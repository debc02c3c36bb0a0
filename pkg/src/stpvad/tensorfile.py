"""Little-endian raw tensor files and the named-tensor checkpoint container.

Tensor record::

    b"STPV" | u32 version=1 | u32 ndim | u32 dims[ndim] | u8 dtype (1=float32) | payload

Container (version 2)::

    b"STPV" | u32 version=2 | u32 count
    count x (u32 name_len | name utf-8 | u64 offset)
    payload area: concatenated tensor records, offsets relative to its start
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"STPV"
TENSOR_VERSION = 1
CONTAINER_VERSION = 2
DTYPE_FLOAT32 = 1


class TensorFormatError(ValueError):
    pass


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<B", DTYPE_FLOAT32)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor record starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, ndim = struct.unpack_from("<II", buf, offset + 4)
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}")
    pos = offset + 12
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    (dtype,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"unsupported dtype tag {dtype}")
    count = int(np.prod(dims, dtype=np.int64))
    end = pos + 4 * count
    if end > len(buf):
        raise TensorFormatError("truncated payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float32), end


def save_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise TensorFormatError(f"cannot read {path}: {exc}") from exc
    try:
        arr, _ = decode_tensor(buf)
    except (TensorFormatError, struct.error) as exc:
        raise TensorFormatError(f"{path}: {exc}") from exc
    return arr


def save_container(path, tensors: Mapping[str, np.ndarray]) -> None:
    names = list(tensors)
    records = [encode_tensor(tensors[n]) for n in names]
    out = bytearray(MAGIC + struct.pack("<II", CONTAINER_VERSION, len(names)))
    offset = 0
    for name, rec in zip(names, records):
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<Q", offset)
        offset += len(rec)
    for rec in records:
        out += rec
    Path(path).write_bytes(bytes(out))


def load_container(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CONTAINER_VERSION:
        raise TensorFormatError(f"{path}: not a container (version {version})")
    pos = 12
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + n].decode("utf-8")
        (off,) = struct.unpack_from("<Q", buf, pos + 4 + n)
        table.append((name, off))
        pos += 4 + n + 8
    return {name: decode_tensor(buf, pos + off)[0] for name, off in table}
