"""Flat named-tensor container.

Byte layout (all integers little-endian):

    magic    4 bytes   b"NTC1"
    count    uint32    number of tensors
    then, per tensor, in insertion order:
      name_len  uint16
      name      name_len bytes, UTF-8
      dtype     uint8     0 = float64, 1 = float32
      ndim      uint8
      dims      ndim x uint64
      payload   raw little-endian values, C order

The same container stores network parameters, optimizer moments, and
normalizer state inside checkpoints.
"""

from __future__ import annotations

import struct

import numpy as np

_MAGIC = b"NTC1"
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def save_arrays(path, arrays):
    chunks = [_MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise ValueError(f"unsupported dtype for {name}: {arr.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        chunks.append(le.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_arrays(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a named-tensor container (bad magic)")
    try:
        (count,) = struct.unpack("<I", raw[4:8])
        pos = 8
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", raw[pos : pos + 2])
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack("<BB", raw[pos : pos + 2])
            pos += 2
            dims = struct.unpack(f"<{ndim}Q", raw[pos : pos + 8 * ndim])
            pos += 8 * ndim
            dtype = _CODE_DTYPES[code]
            nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64)) if ndim else dtype.itemsize
            payload = raw[pos : pos + nbytes]
            if len(payload) != nbytes:
                raise ValueError("truncated container")
            pos += nbytes
            arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
            out[name] = arr.astype(dtype.newbyteorder("="))
        if pos != len(raw):
            raise ValueError("trailing bytes in container")
    except struct.error as exc:
        raise ValueError("truncated container") from exc
    return out
