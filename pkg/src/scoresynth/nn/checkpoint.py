"""Self-describing binary checkpoint format.

Layout (little-endian)::

    b"SSCK"  uint32 version  uint32 len  <config JSON, UTF-8>
    uint32 count
    count × { uint16 len  <name>  uint8 dtype  uint8 ndim  ndim × uint32  <raw data> }

dtype codes: 0 float32, 1 float64, 2 int64.
"""

from __future__ import annotations

import io
import json
import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"SSCK"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def dumps(config: dict, tensors: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(config, sort_keys=True).encode()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, clen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    config = json.loads(data[pos : pos + clen].decode())
    pos += clen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(data):
            raise CheckpointError(f"truncated tensor {name}")
        tensors[name] = np.frombuffer(data[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    return config, tensors


def save(path, config: dict, tensors: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(config, tensors))


def load(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return loads(fh.read())
