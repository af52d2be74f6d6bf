"""
Binary tensor container shared by checkpoints and dataset dumps.

Layout (all integers little-endian):

    magic        4 bytes  b"PVLR"
    version      u32
    header_len   u32, then header_len bytes of UTF-8 JSON
    count        u32
    per tensor:  name_len u16, UTF-8 name, rank u8, rank × u64 dims,
                 prod(dims) × f64 values (row-major)
"""

import json
import logging
import math
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from src.utils.errors import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"PVLR"
FORMAT_VERSION = 1


def encode_tensors(header: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> bytes:
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header_bytes)), header_bytes,
             struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        # 0-d arrays must stay 0-d
        array = np.asarray(array, dtype="<f8")
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF or array.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be encoded (name or rank too long)")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.buffer):
            raise FormatError(f"truncated file while reading {what}", self.offset)
        chunk = self.buffer[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_tensors(buffer: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    reader = _Reader(buffer)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a PVLR tensor file", 0)
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    (header_len,) = reader.unpack("<I", "header length")
    start = reader.offset
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"corrupt JSON header: {e}", start) from None
    (count,) = reader.unpack("<I", "tensor count")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name_at = reader.offset
        try:
            name = reader.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", name_at) from None
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", name_at)
        (rank,) = reader.unpack("<B", "rank")
        dims = reader.unpack(f"<{rank}Q", "dims") if rank else ()
        n = math.prod(int(dim) for dim in dims)
        if 8 * n > len(buffer) - reader.offset:
            raise FormatError(f"tensor {name!r} declares {n} values, more than the remaining bytes hold",
                              reader.offset)
        values = np.frombuffer(reader.take(8 * n, f"values of {name!r}"), dtype="<f8")
        tensors[name] = values.astype(np.float64).reshape(dims)
    if reader.offset != len(buffer):
        raise FormatError("trailing bytes after last tensor", reader.offset)
    return header, tensors


def write_tensor_file(path: Union[str, Path], header: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_tensors(header, tensors)
    with open(path, "wb") as f:
        f.write(payload)
    logger.info(f"Saved {len(tensors)} tensors ({len(payload)} bytes) to {path}")
    return path


def read_tensor_file(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        return decode_tensors(f.read())
