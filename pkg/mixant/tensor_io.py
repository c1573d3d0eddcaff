"""
MXT0 tensor files: 8-byte magic, u64 little-endian header length, UTF-8 JSON header
{"shape": [...], "dtype": "f32" | "f64"}, then the raw little-endian row-major data.
"""
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from mixant.errors import TensorFormatError

MAGIC = b"MXT0\x00\x00\x00\x00"
_LENGTH = struct.Struct("<Q")
_WIRE_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.float32:
        tag = "f32"
    elif array.dtype == np.float64:
        tag = "f64"
    else:
        raise TensorFormatError(f"only f32/f64 tensors can be stored, got {array.dtype}")
    header = json.dumps({"shape": list(array.shape), "dtype": tag}, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(array, dtype=_WIRE_DTYPES[tag]).tobytes(order="C")
    return MAGIC + _LENGTH.pack(len(header)) + header + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < len(MAGIC) + _LENGTH.size or blob[: len(MAGIC)] != MAGIC:
        raise TensorFormatError("missing MXT0 magic")
    offset = len(MAGIC)
    (header_len,) = _LENGTH.unpack_from(blob, offset)
    offset += _LENGTH.size
    try:
        header = json.loads(blob[offset: offset + header_len].decode("utf-8"))
        shape = tuple(int(n) for n in header["shape"])
        wire = _WIRE_DTYPES[header["dtype"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise TensorFormatError(f"bad MXT0 header: {e}") from e
    offset += header_len
    expected = int(np.prod(shape, dtype=np.int64)) * wire.itemsize
    if len(blob) - offset != expected:
        raise TensorFormatError(f"payload holds {len(blob) - offset} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype=wire, offset=offset).reshape(shape).astype(wire.newbyteorder("="))


def save_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
