"""Named-tensor binary files used for checkpoints and representation stores.

Layout (little-endian):
    magic[4] | version u8 | meta_len u32 | meta JSON | count u32 |
    count x (name_len u16 | name | dtype u8 | ndim u8 | dims u32*ndim | data) |
    sha256 of everything before it [32]

dtype codes: 0 = float32, 1 = int64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1}


class TensorFileError(ValueError):
    """Structured failure while reading a tensor file."""


class CorruptFile(TensorFileError):
    pass


class VersionMismatch(TensorFileError):
    pass


def write_tensors(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    out = bytearray()
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out += magic + struct.pack("<BI", FORMAT_VERSION, len(meta_blob)) + meta_blob
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
        elif arr.dtype.kind in "iu":
            arr = arr.astype("<i8")
        else:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        key = name.encode()
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<BB", _CODES[arr.dtype.newbyteorder("=")], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    out += hashlib.sha256(out).digest()
    Path(path).write_bytes(bytes(out))


def read_tensors(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 5 + 4 + 32:
        raise CorruptFile(f"{path}: file truncated")
    body, digest = raw[:-32], raw[-32:]
    if raw[:4] != magic:
        raise CorruptFile(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    version, meta_len = struct.unpack_from("<BI", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile(f"{path}: checksum mismatch (truncated or modified)")
    try:
        pos = 9
        meta = json.loads(body[pos : pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(body):
                raise CorruptFile(f"{path}: entry {name!r} runs past end of file")
            arrays[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: malformed entry table ({exc})") from None
    if pos != len(body):
        raise CorruptFile(f"{path}: {len(body) - pos} trailing bytes")
    return meta, arrays
