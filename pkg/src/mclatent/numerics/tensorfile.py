"""Binary named-tensor container ("MCLT" records).

Each record is self-delimiting, so files are simply records back to back::

    b"MCLT" | u32 version | u32 name_len | name (utf-8)
    [v2 only: u32 dtype code]
    u32 rank | u64 dims[rank] | little-endian payload

Version 1 always carries float32. Version 2 adds a dtype code so that
float64 checkpoints round-trip bit-exactly and small integer/byte records
(step counters, config text) can live in the same file.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from ..errors import FormatError

MAGIC = b"MCLT"
VERSION_F32 = 1
VERSION_TYPED = 2
SUPPORTED_VERSIONS = (VERSION_F32, VERSION_TYPED)

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}


def _dtype_code(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    for code, dt in _DTYPES.items():
        if (dt.kind, dt.itemsize) == key:
            return code
    raise FormatError(f"unsupported dtype for tensor container: {arr.dtype}")


def write_record(fh: BinaryIO, name: str, arr: np.ndarray, version: int = VERSION_TYPED) -> None:
    arr = np.asarray(arr)
    raw = name.encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<II", version, len(raw)))
    fh.write(raw)
    if version == VERSION_F32:
        payload = np.ascontiguousarray(arr, dtype="<f4")
    elif version == VERSION_TYPED:
        code = _dtype_code(arr)
        fh.write(struct.pack("<I", code))
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code])
    else:
        raise FormatError(f"cannot write tensor record version {version}")
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(payload.tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor file while reading {what} (wanted {n} bytes, got {len(buf)})")
    return buf


def read_records(fh: BinaryIO) -> list[tuple[str, np.ndarray]]:
    out = []
    while True:
        head = fh.read(4)
        if not head:
            return out
        if head != MAGIC:
            if len(head) < 4:
                raise FormatError("truncated tensor file: partial record magic")
            raise FormatError(f"bad record magic {head!r}")
        version, name_len = struct.unpack("<II", _read_exact(fh, 8, "record header"))
        if version not in SUPPORTED_VERSIONS:
            raise FormatError(f"unsupported tensor record version {version} (supported: {SUPPORTED_VERSIONS})")
        name = _read_exact(fh, name_len, "record name").decode("utf-8")
        if version == VERSION_TYPED:
            (code,) = struct.unpack("<I", _read_exact(fh, 4, "dtype code"))
            if code not in _DTYPES:
                raise FormatError(f"record {name!r}: unknown dtype code {code}")
            dt = _DTYPES[code]
        else:
            dt = _DTYPES[0]
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
        dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims")) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        payload = _read_exact(fh, count * dt.itemsize, f"payload of {name!r}")
        out.append((name, np.frombuffer(payload, dtype=dt).reshape(dims).copy()))


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]], version: int = VERSION_TYPED) -> None:
    """Write records atomically (temp file in the same directory, then rename)."""
    items = tensors.items() if isinstance(tensors, Mapping) else tensors
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".mclt-", dir=d)
    try:
        with os.fdopen(fd, "wb") as fh:
            for name, arr in items:
                write_record(fh, name, arr, version)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        recs = read_records(fh)
    out: dict[str, np.ndarray] = {}
    for name, arr in recs:
        if name in out:
            raise FormatError(f"duplicate record name {name!r} in {os.fspath(path)}")
        out[name] = arr
    return out
