"""Small versioned binary container for named arrays.

Used for model checkpoints, hierarchy caches and spiral sidecars. Layout::

    magic (8 bytes) | version u32 | n_records u32
    per record: name_len u16 | name utf8 | kind u8 ('f','i','u') |
                itemsize u8 | ndim u8 | shape i64*ndim | raw little-endian data

Everything is little-endian so files are byte-identical across platforms.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import ParseError

_KINDS = {"f": {8: "<f8", 4: "<f4"}, "i": {8: "<i8", 4: "<i4"}, "u": {1: "u1", 8: "<u8"}}


def _as_le(arr: np.ndarray) -> np.ndarray:
    kind = arr.dtype.kind
    if kind == "b":
        arr = arr.astype("u1")
        kind = "u"
    if kind not in _KINDS or arr.dtype.itemsize not in _KINDS[kind]:
        raise TypeError(f"unsupported dtype {arr.dtype} for record storage")
    return np.ascontiguousarray(arr, dtype=_KINDS[kind][arr.dtype.itemsize])


def write_records(
    path: str | Path, magic: bytes, version: int, records: Iterable[tuple[str, np.ndarray]]
) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", version, len(records)))
        for name, arr in records:
            _write_one(fh, name, np.asarray(arr))


def _write_one(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    data = _as_le(arr)
    raw_name = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw_name)))
    fh.write(raw_name)
    fh.write(struct.pack("<cBB", data.dtype.kind.encode(), data.dtype.itemsize, data.ndim))
    fh.write(struct.pack(f"<{data.ndim}q", *data.shape))
    fh.write(data.tobytes(order="C"))


def read_records(path: str | Path, magic: bytes) -> tuple[int, list[tuple[str, np.ndarray]]]:
    """Return ``(version, [(name, array), ...])`` in file order."""
    buf = Path(path).read_bytes()
    if buf[:8] != magic:
        raise ParseError(f"{path}: bad magic {buf[:8]!r}, expected {magic!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        off = 16
        out = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            kind, itemsize, ndim = struct.unpack_from("<cBB", buf, off)
            off += 3
            shape = struct.unpack_from(f"<{ndim}q", buf, off)
            off += 8 * ndim
            dtype = np.dtype(_KINDS[kind.decode()][itemsize])
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            nbytes = n * dtype.itemsize
            if off + nbytes > len(buf):
                raise ParseError(f"{path}: truncated record {name!r}")
            arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).reshape(shape).copy()
            off += nbytes
            out.append((name, arr))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: corrupt record file ({exc})") from exc
    return version, out
