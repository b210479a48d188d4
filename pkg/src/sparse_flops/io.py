"""Binary file formats. All integers and floats are little-endian.

Index file (``.spfx``)::

    magic      4 bytes  b"SPFX"
    version    u32      1
    n          u64      number of database rows
    d          u64      number of dimensions
    lengths    d x u64  posting-list length per column
    postings   per column, ``lengths[j]`` packed records (u32 row_id, f32 value)

Embedding file (``.spfe``)::

    magic      4 bytes  b"SPFE"
    version    u32      1
    n          u64
    d          u64
    values     n x d f32, row-major (sparsity is carried by exact zeros)

Values are stored as f32. An index whose values are f32-representable
round-trips bit-exactly; wider values are rounded once on save.

Writes go to a temporary file in the target directory followed by a rename.
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .sparse_core import InvertedIndex, csc_row_norms

INDEX_MAGIC = b"SPFX"
EMBED_MAGIC = b"SPFE"
VERSION = 1

_HEADER = struct.Struct("<4sIQQ")
_POSTING = np.dtype([("row", "<u4"), ("value", "<f4")])


class FormatError(ValueError):
    """A file that does not follow the documented binary layout."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def _read_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes")
    got, version, n, d = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    return n, d, _HEADER.size


def index_to_bytes(index: InvertedIndex) -> bytes:
    if index.num_rows >= 2**32:
        raise FormatError("row ids do not fit in u32")
    rec = np.empty(index.nnz, dtype=_POSTING)
    rec["row"] = index.row_ids
    with np.errstate(over="ignore"):
        rec["value"] = index.values
    if np.any(rec["value"] == 0) or not np.all(np.isfinite(rec["value"])):
        raise FormatError("posting values underflow or overflow f32")
    lengths = index.posting_lengths().astype("<u8")
    return _HEADER.pack(INDEX_MAGIC, VERSION, index.num_rows, index.dim) + lengths.tobytes() + rec.tobytes()


def index_from_bytes(buf: bytes) -> InvertedIndex:
    n, d, off = _read_header(buf, INDEX_MAGIC)
    if d < 1:
        raise FormatError("index has zero dimensions")
    need = off + 8 * d
    if len(buf) < need:
        raise FormatError("truncated posting-length table")
    lengths = np.frombuffer(buf, dtype="<u8", count=d, offset=off).astype(np.int64)
    total = int(lengths.sum())
    if len(buf) != need + total * _POSTING.itemsize:
        raise FormatError(f"expected {need + total * _POSTING.itemsize} bytes, found {len(buf)}")
    rec = np.frombuffer(buf, dtype=_POSTING, count=total, offset=need)
    row_ids = rec["row"].astype(np.int64)
    values = rec["value"].astype(np.float64)
    col_ptr = np.zeros(d + 1, dtype=np.int64)
    np.cumsum(lengths, out=col_ptr[1:])
    if total and row_ids.max() >= n:
        raise FormatError("row id out of range")
    for j in range(d):
        if np.any(np.diff(row_ids[col_ptr[j] : col_ptr[j + 1]]) <= 0):
            raise FormatError(f"posting list {j} is not strictly ascending")
    if np.any(values == 0) or not np.all(np.isfinite(values)):
        raise FormatError("posting values must be finite and non-zero")
    return InvertedIndex(d, n, col_ptr, row_ids, values, csc_row_norms(row_ids, values, n))


def save_index(path, index: InvertedIndex) -> None:
    atomic_write(path, index_to_bytes(index))


def load_index(path) -> InvertedIndex:
    return index_from_bytes(Path(path).read_bytes())


def embeddings_to_bytes(matrix) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"embeddings must be 2-d, got shape {m.shape}")
    n, d = m.shape
    return _HEADER.pack(EMBED_MAGIC, VERSION, n, d) + np.ascontiguousarray(m, dtype="<f4").tobytes()


def embeddings_from_bytes(buf: bytes) -> np.ndarray:
    n, d, off = _read_header(buf, EMBED_MAGIC)
    if len(buf) != off + 4 * n * d:
        raise FormatError(f"expected {off + 4 * n * d} bytes, found {len(buf)}")
    m = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    if not np.all(np.isfinite(m)):
        raise FormatError("embeddings contain non-finite values")
    return m.astype(np.float64)


def save_embeddings(path, matrix) -> None:
    atomic_write(path, embeddings_to_bytes(matrix))


def load_embeddings(path) -> np.ndarray:
    return embeddings_from_bytes(Path(path).read_bytes())


def write_csv(path, header, rows) -> None:
    """Write a CSV atomically; floats use ``repr`` so files are reproducible."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    atomic_write_text(path, buf.getvalue())
