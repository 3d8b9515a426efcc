"""Binary container shared by datasets, embedding files, and checkpoints.

Layout of an array container (all integers little-endian):

====================  =======================================
magic                 4 bytes, ``b"T3AR"``
version               u16, currently 1
n                     u32, number of rows
d                     u32, row width
samples               n*d float32, row-major
ids                   n u64
tags                  n u16
labels                n u32, ``0xFFFFFFFF`` means unlabeled
====================  =======================================

Checkpoints reuse the same magic/version envelope with their own payload
(see :mod:`tadpool.model`).  Readers validate eagerly and raise before
any partially-parsed object escapes; writers go through a temp file and
an atomic rename so a crashed write never leaves a truncated container.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"T3AR"
VERSION = 1
UNLABELED = 0xFFFFFFFF


class Reader:
    """Cursor over an in-memory buffer with hard bounds checking."""

    def __init__(self, data: bytes, origin: str = "container"):
        self.data = data
        self.origin = origin
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"truncated file: {self.origin}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise ValueError(f"trailing data in {self.origin}")


def read_envelope(reader: Reader) -> None:
    """Consume and validate the magic/version header."""
    magic = reader.take(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic in {reader.origin}: {magic!r}")
    version = reader.u16()
    if version != VERSION:
        raise ValueError(f"unsupported container version {version} in {reader.origin}")


def envelope_bytes() -> bytes:
    return MAGIC + struct.pack("<H", VERSION)


def atomic_write(path: str, payload: bytes) -> None:
    """Write the full payload, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".t3ar-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_array_container(
    path: str,
    samples: np.ndarray,
    ids: np.ndarray,
    tags: np.ndarray,
    labels: np.ndarray | None,
) -> None:
    samples = np.ascontiguousarray(samples, dtype="<f4")
    if samples.ndim != 2:
        raise ValueError("samples must be a 2-d array")
    n, d = samples.shape
    ids = np.ascontiguousarray(ids, dtype="<u8")
    tags = np.ascontiguousarray(tags, dtype="<u2")
    if labels is None:
        label_words = np.full(n, UNLABELED, dtype="<u4")
    else:
        labels = np.asarray(labels)
        if np.any(labels < 0) or np.any(labels >= UNLABELED):
            raise ValueError("label out of range for container")
        label_words = np.ascontiguousarray(labels, dtype="<u4")
    if not (len(ids) == len(tags) == len(label_words) == n):
        raise ValueError("ids, tags, and labels must have one entry per sample")

    payload = b"".join(
        [
            envelope_bytes(),
            struct.pack("<II", n, d),
            samples.tobytes(),
            ids.tobytes(),
            tags.tobytes(),
            label_words.tobytes(),
        ]
    )
    atomic_write(path, payload)


def read_array_container(
    path: str,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
    """Read a container; returns (samples, ids, tags, labels-or-None)."""
    with open(path, "rb") as f:
        reader = Reader(f.read(), origin=str(path))
    read_envelope(reader)
    n = reader.u32()
    d = reader.u32()
    samples = reader.array("<f4", n * d).reshape(n, d)
    ids = reader.array("<u8", n)
    tags = reader.array("<u2", n)
    label_words = reader.array("<u4", n)
    reader.expect_end()

    sentinel = label_words == UNLABELED
    if np.all(sentinel):
        labels = None
    elif np.any(sentinel):
        raise ValueError(f"mixed labeled/unlabeled rows in {path}")
    else:
        labels = label_words.astype(np.int64)
    return samples, ids, tags, labels
