"""Named-matrix container: a deterministic binary format for checkpoints.

Layout (all integers little-endian, no padding):

    magic   4 bytes  b"NMC1"
    u32     number of metadata entries
    per entry: u16 key length, key utf-8, u32 value length, value utf-8
    u32     number of matrices
    per matrix: u16 name length, name utf-8, u32 rows, u32 cols,
                rows*cols float64 little-endian in row-major order

Entries are written in sorted key/name order so identical contents yield
identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"NMC1"


class ContainerError(ValueError):
    pass


def write_container(path, matrices: dict, meta: dict | None = None) -> None:
    meta = meta or {}
    chunks = [MAGIC, struct.pack("<I", len(meta))]
    for key in sorted(meta):
        kb = key.encode("utf-8")
        vb = str(meta[key]).encode("utf-8")
        chunks.append(struct.pack("<H", len(kb)) + kb)
        chunks.append(struct.pack("<I", len(vb)) + vb)
    chunks.append(struct.pack("<I", len(matrices)))
    for name in sorted(matrices):
        matrix = np.ascontiguousarray(matrices[name], dtype=np.float64)
        if matrix.ndim != 2:
            raise ContainerError(f"{name!r} is not a matrix (ndim={matrix.ndim})")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<II", matrix.shape[0], matrix.shape[1]))
        chunks.append(matrix.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_container(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: not a named-matrix container")
    offset = 4

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    def take_str(length):
        nonlocal offset
        out = blob[offset:offset + length].decode("utf-8")
        offset += length
        return out

    meta = {}
    (n_meta,) = take("<I")
    for _ in range(n_meta):
        (klen,) = take("<H")
        key = take_str(klen)
        (vlen,) = take("<I")
        meta[key] = take_str(vlen)

    matrices = {}
    (n_matrices,) = take("<I")
    for _ in range(n_matrices):
        (nlen,) = take("<H")
        name = take_str(nlen)
        rows, cols = take("<II")
        count = rows * cols
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        matrices[name] = data.reshape(rows, cols).astype(np.float64)
    return matrices, meta
