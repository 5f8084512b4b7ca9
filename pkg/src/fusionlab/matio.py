"""Matrix serialization.

Binary format ("FLAB"): magic b"FLAB", u32 rows, u32 cols (little-endian),
then rows*cols float64 values in row-major order. Records can be
concatenated back to back in one file.

CSV is written at full float64 precision (%.17g) so a round trip is exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"FLAB"
_HEADER = struct.Struct("<4sII")


def as_matrix(x, name="matrix"):
    """Coerce to a 2-D float64 C-contiguous array with finite entries."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must be non-empty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name} contains non-finite entries")
    return a


def write_matrix(fh, a):
    a = as_matrix(a)
    fh.write(_HEADER.pack(MAGIC, a.shape[0], a.shape[1]))
    fh.write(a.astype("<f8").tobytes())


def read_matrix(fh):
    """Read one record; returns None at a clean end of file."""
    offset = fh.tell()
    head = fh.read(_HEADER.size)
    if len(head) == 0:
        return None
    if len(head) < _HEADER.size:
        raise FormatError(f"truncated header at byte {offset}")
    magic, rows, cols = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte {offset}")
    payload = fh.read(rows * cols * 8)
    if len(payload) < rows * cols * 8:
        raise FormatError(f"truncated payload at byte {offset + _HEADER.size}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def save_matrix(path, a):
    with open(path, "wb") as fh:
        write_matrix(fh, a)


def load_matrix(path):
    with open(path, "rb") as fh:
        a = read_matrix(fh)
    if a is None:
        raise FormatError(f"{path}: empty file")
    return a


def save_matrices(path, mats):
    with open(path, "wb") as fh:
        for a in mats:
            write_matrix(fh, a)


def load_matrices(path):
    out = []
    with open(path, "rb") as fh:
        while True:
            a = read_matrix(fh)
            if a is None:
                return out
            out.append(a)


def save_csv(path, a):
    a = as_matrix(a)
    with open(path, "w") as fh:
        for row in a:
            fh.write(",".join("%.17g" % v for v in row))
            fh.write("\n")


def load_csv(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise FormatError(f"{path}: ragged rows")
    return np.array(rows, dtype=np.float64)


def save_entries_csv(path, layers_and_matrices):
    """Sparse-style dump: one `layer,i,j,value` line per entry."""
    with open(path, "w") as fh:
        fh.write("layer,i,j,value\n")
        for layer, a in layers_and_matrices:
            a = as_matrix(a)
            for i in range(a.shape[0]):
                for j in range(a.shape[1]):
                    fh.write("%d,%d,%d,%.17g\n" % (layer, i, j, a[i, j]))


def load_entries_csv(path):
    """Inverse of save_entries_csv; returns {layer: matrix}."""
    cells = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "layer,i,j,value":
            raise FormatError(f"{path}: unexpected header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            layer_s, i_s, j_s, v_s = line.split(",")
            cells.setdefault(int(layer_s), []).append((int(i_s), int(j_s), float(v_s)))
    out = {}
    for layer, entries in cells.items():
        rows = max(i for i, _, _ in entries) + 1
        cols = max(j for _, j, _ in entries) + 1
        a = np.zeros((rows, cols))
        for i, j, v in entries:
            a[i, j] = v
        out[layer] = a
    return out
