"""Reading, writing and normalizing LIBSVM-format datasets."""
from __future__ import annotations

import io
import os
import warnings

import numpy as np


class LibsvmParseError(ValueError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _lines(source):
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, "r", encoding="utf-8") as fh:
            return fh.read().splitlines()
    if isinstance(source, str):
        return source.splitlines()
    return source.read().splitlines()


def parse_libsvm(source, n_features=None):
    """Parse ``label idx:val ...`` lines into a dense matrix and label vector.

    ``source`` may be a path, a string with the contents, or a text stream.
    Feature indices are 1-based and must increase within a line.
    """
    rows, labels = [], []
    width = 0
    for line_no, raw in enumerate(_lines(source), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmParseError(line_no, f"bad label {tokens[0]!r}") from None
        if not np.isfinite(label):
            raise LibsvmParseError(line_no, "non-finite label")
        entries = {}
        last = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise LibsvmParseError(line_no, f"expected index:value, got {tok!r}")
            try:
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise LibsvmParseError(line_no, f"malformed entry {tok!r}") from None
            if idx < 1:
                raise LibsvmParseError(line_no, f"feature index {idx} is not positive")
            if idx <= last:
                raise LibsvmParseError(line_no, f"feature index {idx} not increasing")
            if not np.isfinite(val):
                raise LibsvmParseError(line_no, "non-finite feature value")
            entries[idx] = val
            last = idx
        width = max(width, last)
        rows.append(entries)
        labels.append(label)
    if not rows:
        warnings.warn("empty LIBSVM stream", RuntimeWarning, stacklevel=2)
        return np.zeros((0, 0)), np.zeros(0)
    if n_features is not None:
        if n_features < width:
            raise ValueError(f"n_features={n_features} smaller than largest index {width}")
        width = n_features
    A = np.zeros((len(rows), width))
    for r, entries in enumerate(rows):
        for idx, val in entries.items():
            A[r, idx - 1] = val
    return A, np.asarray(labels, dtype=np.float64)


def _fmt(v):
    v = float(v)
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def serialize_libsvm(A, b) -> str:
    """Inverse of :func:`parse_libsvm` (zeros are omitted)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    if A.size == 0 and b.size == 0:
        return ""
    if A.shape[0] != b.shape[0]:
        raise ValueError("row count mismatch")
    out = io.StringIO()
    for row, label in zip(A, b):
        parts = [_fmt(label)]
        parts += [f"{j + 1}:{_fmt(v)}" for j, v in enumerate(row) if v != 0.0]
        out.write(" ".join(parts) + "\n")
    return out.getvalue()


def normalize_dataset(A, b, classification=True):
    """Scale columns to unit norm and map two-class labels to -1/+1.

    Labels already in {-1, +1} are kept; otherwise the first class seen
    becomes -1 and the other +1. All-zero columns are left untouched.
    """
    A = np.array(A, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    norms = np.linalg.norm(A, axis=0)
    nz = norms > 0
    A[:, nz] /= norms[nz]
    if classification and b.size:
        classes = list(dict.fromkeys(b.tolist()))
        if len(classes) > 2:
            raise ValueError(f"expected two classes, found {len(classes)}")
        if not set(classes) <= {-1.0, 1.0}:
            b = np.where(b == classes[0], -1.0, 1.0)
    return A, b
