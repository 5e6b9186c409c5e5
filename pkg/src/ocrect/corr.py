"""Prior class co-occurrence matrix built from image-level tags."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import FormatError, TagSet, ValidationError


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray  # (C+1, C+1), background at index 0
    num_images: int

    @property
    def num_classes(self) -> int:
        return self.values.shape[0] - 1

    def __getitem__(self, idx):
        return self.values[idx]


def build_correlation(tag_sets: list[TagSet], num_classes: int) -> CorrelationMatrix:
    """Co-occurrence frequencies M[k, l] = #{i : k, l in S_i} / L.

    Background counts as present in every image, so row 0 holds the class
    frequencies and M[0, 0] = 1.
    """
    if not tag_sets:
        raise ValidationError("cannot build a correlation matrix from zero images")
    presence = np.zeros((len(tag_sets), num_classes + 1), dtype=np.int64)
    presence[:, 0] = 1
    for i, ts in enumerate(tag_sets):
        ts.validate(num_classes)
        presence[i, list(ts.tags)] = 1
    counts = presence.T @ presence
    return CorrelationMatrix(counts / len(tag_sets), len(tag_sets))


def normalize_rows(m) -> np.ndarray:
    """Min-max normalize each row to [0, 1]; constant rows become zeros. For reporting only."""
    v = np.asarray(getattr(m, "values", m), dtype=np.float64)
    lo = v.min(axis=1, keepdims=True)
    span = v.max(axis=1, keepdims=True) - lo
    out = np.zeros_like(v)
    np.divide(v - lo, span, out=out, where=span > 0)
    return out


def write_correlation(m: CorrelationMatrix, path) -> None:
    v = np.asarray(m.values, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        fh.write(f"# num_images={m.num_images}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(range(v.shape[0]))
        for row in v:
            w.writerow(repr(float(x)) for x in row)


def read_correlation(path) -> CorrelationMatrix:
    num_images = 0
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if lines and lines[0].startswith("#"):
        head = lines.pop(0)[1:].strip()
        if head.startswith("num_images="):
            try:
                num_images = int(head.split("=", 1)[1])
            except ValueError:
                raise FormatError(f"{path}: bad num_images comment") from None
    rows = list(csv.reader(lines))
    if not rows:
        raise FormatError(f"{path}: empty correlation file")
    header, body = rows[0], rows[1:]
    n = len(header)
    if header != [str(i) for i in range(n)]:
        raise FormatError(f"{path}: header must list class indices 0..{n - 1}")
    if len(body) != n:
        raise FormatError(f"{path}: expected {n} data rows, found {len(body)}")
    values = np.empty((n, n))
    for i, row in enumerate(body):
        if len(row) != n:
            raise FormatError(f"{path}: row {i} has {len(row)} cells, expected {n}")
        try:
            values[i] = [float(x) for x in row]
        except ValueError:
            raise FormatError(f"{path}: non-numeric cell in row {i}") from None
    if not np.isfinite(values).all() or values.min() < 0 or values.max() > 1:
        raise FormatError(f"{path}: entries must be finite and in [0, 1]")
    if not np.allclose(values, values.T, rtol=0, atol=1e-12):
        raise FormatError(f"{path}: matrix is not symmetric")
    return CorrelationMatrix(values, num_images)
