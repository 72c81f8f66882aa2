"""Seeded synthetic datasets and CSV ingestion."""

from __future__ import annotations

import csv
import math
from importlib import resources

import numpy as np

from .errors import DataFormatError, InvalidArgumentError


def make_banana(n: int = 400, seed: int = 0, noise: float = 0.25):
    """Two interleaved crescents in 2D with 0/1 labels, shuffled."""
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, math.pi, n0)
    t1 = rng.uniform(0.0, math.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    X = np.concatenate([upper, lower]) + noise * rng.normal(size=(n, 2))
    y = np.concatenate([np.zeros(n0), np.ones(n1)])
    perm = rng.permutation(n)
    return X[perm], y[perm]


def bundled_banana():
    """The banana CSV shipped with the package as ``(X, y)``."""
    path = resources.files("vish") / "data" / "banana.csv"
    with resources.as_file(path) as p:
        table = read_csv(p)
    return table.features(["x1", "x2"]), table.column("label")


class Table:
    """Numeric CSV contents: column names plus an N x C float array."""

    def __init__(self, header, values):
        self.header = list(header)
        self.values = values

    def __len__(self):
        return self.values.shape[0]

    def column(self, name) -> np.ndarray:
        if name not in self.header:
            raise InvalidArgumentError(f"column {name!r} not found; have {self.header}")
        return self.values[:, self.header.index(name)]

    def features(self, names) -> np.ndarray:
        return np.stack([self.column(n) for n in names], axis=1) if names else np.zeros((len(self), 0))


def read_csv(path) -> Table:
    """Parse a header-first, comma-separated numeric file; errors cite line numbers."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError("missing header row", 1) from None
        if not header or any(not h for h in header):
            raise DataFormatError("empty column name in header", 1)
        if len(set(header)) != len(header):
            raise DataFormatError("duplicate column names", 1)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", line)
            try:
                values = [float(c) for c in row]
            except ValueError as exc:
                raise DataFormatError(f"non-numeric field ({exc})", line) from None
            if not all(math.isfinite(v) for v in values):
                raise DataFormatError("non-finite value", line)
            rows.append(values)
    values = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return Table(header, values)


def write_csv(path, header, columns):
    columns = [np.asarray(c).reshape(-1) for c in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
