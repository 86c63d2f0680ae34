"""Tabular datasets: container, CSV round-trip and column standardization."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from djgp.errors import InputError, StorageError


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise InputError(f"{X.shape[0]} input rows but {y.shape[0]} targets")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def fmt(v: float) -> str:
    # repr of a Python float round-trips exactly
    return repr(float(v))


def write_csv(path, data: Dataset) -> None:
    header = [f"x{m + 1}" for m in range(data.dim)] + ["y"]
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row, t in zip(data.X, data.y):
                w.writerow([fmt(v) for v in row] + [fmt(t)])
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_csv(path, require_y: bool = True) -> Dataset:
    """Read an ``x1,...,xD,y`` file.  Without a ``y`` column the targets are NaN."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        has_y = bool(header) and header[-1] == "y"
        if require_y and not has_y:
            raise InputError(f"{path}:1: last column must be 'y'")
        nx = len(header) - (1 if has_y else 0)
        if nx < 1:
            raise InputError(f"{path}:1: no input columns")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise InputError(f"{path}: no data rows")
    arr = np.asarray(rows)
    if has_y:
        return Dataset(arr[:, :nx], arr[:, nx])
    return Dataset(arr, np.full(arr.shape[0], np.nan))


@dataclass(frozen=True)
class Standardizer:
    """Column z-scoring fitted on training inputs; constant columns keep scale 1."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        return cls(X.mean(axis=0), sd)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale
