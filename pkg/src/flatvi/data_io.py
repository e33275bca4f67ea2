"""CSV readers and writers for count matrices, latent tables and plain numeric matrices.

Floats are written with ``repr`` (shortest round-trip form), so identical
arrays always produce identical bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataValidationError

COUNT_META = ("cell_id", "t_index", "label")
LATENT_META = ("cell_id", "t_index")


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_rows(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def _read_table(path) -> tuple[list[str], list[list[str]]]:
    try:
        with Path(path).open(encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataValidationError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataValidationError(f"{path} is not UTF-8") from exc
    if not rows:
        raise DataValidationError(f"{path} is empty")
    header, body = rows[0], [r for r in rows[1:] if r]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataValidationError(f"{path}:{i}: expected {len(header)} fields, got {len(r)}")
    return header, body


def _int(value: str, where: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise DataValidationError(f"{where}: {value!r} is not an integer") from None


def _float(value: str, where: str) -> float:
    try:
        out = float(value)
    except ValueError:
        raise DataValidationError(f"{where}: {value!r} is not a number") from None
    if not np.isfinite(out):
        raise DataValidationError(f"{where}: non-finite value {value!r}")
    return out


@dataclass
class CountTable:
    cell_id: list[str]
    t_index: np.ndarray  # int, -1 when untimed
    label: list[str]
    genes: list[str]
    X: np.ndarray        # (n, G) int64


def read_counts(path) -> CountTable:
    """Parse and validate a ``cell_id,t_index,label,g0,...`` count CSV."""
    header, body = _read_table(path)
    if tuple(header[:3]) != COUNT_META or len(header) < 4:
        raise DataValidationError(f"{path}: header must start with cell_id,t_index,label and name >= 1 gene")
    if not body:
        raise DataValidationError(f"{path}: no cells")
    genes = header[3:]
    X = np.empty((len(body), len(genes)), dtype=np.int64)
    t_index = np.empty(len(body), dtype=np.int64)
    for i, r in enumerate(body):
        where = f"{path}:{i + 2}"
        t_index[i] = _int(r[1], where)
        for j, v in enumerate(r[3:]):
            c = _int(v, where)
            if c < 0:
                raise DataValidationError(f"{where}: negative count {c}")
            X[i, j] = c
    empty = np.flatnonzero(X.sum(axis=1) == 0)
    if empty.size:
        raise DataValidationError(f"{path}: cell {body[empty[0]][0]!r} has no counts")
    if len(set(r[0] for r in body)) != len(body):
        raise DataValidationError(f"{path}: duplicate cell ids")
    return CountTable([r[0] for r in body], t_index, [r[2] for r in body], genes, X)


def write_counts(path, X, labels=None, t_index=None, cell_ids=None) -> Path:
    X = np.asarray(X)
    n, g = X.shape
    cell_ids = cell_ids if cell_ids is not None else [f"c{i}" for i in range(n)]
    t_index = t_index if t_index is not None else np.full(n, -1)
    labels = labels if labels is not None else [""] * n
    header = [*COUNT_META, *(f"g{j}" for j in range(g))]
    rows = ([cell_ids[i], int(t_index[i]), labels[i], *X[i].tolist()] for i in range(n))
    return write_rows(path, header, rows)


@dataclass
class LatentTable:
    cell_id: list[str]
    t_index: np.ndarray
    z: np.ndarray      # (n, d)
    log_l: np.ndarray  # (n,)

    @property
    def states(self) -> np.ndarray:
        return np.column_stack([self.z, self.log_l])


def write_latents(path, cell_ids, t_index, z, log_l) -> Path:
    z = np.asarray(z, dtype=np.float64)
    header = [*LATENT_META, *(f"z{k}" for k in range(z.shape[1])), "log_l"]
    rows = ([cell_ids[i], int(t_index[i]), *z[i].tolist(), float(log_l[i])] for i in range(z.shape[0]))
    return write_rows(path, header, rows)


def read_latents(path) -> LatentTable:
    header, body = _read_table(path)
    if tuple(header[:2]) != LATENT_META or header[-1] != "log_l" or len(header) < 4:
        raise DataValidationError(f"{path}: header must be cell_id,t_index,z0..,log_l")
    if not body:
        raise DataValidationError(f"{path}: no rows")
    vals = np.array([[_float(v, f"{path}:{i + 2}") for v in r[2:]] for i, r in enumerate(body)])
    t_index = np.array([_int(r[1], f"{path}:{i + 2}") for i, r in enumerate(body)], dtype=np.int64)
    return LatentTable([r[0] for r in body], t_index, vals[:, :-1], vals[:, -1])


def write_matrix(path, m, names: Sequence[str] | None = None) -> Path:
    """Square or rectangular float matrix with an optional header of column names."""
    m = np.asarray(m, dtype=np.float64)
    header = list(names) if names is not None else [f"c{j}" for j in range(m.shape[1])]
    return write_rows(path, header, (row.tolist() for row in m))


def read_matrix(path) -> tuple[list[str], np.ndarray]:
    header, body = _read_table(path)
    if not body:
        raise DataValidationError(f"{path}: no rows")
    vals = np.array([[_float(v, f"{path}:{i + 2}") for v in r] for i, r in enumerate(body)])
    return header, vals
