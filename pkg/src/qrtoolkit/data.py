"""Tabular input, design matrices with fixed effects, and growth series."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, RankDeficiencyError

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
BINARY = "binary"
KINDS = (CONTINUOUS, CATEGORICAL, BINARY)

MISSING_TOKENS = frozenset({"", "NA"})


@dataclass(frozen=True)
class Column:
    """One typed column.

    ``values`` is float64 for continuous, int64 for binary and an object
    array of ``str`` for categorical columns.  Cells flagged in ``missing``
    hold a placeholder (NaN, -1 or ``None``) and must not be read.
    """

    kind: str
    values: np.ndarray
    missing: np.ndarray

    def __len__(self):
        return len(self.values)

    @property
    def n_missing(self) -> int:
        return int(self.missing.sum())


@dataclass(frozen=True)
class Dataset:
    columns: Mapping[str, Column]
    n_rows: int

    def __post_init__(self):
        if self.n_rows < 1:
            raise DataError("dataset has no rows")
        for name, col in self.columns.items():
            if len(col) != self.n_rows:
                raise DataError(
                    f"column {name!r} has {len(col)} rows, expected {self.n_rows}"
                )
            if col.kind not in KINDS:
                raise DataError(f"column {name!r} has unknown kind {col.kind!r}")
            if col.kind == BINARY:
                ok = col.values[~col.missing]
                if not np.isin(ok, (0, 1)).all():
                    raise DataError(f"column {name!r}: non-binary value")

    def __getitem__(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"column {name!r} not found") from None

    def __contains__(self, name) -> bool:
        return name in self.columns

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def numeric(self, name: str) -> np.ndarray:
        """Float view of a continuous or binary column (NaN where missing)."""
        col = self[name]
        if col.kind == CATEGORICAL:
            raise DataError(f"column {name!r} is categorical, not numeric")
        out = col.values.astype(float)
        out[col.missing] = np.nan
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, object], kinds: Mapping[str, str] | None = None):
        """Build a dataset from in-memory vectors.

        Kinds default to continuous for numeric input and categorical for
        anything else.  NaN (numeric) or ``None`` (categorical) mark missing
        cells.
        """
        kinds = dict(kinds or {})
        columns = {}
        n = None
        for name, raw in arrays.items():
            arr = np.asarray(raw)
            kind = kinds.get(name)
            if kind is None:
                kind = CONTINUOUS if arr.dtype.kind in "biuf" else CATEGORICAL
            columns[name] = _column_from_array(name, arr, kind)
            n = len(arr) if n is None else n
        return cls(columns, n if n is not None else 0)


def _column_from_array(name, arr, kind):
    if kind == CATEGORICAL:
        values = np.array([None if v is None else str(v) for v in arr.tolist()], dtype=object)
        missing = np.array([v is None for v in values], dtype=bool)
        return Column(kind, values, missing)
    fl = arr.astype(float)
    missing = np.isnan(fl)
    if kind == BINARY:
        vals = fl[~missing]
        if not np.isin(vals, (0.0, 1.0)).all():
            raise DataError(f"column {name!r}: non-binary value")
        values = np.where(missing, -1, fl).astype(np.int64)
        return Column(kind, values, missing)
    if kind != CONTINUOUS:
        raise DataError(f"column {name!r} has unknown kind {kind!r}")
    return Column(kind, fl, missing)


def _parse_cells(name, cells, kind):
    missing = np.array([c.strip() in MISSING_TOKENS for c in cells], dtype=bool)
    if kind == CATEGORICAL:
        values = np.array([None if m else c.strip() for c, m in zip(cells, missing)], dtype=object)
        return Column(kind, values, missing)
    values = np.full(len(cells), np.nan)
    for i, (cell, m) in enumerate(zip(cells, missing)):
        if m:
            continue
        try:
            values[i] = float(cell)
        except ValueError:
            raise DataError(
                f"column {name!r}, row {i + 1}: non-numeric value {cell.strip()!r}"
            ) from None
    if kind == BINARY:
        bad = ~missing & ~np.isin(values, (0.0, 1.0))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataError(f"column {name!r}, row {row + 1}: non-binary value {cells[row].strip()!r}")
        return Column(kind, np.where(missing, -1, values).astype(np.int64), missing)
    return Column(kind, values, missing)


def _looks_numeric(cells):
    for c in cells:
        c = c.strip()
        if c in MISSING_TOKENS:
            continue
        try:
            float(c)
        except ValueError:
            return False
    return True


def load_dataset(path, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    ``schema`` maps column names to ``"continuous"``, ``"categorical"`` or
    ``"binary"``.  Every declared column must appear in the header; columns
    that are not declared get an inferred kind (continuous when every
    non-missing cell parses as a number).  ``NA`` and empty cells are
    recorded as missing.
    """
    schema = dict(schema or {})
    for name, kind in schema.items():
        if kind not in KINDS:
            raise DataError(f"schema: unknown kind {kind!r} for column {name!r}")
    try:
        with open(Path(path), newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or not any(h.strip() for h in rows[0]):
        raise DataError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    body = [r for r in rows[1:] if r]
    if not body:
        raise DataError(f"{path}: no data rows")
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DataError(f"{path}, row {i + 1}: expected {len(header)} cells, found {len(r)}")
    absent = [name for name in schema if name not in header]
    if absent:
        raise DataError(f"{path}: declared columns not in header: {', '.join(absent)}")

    columns = {}
    for j, name in enumerate(header):
        cells = [r[j] for r in body]
        kind = schema.get(name)
        if kind is None:
            kind = CONTINUOUS if _looks_numeric(cells) else CATEGORICAL
        columns[name] = _parse_cells(name, cells, kind)
    return Dataset(columns, len(body))


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    column_names: tuple[str, ...]
    intercept_index: int | None
    dropped_levels: Mapping[str, str]
    rank: int
    n_dropped_rows: int = 0
    row_index: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self):
        return self.values.shape


def _level_labels(col: Column) -> np.ndarray:
    if col.kind == CATEGORICAL:
        return col.values
    if col.kind == BINARY:
        return np.array([None if m else str(v) for v, m in zip(col.values, col.missing)], dtype=object)
    # continuous used as a factor: label by repr of the value
    return np.array([None if m else repr(float(v)) for v, m in zip(col.values, col.missing)], dtype=object)


def dependent_columns(values: np.ndarray, names: Sequence[str], tol: float | None = None) -> list[str]:
    """Names of columns involved in an exact linear dependency."""
    _, s, vt = np.linalg.svd(values, full_matrices=True)
    if tol is None:
        tol = max(values.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)
    rank = int((s > tol).sum())
    null = vt[rank:]
    if null.size == 0:
        return []
    involved = (np.abs(null) > 1e-8).any(axis=0)
    return [n for n, hit in zip(names, involved) if hit]


def build_design(
    dataset: Dataset,
    response: str,
    continuous: Sequence[str] = (),
    categorical: Sequence[str] = (),
    intercept: bool = True,
) -> tuple[DesignMatrix, np.ndarray]:
    """Assemble the regressor matrix and the aligned response vector.

    Column order is: intercept (when requested), continuous terms in the
    given order, then one dummy block per categorical term with levels in
    lexicographic order and the first level dropped as the base.  Rows with
    a missing value in any used column are deleted; the count is kept in
    ``n_dropped_rows``.
    """
    used = [response, *continuous, *categorical]
    for name in used:
        if name not in dataset:
            raise DataError(f"column {name!r} not found")
    if dataset[response].kind == CATEGORICAL:
        raise DataError(f"response {response!r} must be numeric")

    keep = np.ones(dataset.n_rows, dtype=bool)
    for name in dict.fromkeys(used):
        keep &= ~dataset[name].missing
    rows = np.flatnonzero(keep)

    blocks = []
    names: list[str] = []
    if intercept:
        blocks.append(np.ones((rows.size, 1)))
        names.append("(Intercept)")
    for name in continuous:
        blocks.append(dataset.numeric(name)[rows][:, None])
        names.append(name)
    dropped = {}
    for name in categorical:
        labels = _level_labels(dataset[name])[rows]
        levels = sorted(set(labels.tolist()))
        if not levels:
            continue
        dropped[name] = levels[0]
        for level in levels[1:]:
            blocks.append((labels == level).astype(float)[:, None])
            names.append(f"{name}[{level}]")

    if not blocks:
        raise DataError("design has no columns")
    values = np.hstack(blocks) if rows.size else np.empty((0, len(names)))
    y = dataset.numeric(response)[rows]
    n, k = values.shape
    if n < k:
        raise DataError(f"only {n} complete rows for {k} columns after listwise deletion")
    for j, name in enumerate(names):
        if not np.any(values[:, j]):
            raise RankDeficiencyError(f"column {name!r} is identically zero", [name])
    rank = int(np.linalg.matrix_rank(values))
    if rank < k:
        cols = dependent_columns(values, names)
        raise RankDeficiencyError(
            f"design is rank deficient (rank {rank} < {k}); collinear columns: {', '.join(cols)}",
            cols,
        )
    values.setflags(write=False)
    y.setflags(write=False)
    return (
        DesignMatrix(
            values=values,
            column_names=tuple(names),
            intercept_index=0 if intercept else None,
            dropped_levels=dropped,
            rank=rank,
            n_dropped_rows=int(dataset.n_rows - rows.size),
            row_index=rows,
        ),
        y,
    )


@dataclass(frozen=True)
class GdpSeries:
    """Real GDP per capita for one unit over consecutive periods."""

    unit: str
    periods: tuple
    values: tuple

    def __post_init__(self):
        if len(self.periods) != len(self.values):
            raise DataError("periods and values differ in length")
        if any(b <= a for a, b in zip(self.periods, self.periods[1:])):
            raise DataError(f"{self.unit}: periods must be strictly increasing")
        if any(not v > 0 for v in self.values):
            raise DataError(f"{self.unit}: GDP per capita must be strictly positive")


def decadal_growth(series: GdpSeries) -> np.ndarray:
    """Growth between consecutive periods, ``(v[t+1] - v[t]) / v[t]``.

    The result has one entry per period except the last, for which no
    following observation exists.
    """
    if len(series.values) < 2:
        raise DataError(f"{series.unit}: need at least two periods")
    v = np.asarray(series.values, dtype=float)
    return (v[1:] - v[:-1]) / v[:-1]
