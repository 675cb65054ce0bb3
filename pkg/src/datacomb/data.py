"""Merged two-sample data, CSV ingestion and regressor bases.

Rows with ``t == 1`` form the primary sample (common variables ``u`` and,
in the separable setting, primary-only variables ``y``).  Rows with
``t == 0`` form the auxiliary sample (``u`` and auxiliary-only ``x``).
Missing cells are stored as NaN.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import SchemaError

PRUNE_TOL = 1e-8

__all__ = [
    "MergedSample",
    "Term",
    "BasisSpec",
    "DesignMatrix",
    "ingest_csv",
    "write_csv",
    "build_design",
    "select_independent",
]


def _as_2d(a, n):
    if a is None:
        return None
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(n, 1)
    return a


@dataclass(frozen=True, eq=False)
class MergedSample:
    """Unit-level records from the primary (t=1) and auxiliary (t=0) samples.

    Parameters
    ----------
    t : array of {0, 1}, shape (n,)
    u : array, shape (n, p)
        Common variables, observed on every row.
    x : array, shape (n, q), optional
        Auxiliary-only variables; NaN on primary rows.
    y : array, shape (n, r), optional
        Primary-only variables; NaN on auxiliary rows.
    """

    t: np.ndarray
    u: np.ndarray
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    u_names: tuple = ()
    x_names: tuple = ()
    y_names: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.t)
        if t.ndim != 1:
            raise SchemaError("t must be one-dimensional")
        if not np.all((t == 0) | (t == 1)):
            raise SchemaError("t must take values in {0, 1}")
        n = t.shape[0]
        u = _as_2d(self.u, n)
        if u.shape[0] != n:
            raise SchemaError("u has %d rows, expected %d" % (u.shape[0], n))
        if not np.all(np.isfinite(u)):
            raise SchemaError("u must be observed and finite on every row")
        x = _as_2d(self.x, n)
        y = _as_2d(self.y, n)
        prim = t == 1
        if x is not None:
            if x.shape[0] != n:
                raise SchemaError("x has wrong number of rows")
            if np.any(~np.isnan(x[prim])):
                raise SchemaError("x observed in primary sample")
            if not np.all(np.isfinite(x[~prim])):
                raise SchemaError("x missing or non-finite in auxiliary sample")
        if y is not None:
            if y.shape[0] != n:
                raise SchemaError("y has wrong number of rows")
            if np.any(~np.isnan(y[~prim])):
                raise SchemaError("y observed in auxiliary sample")
            if not np.all(np.isfinite(y[prim])):
                raise SchemaError("y missing or non-finite in primary sample")
        n1 = int(prim.sum())
        if n1 < 1 or n - n1 < 1:
            raise SchemaError("both samples must be non-empty")
        u_names = tuple(self.u_names) or tuple("u%d" % j for j in range(u.shape[1]))
        if len(u_names) != u.shape[1]:
            raise SchemaError("u_names length does not match u")
        x_names = tuple(self.x_names)
        if x is not None and not x_names:
            x_names = tuple("x%d" % j for j in range(x.shape[1]))
        y_names = tuple(self.y_names)
        if y is not None and not y_names:
            y_names = tuple("y%d" % j for j in range(y.shape[1]))
        for arr in (u, x, y):
            if arr is not None:
                arr.setflags(write=False)
        t = t.astype(np.int8)
        t.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u_names", u_names)
        object.__setattr__(self, "x_names", x_names)
        object.__setattr__(self, "y_names", y_names)

    @property
    def n(self) -> int:
        return self.t.shape[0]

    @property
    def n1(self) -> int:
        return int(self.t.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def primary(self) -> np.ndarray:
        return self.t == 1

    @property
    def auxiliary(self) -> np.ndarray:
        return self.t == 0

    def ucol(self, name: str) -> np.ndarray:
        try:
            return self.u[:, self.u_names.index(name)]
        except ValueError:
            raise KeyError("unknown common variable %r" % name) from None

    def xcol(self, name: str | None = None) -> np.ndarray:
        if self.x is None:
            raise KeyError("sample has no auxiliary-only variables")
        j = 0 if name is None else self.x_names.index(name)
        return self.x[:, j]

    def ycol(self, name: str | None = None) -> np.ndarray:
        if self.y is None:
            raise KeyError("sample has no primary-only variables")
        j = 0 if name is None else self.y_names.index(name)
        return self.y[:, j]

    def take(self, index) -> "MergedSample":
        """Row subset (with repetition allowed), preserving names."""
        index = np.asarray(index)
        return MergedSample(
            self.t[index],
            self.u[index],
            None if self.x is None else self.x[index],
            None if self.y is None else self.y[index],
            self.u_names,
            self.x_names,
            self.y_names,
        )

    def equals(self, other: "MergedSample") -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b, equal_nan=True)

        return (
            np.array_equal(self.t, other.t)
            and same(self.u, other.u)
            and same(self.x, other.x)
            and same(self.y, other.y)
            and self.u_names == other.u_names
            and self.x_names == other.x_names
            and self.y_names == other.y_names
        )


def ingest_csv(
    path,
    t_col: str,
    u_cols: Sequence[str] | None = None,
    x_cols: Sequence[str] = (),
    y_cols: Sequence[str] = (),
) -> MergedSample:
    """Read a merged two-sample CSV file.

    ``u_cols`` defaults to every column not named as t, x or y.  Empty
    cells mark missing values and are only allowed in x columns on primary
    rows and y columns on auxiliary rows.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file: %s" % path) from None
        rows = [r for r in reader if r]

    if t_col not in header:
        raise SchemaError("missing t column %r" % t_col)
    x_cols, y_cols = list(x_cols), list(y_cols)
    if u_cols is None:
        taken = {t_col, *x_cols, *y_cols}
        u_cols = [h for h in header if h not in taken]
    u_cols = list(u_cols)
    for name in (*u_cols, *x_cols, *y_cols):
        if name not in header:
            raise SchemaError("missing column %r" % name)
    if not u_cols:
        raise SchemaError("no common variables")

    pos = {h: j for j, h in enumerate(header)}

    def parse(cell, lineno, col):
        cell = cell.strip()
        if cell == "":
            return math.nan
        try:
            return float(cell)
        except ValueError:
            raise SchemaError(
                "non-numeric cell %r at line %d, column %r" % (cell, lineno, col)
            ) from None

    n = len(rows)
    t = np.empty(n)
    u = np.empty((n, len(u_cols)))
    x = np.empty((n, len(x_cols)))
    y = np.empty((n, len(y_cols)))
    for i, r in enumerate(rows):
        lineno = i + 2
        if len(r) != len(header):
            raise SchemaError("line %d has %d fields, expected %d" % (lineno, len(r), len(header)))
        t[i] = parse(r[pos[t_col]], lineno, t_col)
        if t[i] not in (0.0, 1.0):
            raise SchemaError("t must be 0 or 1 (line %d)" % lineno)
        for j, c in enumerate(u_cols):
            u[i, j] = parse(r[pos[c]], lineno, c)
            if math.isnan(u[i, j]):
                raise SchemaError("missing common variable %r at line %d" % (c, lineno))
        for j, c in enumerate(x_cols):
            x[i, j] = parse(r[pos[c]], lineno, c)
            if t[i] == 1 and not math.isnan(x[i, j]):
                raise SchemaError("x observed in primary sample (line %d)" % lineno)
        for j, c in enumerate(y_cols):
            y[i, j] = parse(r[pos[c]], lineno, c)
            if t[i] == 0 and not math.isnan(y[i, j]):
                raise SchemaError("y observed in auxiliary sample (line %d)" % lineno)

    n1 = int((t == 1).sum())
    if n1 < 2 or n - n1 < 2:
        raise SchemaError("need at least 2 rows per sample (got n1=%d, n0=%d)" % (n1, n - n1))
    return MergedSample(
        t.astype(np.int8),
        u,
        x if x_cols else None,
        y if y_cols else None,
        tuple(u_cols),
        tuple(x_cols),
        tuple(y_cols),
    )


def write_csv(sample: MergedSample, path, t_col: str = "t") -> None:
    """Write ``sample`` in the layout read by :func:`ingest_csv`.

    Floats are written with ``repr`` so a read-back is bit-exact.
    """
    header = [t_col, *sample.u_names, *sample.x_names, *sample.y_names]
    blocks = [b for b in (sample.u, sample.x, sample.y) if b is not None]
    body = np.hstack(blocks)

    def fmt(v):
        return "" if math.isnan(v) else repr(float(v))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for ti, row in zip(sample.t, body):
            w.writerow([str(int(ti)), *map(fmt, row)])


@dataclass(frozen=True)
class Term:
    """One basis function of the common variables.

    ``fn`` receives a mapping from column name to column array and returns
    one value per row.
    """

    label: str
    fn: Callable[[Mapping[str, np.ndarray]], np.ndarray] = field(compare=False)
    is_intercept: bool = False


def _column_term(name):
    return Term(name, lambda cols: cols[name])


def _interaction_term(names):
    def fn(cols):
        out = np.ones_like(cols[names[0]])
        for nm in names:
            out = out * cols[nm]
        return out

    return Term(":".join(names), fn)


INTERCEPT = Term("1", lambda cols: np.ones(len(next(iter(cols.values())))), True)


@dataclass(frozen=True)
class BasisSpec:
    """Ordered list of basis functions f(u) or g(u)."""

    terms: tuple

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("a basis needs at least one term")
        if any(tm.is_intercept for tm in terms[1:]):
            raise ValueError("the intercept must be the first term")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def parse(cls, specs: Sequence[str] | str) -> "BasisSpec":
        """Build from a list like ``["1", "z0", "z1", "z0:z1"]``.

        ``"1"`` is the intercept (moved to the front), ``"a:b"`` the product
        of two columns, any other string a raw column.
        """
        if isinstance(specs, str):
            specs = [s for s in specs.replace(",", " ").split() if s]
        terms = []
        intercept = False
        for s in specs:
            s = s.strip()
            if s == "1":
                intercept = True
            elif ":" in s:
                terms.append(_interaction_term(tuple(p.strip() for p in s.split(":"))))
            else:
                terms.append(_column_term(s))
        if intercept:
            terms.insert(0, INTERCEPT)
        return cls(tuple(terms))

    @property
    def includes_intercept(self) -> bool:
        return self.terms[0].is_intercept

    @property
    def labels(self) -> tuple:
        return tuple(tm.label for tm in self.terms)

    def __len__(self):
        return len(self.terms)

    def evaluate(self, u: np.ndarray, names: Sequence[str]) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        cols = {nm: u[:, j] for j, nm in enumerate(names)}
        out = np.empty((u.shape[0], len(self.terms)))
        for j, tm in enumerate(self.terms):
            try:
                out[:, j] = tm.fn(cols)
            except KeyError as exc:
                raise SchemaError("basis term %r needs unknown column %s" % (tm.label, exc)) from None
        return out


def select_independent(A: np.ndarray, groups: Sequence[Sequence[int]], tol: float = PRUNE_TOL) -> list:
    """Greedy rank-revealing column selection.

    Columns are scaled to unit norm. Groups are processed in order; within a
    group, columns are residualised on everything kept so far and then chosen
    by pivoted QR.  A column is kept when its residual norm exceeds ``tol``.
    Returns the kept indices in ascending order.
    """
    A = np.asarray(A, dtype=float)
    norms = np.linalg.norm(A, axis=0)
    kept: list = []
    Q = np.zeros((A.shape[0], 0))
    for group in groups:
        group = [j for j in group if norms[j] > 0]
        if not group:
            continue
        B = A[:, group] / norms[group]
        if Q.shape[1]:
            B = B - Q @ (Q.T @ B)
            # second pass keeps the residual orthogonal in floating point
            B = B - Q @ (Q.T @ B)
        Qg, R, piv = sla.qr(B, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        r = int(np.sum(diag > tol))
        kept.extend(group[p] for p in piv[:r])
        Q = np.hstack([Q, Qg[:, :r]])
    return sorted(kept)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Evaluated basis restricted to the retained (non-redundant) columns.

    ``values`` holds only the retained columns; ``kept_columns`` indexes
    them in the full term list ``all_labels``.
    """

    values: np.ndarray
    column_labels: tuple
    kept_columns: tuple
    all_labels: tuple
    rows: np.ndarray
    intercept: bool = False

    @property
    def dropped_labels(self) -> tuple:
        return tuple(lb for j, lb in enumerate(self.all_labels) if j not in self.kept_columns)

    @property
    def shape(self):
        return self.values.shape


def _subset_rows(sample: MergedSample, subset: str) -> np.ndarray:
    if subset == "all":
        return np.arange(sample.n)
    if subset == "primary":
        return np.flatnonzero(sample.primary)
    if subset == "auxiliary":
        return np.flatnonzero(sample.auxiliary)
    raise ValueError("subset must be 'all', 'primary' or 'auxiliary'")


def build_design(
    sample: MergedSample,
    spec: BasisSpec,
    subset: str = "all",
    tol: float = PRUNE_TOL,
) -> DesignMatrix:
    """Evaluate ``spec`` on the rows of ``subset`` and drop redundant columns."""
    rows = _subset_rows(sample, subset)
    F = spec.evaluate(sample.u[rows], sample.u_names)
    if not np.all(np.isfinite(F)):
        bad = [spec.labels[j] for j in range(F.shape[1]) if not np.all(np.isfinite(F[:, j]))]
        raise SchemaError("non-finite basis values in %s" % ", ".join(bad))
    p = F.shape[1]
    if spec.includes_intercept:
        groups = [[0], list(range(1, p))]
    else:
        groups = [list(range(p))]
    kept = select_independent(F, groups, tol)
    if not kept:
        raise SchemaError("all basis columns are degenerate")
    return DesignMatrix(
        values=F[:, kept],
        column_labels=tuple(spec.labels[j] for j in kept),
        kept_columns=tuple(kept),
        all_labels=spec.labels,
        rows=rows,
        intercept=spec.includes_intercept,
    )
