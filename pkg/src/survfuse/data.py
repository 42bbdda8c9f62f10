"""Censored two-source survival records and their restriction to a horizon.

A subject is observed as ``(y, delta, x, a, s)``: observed time, event
indicator, covariate vector, treatment and data source (1 = randomized trial,
0 = real-world data).  Restricting to a horizon ``L`` gives ``y_L = min(y, L)``
and the restricted event indicator, which equals 1 whenever ``y >= L``
because the restricted failure time ``min(T, L) <= L <= C`` is then known.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidInputError, LoadError

REQUIRED_COLUMNS = ("time", "event", "treat", "source")


@dataclass(frozen=True)
class SubjectRecord:
    y: float
    delta: int
    x: tuple
    a: int
    s: int

    def __post_init__(self):
        y = float(self.y)
        if not math.isfinite(y) or y <= 0:
            raise InvalidInputError(f"observed time must be finite and > 0, got {self.y!r}")
        for name in ("delta", "a", "s"):
            if getattr(self, name) not in (0, 1):
                raise InvalidInputError(f"{name} must be 0 or 1, got {getattr(self, name)!r}")
        x = tuple(float(v) for v in self.x)
        if not all(math.isfinite(v) for v in x):
            raise InvalidInputError(f"covariates must be finite, got {self.x!r}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "delta", int(self.delta))
        object.__setattr__(self, "a", int(self.a))
        object.__setattr__(self, "s", int(self.s))


@dataclass(frozen=True)
class RestrictedRecord:
    y_L: float
    delta_tilde: int
    original: SubjectRecord
    horizon: float

    def as_record(self) -> SubjectRecord:
        """The restricted observation as a plain record (same x, a, s)."""
        o = self.original
        return SubjectRecord(self.y_L, self.delta_tilde, o.x, o.a, o.s)


def _check_horizon(L):
    L = float(L)
    if not math.isfinite(L) or L <= 0:
        raise InvalidInputError(f"horizon L must be finite and > 0, got {L!r}")
    return L


def restrict(record: SubjectRecord, L: float) -> RestrictedRecord:
    """Restrict one observation to the horizon ``L``.

    Ties ``y == L`` count as reaching the horizon, so ``delta_tilde = 1``.
    """
    L = _check_horizon(L)
    if not math.isfinite(record.y):
        raise InvalidInputError(f"observed time must be finite, got {record.y!r}")
    reached = record.y >= L
    return RestrictedRecord(
        y_L=min(record.y, L),
        delta_tilde=1 if (reached or record.delta == 1) else 0,
        original=record,
        horizon=L,
    )


def restrict_arrays(y, delta, L):
    """Vectorised :func:`restrict` returning ``(y_L, delta_tilde)`` arrays."""
    L = _check_horizon(L)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("observed times must be finite")
    delta = np.asarray(delta)
    y_L = np.minimum(y, L)
    delta_tilde = np.where(y >= L, 1, delta).astype(np.int64)
    return y_L, delta_tilde


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented, read-only collection of subject records.

    Records keep their input order; ``x`` has shape ``(n, p)``.
    """

    y: np.ndarray
    delta: np.ndarray
    x: np.ndarray
    a: np.ndarray
    s: np.ndarray
    covariates: tuple

    def __post_init__(self):
        y = _frozen(self.y, float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(y), -1) if len(y) else x.reshape(0, len(self.covariates))
        x = _frozen(x, float)
        delta = _frozen(self.delta, np.int64)
        a = _frozen(self.a, np.int64)
        s = _frozen(self.s, np.int64)
        n = len(y)
        if not (len(delta) == len(a) == len(s) == x.shape[0] == n):
            raise InvalidInputError("all columns must have the same length")
        covariates = tuple(self.covariates)
        if x.shape[1] != len(covariates):
            raise InvalidInputError(
                f"{len(covariates)} covariate names for {x.shape[1]} covariate columns")
        if n:
            if not np.all(np.isfinite(y)) or np.any(y <= 0):
                raise InvalidInputError("observed times must be finite and > 0")
            if not np.all(np.isfinite(x)):
                raise InvalidInputError("covariates must be finite")
            for name, col in (("delta", delta), ("a", a), ("s", s)):
                if np.any((col != 0) & (col != 1)):
                    raise InvalidInputError(f"{name} must be 0 or 1")
        for name, val in (("y", y), ("x", x), ("delta", delta), ("a", a), ("s", s),
                          ("covariates", covariates)):
            object.__setattr__(self, name, val)

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord], covariates: Sequence[str] | None = None):
        records = list(records)
        p = len(records[0].x) if records else (len(covariates) if covariates else 0)
        if any(len(r.x) != p for r in records):
            raise InvalidInputError("all records must share the covariate dimension")
        if covariates is None:
            covariates = tuple(f"x{j + 1}" for j in range(p))
        return cls(
            y=[r.y for r in records],
            delta=[r.delta for r in records],
            x=np.array([r.x for r in records], dtype=float).reshape(len(records), p),
            a=[r.a for r in records],
            s=[r.s for r in records],
            covariates=tuple(covariates),
        )

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n1(self) -> int:
        return int(np.sum(self.s == 1))

    @property
    def n0(self) -> int:
        return int(np.sum(self.s == 0))

    @property
    def records(self) -> list:
        return [SubjectRecord(float(self.y[i]), int(self.delta[i]), tuple(self.x[i]),
                              int(self.a[i]), int(self.s[i])) for i in range(self.n)]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.y[mask], self.delta[mask], self.x[mask], self.a[mask],
                       self.s[mask], self.covariates)

    def source(self, s: int) -> "Dataset":
        return self.subset(self.s == s)

    def select_covariates(self, names: Sequence[str]) -> "Dataset":
        idx = [self.covariate_index(c) for c in names]
        return Dataset(self.y, self.delta, self.x[:, idx], self.a, self.s, tuple(names))

    def covariate_index(self, name: str) -> int:
        try:
            return self.covariates.index(name)
        except ValueError:
            raise InvalidInputError(f"unknown covariate {name!r}") from None

    def restricted(self, L: float):
        """``(y_L, delta_tilde)`` arrays for every record."""
        return restrict_arrays(self.y, self.delta, L)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.covariates == other.covariates
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("y", "delta", "x", "a", "s")))

    def __hash__(self):
        return id(self)


def concat(datasets: Sequence[Dataset]) -> Dataset:
    covs = datasets[0].covariates
    if any(d.covariates != covs for d in datasets):
        raise InvalidInputError("datasets have different covariates")
    return Dataset(
        np.concatenate([d.y for d in datasets]),
        np.concatenate([d.delta for d in datasets]),
        np.vstack([d.x for d in datasets]),
        np.concatenate([d.a for d in datasets]),
        np.concatenate([d.s for d in datasets]),
        covs,
    )


def _parse_float(text, row, col):
    try:
        value = float(text)
    except ValueError:
        raise LoadError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise LoadError(f"row {row}, column {col!r}: value {text!r} is not finite")
    return value


def _parse_binary(text, row, col):
    value = _parse_float(text, row, col)
    if value not in (0.0, 1.0):
        raise LoadError(f"row {row}, column {col!r}: expected 0 or 1, got {text!r}")
    return int(value)


def load_dataset(path, covariates: Sequence[str] | None = None,
                 schema: Mapping[str, str] | None = None,
                 require_both_sources: bool = True) -> Dataset:
    """Read a dataset from CSV.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV file with a header row.
    covariates : sequence of str, optional
        Covariate columns, in order.  Defaults to every column that is not one
        of the role columns.
    schema : mapping, optional
        Maps the roles ``time``, ``event``, ``treat``, ``source`` to column
        names when they differ from the defaults.
    require_both_sources : bool
        Reject files with no trial or no real-world rows.

    Rows are numbered from 1, counting data rows only (the header is not a row).
    """
    roles = {r: r for r in REQUIRED_COLUMNS}
    if schema:
        unknown = set(schema) - set(REQUIRED_COLUMNS)
        if unknown:
            raise LoadError(f"unknown schema roles: {sorted(unknown)}")
        roles.update(schema)
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for role, col in roles.items():
            if col not in header:
                raise LoadError(f"missing column {col!r} (role {role!r})")
        if covariates is None:
            covariates = [h for h in header if h not in roles.values()]
        else:
            covariates = list(covariates)
            for col in covariates:
                if col not in header:
                    raise LoadError(f"missing column {col!r} (covariate)")
        pos = {h: i for i, h in enumerate(header)}
        ys, ds, xs, as_, ss = [], [], [], [], []
        for row, cells in enumerate(reader, start=1):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise LoadError(f"row {row}: expected {len(header)} cells, found {len(cells)}")
            y = _parse_float(cells[pos[roles["time"]]], row, roles["time"])
            if y <= 0:
                raise LoadError(f"row {row}, column {roles['time']!r}: time must be > 0, got {y!r}")
            ys.append(y)
            ds.append(_parse_binary(cells[pos[roles["event"]]], row, roles["event"]))
            as_.append(_parse_binary(cells[pos[roles["treat"]]], row, roles["treat"]))
            ss.append(_parse_binary(cells[pos[roles["source"]]], row, roles["source"]))
            xs.append([_parse_float(cells[pos[c]], row, c) for c in covariates])
    if not ys:
        raise LoadError(f"{path}: no data rows")
    if require_both_sources:
        if not any(s == 1 for s in ss):
            raise LoadError(f"{path}: no trial records (source == 1)")
        if not any(s == 0 for s in ss):
            raise LoadError(f"{path}: no real-world records (source == 0)")
    return Dataset(ys, ds, np.array(xs, dtype=float).reshape(len(ys), len(covariates)),
                   as_, ss, tuple(covariates))


def write_dataset(data: Dataset, path) -> None:
    """Write ``data`` in the canonical CSV layout.

    Floats use the shortest representation that round-trips, so
    ``load_dataset(write_dataset(d))`` reproduces ``d`` bit for bit.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(REQUIRED_COLUMNS) + list(data.covariates))
        for i in range(data.n):
            w.writerow([repr(float(data.y[i])), int(data.delta[i]), int(data.a[i]),
                        int(data.s[i])] + [repr(float(v)) for v in data.x[i]])
