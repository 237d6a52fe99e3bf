"""Observed-data records, dataset container, and CSV ingestion.

A unit is the triple (covariates, exposure, outcome) with a binary exposure
and binary outcome. Datasets are immutable after construction and safe to
share across workers. CSV files are comma-delimited with a header row;
empty strings and "NA" are treated as missing values.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

MISSING_MARKERS = ("", "NA")


class MissingColumnError(ValueError):
    """A named column is absent from the input file."""


class CsvParseError(ValueError):
    """A cell could not be parsed; carries the 1-based data row index."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyDatasetError(ValueError):
    """An operation produced or received a dataset with no rows."""


class PositivityError(ValueError):
    """An exposure arm required for estimation is empty."""


@dataclass(frozen=True)
class Observation:
    """One unit: covariate vector, binary exposure, binary outcome."""

    covariates: np.ndarray
    exposure: float
    outcome: float


@dataclass(frozen=True)
class PotentialOutcomeRecord:
    """Simulation-only ground truth for one unit.

    Monotonicity (outcome can only be raised by exposure) is enforced:
    y0 <= y1.
    """

    y1: int
    y0: int
    true_gamma: float

    def __post_init__(self):
        if self.y0 > self.y1:
            raise ValueError(f"monotonicity violated: y0={self.y0} > y1={self.y1}")
        if not 0.0 <= self.true_gamma <= 1.0:
            raise ValueError(f"true_gamma={self.true_gamma} outside [0, 1]")


@dataclass(frozen=True)
class Dataset:
    """Immutable container of n units with d covariates each.

    Missing values (NaN) may be present until :func:`complete_case_filter`
    is applied; estimation routines require complete data.

    Parameters
    ----------
    covariates : ndarray of shape (n, d)
    exposure : ndarray of shape (n,)
        Values in {0, 1}, NaN marking missing.
    outcome : ndarray of shape (n,)
        Values in {0, 1}, NaN marking missing.
    covariate_names : tuple of str, length d
    """

    covariates: np.ndarray
    exposure: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple = field(default=None)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        a = np.asarray(self.exposure, dtype=float).ravel()
        y = np.asarray(self.outcome, dtype=float).ravel()
        if X.shape[0] != a.shape[0] or X.shape[0] != y.shape[0]:
            raise ValueError(
                f"row mismatch: covariates {X.shape[0]}, exposure {a.shape[0]}, "
                f"outcome {y.shape[0]}"
            )
        if X.shape[0] < 1:
            raise EmptyDatasetError("dataset must contain at least one row")
        names = self.covariate_names
        if names is None:
            names = tuple(f"x{j + 1}" for j in range(X.shape[1]))
        names = tuple(str(c) for c in names)
        if len(names) != X.shape[1]:
            raise ValueError(
                f"{len(names)} covariate names for {X.shape[1]} columns"
            )
        for label, v in (("exposure", a), ("outcome", y)):
            bad = ~(np.isnan(v) | (v == 0.0) | (v == 1.0))
            if bad.any():
                i = int(np.argmax(bad))
                raise ValueError(f"{label} value {v[i]} at row {i} is not binary")
        X = X.copy()
        a = a.copy()
        y = y.copy()
        for arr in (X, a, y):
            arr.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "exposure", a)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self):
        return self.covariates.shape[0]

    @property
    def d(self):
        return self.covariates.shape[1]

    def __len__(self):
        return self.n

    def observation(self, i):
        """Return row i as an :class:`Observation`."""
        return Observation(self.covariates[i], float(self.exposure[i]),
                           float(self.outcome[i]))

    def is_complete(self):
        """True when no entry is missing or non-finite."""
        return bool(
            np.isfinite(self.covariates).all()
            and np.isfinite(self.exposure).all()
            and np.isfinite(self.outcome).all()
        )

    def subset(self, index):
        """Row-subset dataset (boolean mask or integer index array)."""
        return Dataset(self.covariates[index], self.exposure[index],
                       self.outcome[index], self.covariate_names)


@dataclass(frozen=True)
class PositivityReport:
    """Arm and cell counts used to audit the overlap requirement."""

    n: int
    n_treated: int
    n_control: int
    n_missing_exposure: int
    cell_counts: dict
    empty_arm: bool


def _parse_binary(token, row, column):
    token = token.strip()
    if token in MISSING_MARKERS:
        return np.nan
    try:
        value = float(token)
    except ValueError:
        raise CsvParseError(
            f"column {column!r}, data row {row}: {token!r} is not 0/1",
            row=row, column=column) from None
    if value not in (0.0, 1.0):
        raise CsvParseError(
            f"column {column!r}, data row {row}: value {token!r} is not binary",
            row=row, column=column)
    return value


def _parse_real(token, row, column):
    token = token.strip()
    if token in MISSING_MARKERS:
        return np.nan
    try:
        return float(token)
    except ValueError:
        raise CsvParseError(
            f"column {column!r}, data row {row}: {token!r} is not numeric",
            row=row, column=column) from None


def load_csv(path, outcome_col, exposure_col, covariate_cols):
    """Read a dataset from a comma-delimited, headed CSV file.

    Missing markers (empty cell or "NA") become NaN and survive until
    :func:`complete_case_filter`. Non-binary outcome/exposure values raise
    :class:`CsvParseError` with the offending 1-based data row.
    """
    covariate_cols = list(covariate_cols)
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        positions = {}
        for name in [outcome_col, exposure_col] + covariate_cols:
            if name not in header:
                raise MissingColumnError(
                    f"{path}: column {name!r} not found (have {header})")
            positions[name] = header.index(name)

        xs, aa, yy = [], [], []
        for row_index, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            yy.append(_parse_binary(row[positions[outcome_col]], row_index,
                                    outcome_col))
            aa.append(_parse_binary(row[positions[exposure_col]], row_index,
                                    exposure_col))
            xs.append([_parse_real(row[positions[c]], row_index, c)
                       for c in covariate_cols])

    if not yy:
        raise EmptyDatasetError(f"{path}: no data rows")
    return Dataset(np.array(xs, dtype=float).reshape(len(yy), len(covariate_cols)),
                   np.array(aa), np.array(yy), tuple(covariate_cols))


def write_csv(ds, path, outcome_col="y", exposure_col="a"):
    """Write a dataset back to CSV; NaN entries are emitted as "NA".

    Finite values are written with ``repr`` so that
    ``load_csv(write_csv(ds))`` round-trips bit-exactly.
    """

    def fmt(v):
        return "NA" if np.isnan(v) else repr(float(v))

    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow([outcome_col, exposure_col, *ds.covariate_names])
        for i in range(ds.n):
            writer.writerow([fmt(ds.outcome[i]), fmt(ds.exposure[i]),
                             *(fmt(v) for v in ds.covariates[i])])


def complete_case_filter(ds):
    """Drop every row containing a missing or non-finite entry.

    Row order is preserved and the removal count is logged. Idempotent.
    """
    keep = (np.isfinite(ds.covariates).all(axis=1)
            & np.isfinite(ds.exposure) & np.isfinite(ds.outcome))
    removed = int(ds.n - keep.sum())
    if keep.sum() == 0:
        raise EmptyDatasetError(
            f"complete-case filter removed all {ds.n} rows")
    if removed:
        logger.info("complete-case filter removed %d of %d rows", removed, ds.n)
    if removed == 0:
        return ds
    return ds.subset(keep)


def validate_positivity(ds):
    """Count units per exposure arm and per (exposure, outcome) cell.

    Diagnostic only: an empty arm sets the flag, estimation routines decide
    whether to abort.
    """
    a, y = ds.exposure, ds.outcome
    complete = np.isfinite(a)
    n_treated = int((a[complete] == 1.0).sum())
    n_control = int((a[complete] == 0.0).sum())
    cells = {}
    both = complete & np.isfinite(y)
    for av in (0, 1):
        for yv in (0, 1):
            cells[(av, yv)] = int(((a == av) & (y == yv) & both).sum())
    return PositivityReport(
        n=ds.n,
        n_treated=n_treated,
        n_control=n_control,
        n_missing_exposure=int(ds.n - complete.sum()),
        cell_counts=cells,
        empty_arm=(n_treated == 0 or n_control == 0),
    )
