"""Tabular ingestion, column roles, and the entry-wise holdout split.

A dataset is a cause matrix X (one column per neuroanatomical measure or
synthetic cause), a covariate matrix F (age, gender, ...), and an outcome
vector. Columns are assigned roles at load time. Volume causes can be
normalized by total intracranial volume, and causes/covariates are
standardized before model fitting. The holdout split masks a random
fraction of individual cells of X for the predictive check.

Missingness is always represented by an explicit boolean presence mask
carried alongside the value matrix, never by a sentinel value.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

VALID_ROLES = ("cause-volume", "cause-thickness", "covariate", "outcome", "tiv", "age")
CAUSE_ROLES = ("cause-volume", "cause-thickness")
COVARIATE_ROLES = ("covariate", "age")


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable tabular dataset with role-partitioned columns.

    Attributes
    ----------
    causes : ndarray, shape (N, D)
        Cause columns, in file order.
    covariates : ndarray, shape (N, P)
        Covariate columns (including the age column, if declared).
    outcome : ndarray, shape (N,)
        Outcome values (ADAS-style score, proportion, or binary label).
    roles : dict
        Column name to role, for the columns retained after ingestion.
    cause_names, covariate_names : tuple of str
    outcome_name : str
    tiv : ndarray or None
        Total intracranial volume per row, if a tiv column was declared.
    """

    causes: np.ndarray
    covariates: np.ndarray
    outcome: np.ndarray
    roles: dict
    cause_names: tuple
    covariate_names: tuple
    outcome_name: str
    tiv: np.ndarray | None = None

    def __post_init__(self):
        causes = np.atleast_2d(np.asarray(self.causes, dtype=np.float64))
        covariates = np.asarray(self.covariates, dtype=np.float64)
        if covariates.ndim == 1:
            covariates = covariates.reshape(len(covariates), -1)
        if covariates.size == 0:
            covariates = covariates.reshape(causes.shape[0], 0)
        outcome = np.asarray(self.outcome, dtype=np.float64)
        n = causes.shape[0]
        if n < 1:
            raise DataError("dataset has no rows")
        if causes.shape[1] < 1:
            raise DataError("dataset has no cause columns")
        if covariates.shape[0] != n or outcome.shape[0] != n:
            raise DataError(
                "row count mismatch: causes %d, covariates %d, outcome %d"
                % (n, covariates.shape[0], outcome.shape[0])
            )
        if not np.isfinite(causes).all():
            raise DataError("non-finite value in causes")
        if not np.isfinite(covariates).all():
            raise DataError("non-finite value in covariates")
        if not np.isfinite(outcome).all():
            raise DataError("non-finite value in outcome")
        if len(self.cause_names) != causes.shape[1]:
            raise DataError("cause_names length does not match cause columns")
        if len(self.covariate_names) != covariates.shape[1]:
            raise DataError("covariate_names length does not match covariate columns")
        tiv = self.tiv
        if tiv is not None:
            tiv = np.asarray(tiv, dtype=np.float64)
            if tiv.shape[0] != n:
                raise DataError("tiv length does not match row count")
            if not np.isfinite(tiv).all():
                raise DataError("non-finite value in tiv")
            object.__setattr__(self, "tiv", _readonly(tiv))
        object.__setattr__(self, "causes", _readonly(causes))
        object.__setattr__(self, "covariates", _readonly(covariates))
        object.__setattr__(self, "outcome", _readonly(outcome))
        object.__setattr__(self, "cause_names", tuple(self.cause_names))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "roles", dict(self.roles))

    @property
    def n_rows(self):
        return self.causes.shape[0]

    @property
    def n_causes(self):
        return self.causes.shape[1]

    @property
    def n_covariates(self):
        return self.covariates.shape[1]

    def age(self):
        """Return the covariate column declared with role 'age'."""
        for idx, name in enumerate(self.covariate_names):
            if self.roles.get(name) == "age":
                return self.covariates[:, idx]
        raise DataError("no column declared with role 'age'")

    def has_age(self):
        return any(self.roles.get(n) == "age" for n in self.covariate_names)


@dataclass(frozen=True)
class MaskedMatrix:
    """A value matrix with an explicit entry-presence mask.

    ``values`` is zero wherever ``observed`` is False, so the sum of the
    observed and held-out parts reconstructs the original matrix exactly.
    """

    values: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        observed = np.asarray(self.observed, dtype=bool)
        if values.shape != observed.shape:
            raise DataError("values and observed mask shapes differ")
        values = np.where(observed, values, 0.0)
        object.__setattr__(self, "values", _readonly(values))
        observed = np.ascontiguousarray(observed)
        observed.setflags(write=False)
        object.__setattr__(self, "observed", observed)

    @property
    def n_observed(self):
        return int(self.observed.sum())

    def row_counts(self):
        return self.observed.sum(axis=1)


@dataclass(frozen=True)
class HoldoutMask:
    """Binary holdout matrix H (1 = held out) with its generation settings."""

    mask: np.ndarray
    hold_fraction: float
    seed: int

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if not np.isin(mask, (0, 1)).all():
            raise DataError("holdout mask entries must be 0 or 1")
        mask = mask.astype(np.uint8)
        frac = mask.mean()
        if abs(frac - self.hold_fraction) > 0.02:
            raise DataError(
                "holdout mask fraction %.4f deviates from requested %.4f by more "
                "than 2 percentage points" % (frac, self.hold_fraction)
            )
        if (mask.all(axis=1)).any():
            raise DataError("holdout mask leaves at least one row fully held out")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True)
class ColumnScaling:
    """Per-column location/scale from :func:`standardize`, for exact inversion."""

    cause_location: np.ndarray
    cause_scale: np.ndarray
    covariate_location: np.ndarray
    covariate_scale: np.ndarray
    cause_names: tuple
    covariate_names: tuple

    def restore_causes(self, x):
        """Map standardized cause values back to raw units."""
        return np.asarray(x) * self.cause_scale + self.cause_location

    def standardize_causes(self, x):
        return (np.asarray(x) - self.cause_location) / self.cause_scale

    def standardize_cause_value(self, name, value):
        """Convert one raw-unit cause value to standardized units."""
        try:
            j = self.cause_names.index(name)
        except ValueError:
            raise DataError("unknown cause column %r" % (name,)) from None
        return (float(value) - self.cause_location[j]) / self.cause_scale[j]


def _split_header(line):
    # comma by default, tab accepted
    delim = "\t" if line.count("\t") > line.count(",") else ","
    return delim


def load_dataset(path, roles):
    """Load a delimited text file and partition columns by role.

    Parameters
    ----------
    path : str
        Delimited text file (comma or tab) with a header row.
    roles : dict
        Column name to role; roles are drawn from
        ``cause-volume, cause-thickness, covariate, outcome, tiv, age``.
        Columns not named here are ignored.

    Returns
    -------
    Dataset

    Notes
    -----
    Parsing is strict: any cell in a role-bearing column that is not a
    finite number raises ``DataError`` naming the row and column, except
    in the outcome column, where rows with a missing or non-finite
    outcome are dropped (they cannot enter the regression anyway).
    """
    roles = dict(roles)
    for name, role in roles.items():
        if role not in VALID_ROLES:
            raise ConfigError(
                "unknown role %r for column %r (valid: %s)"
                % (role, name, ", ".join(VALID_ROLES))
            )
    outcome_cols = [n for n, r in roles.items() if r == "outcome"]
    if len(outcome_cols) != 1:
        raise ConfigError(
            "exactly one column must have role 'outcome', got %d" % len(outcome_cols)
        )
    tiv_cols = [n for n, r in roles.items() if r == "tiv"]
    if len(tiv_cols) > 1:
        raise ConfigError("at most one column may have role 'tiv'")
    age_cols = [n for n, r in roles.items() if r == "age"]
    if len(age_cols) > 1:
        raise ConfigError("at most one column may have role 'age'")

    try:
        with open(path, "r", newline="") as fh:
            first = fh.readline()
            if not first:
                raise DataError("%s: empty file" % path)
            delim = _split_header(first)
            fh.seek(0)
            reader = csv.reader(fh, delimiter=delim)
            header = [h.strip() for h in next(reader)]
            rows = [r for r in reader if any(cell.strip() for cell in r)]
    except OSError as exc:
        raise DataError("%s: cannot read dataset: %s" % (path, exc)) from exc

    missing = [n for n in roles if n not in header]
    if missing:
        raise DataError("%s: declared column(s) not in header: %s" % (path, ", ".join(missing)))

    col_idx = {n: header.index(n) for n in roles}
    cause_names = [n for n in header if roles.get(n) in CAUSE_ROLES]
    covariate_names = [n for n in header if roles.get(n) in COVARIATE_ROLES]
    outcome_name = outcome_cols[0]
    tiv_name = tiv_cols[0] if tiv_cols else None

    def parse(cell, rownum, colname):
        try:
            v = float(cell)
        except (TypeError, ValueError):
            raise DataError(
                "%s: row %d, column %r: cannot parse %r as a number"
                % (path, rownum, colname, cell)
            ) from None
        if not np.isfinite(v):
            raise DataError(
                "%s: row %d, column %r: non-finite value %r" % (path, rownum, colname, cell)
            )
        return v

    causes, covs, outcome, tiv = [], [], [], []
    n_dropped = 0
    for irow, row in enumerate(rows, start=2):  # header is line 1
        if len(row) != len(header):
            raise DataError(
                "%s: row %d has %d fields, header has %d" % (path, irow, len(row), len(header))
            )
        ycell = row[col_idx[outcome_name]].strip()
        yval = None
        if ycell != "":
            try:
                yval = float(ycell)
            except ValueError:
                yval = None
        if yval is None or not np.isfinite(yval):
            n_dropped += 1
            continue
        outcome.append(yval)
        causes.append([parse(row[col_idx[n]], irow, n) for n in cause_names])
        covs.append([parse(row[col_idx[n]], irow, n) for n in covariate_names])
        if tiv_name is not None:
            tiv.append(parse(row[col_idx[tiv_name]], irow, tiv_name))

    if n_dropped:
        warnings.warn("%s: dropped %d row(s) with missing outcome" % (path, n_dropped))
    if not outcome:
        raise DataError("%s: no usable rows after dropping missing outcomes" % path)

    n = len(outcome)
    return Dataset(
        causes=np.asarray(causes, dtype=np.float64).reshape(n, len(cause_names)),
        covariates=np.asarray(covs, dtype=np.float64).reshape(n, len(covariate_names)),
        outcome=np.asarray(outcome, dtype=np.float64),
        roles={n_: r for n_, r in roles.items() if n_ in header},
        cause_names=tuple(cause_names),
        covariate_names=tuple(covariate_names),
        outcome_name=outcome_name,
        tiv=np.asarray(tiv, dtype=np.float64) if tiv_name is not None else None,
    )


def format_float(v):
    """Render a float so that parsing it back reproduces the exact value."""
    return repr(float(v))


def save_dataset(ds, path):
    """Write a dataset back to CSV with lossless float rendering.

    The column layout is causes, covariates, outcome, then tiv if present;
    loading the file with the same roles reproduces the matrices
    bit-for-bit.
    """
    header = list(ds.cause_names) + list(ds.covariate_names) + [ds.outcome_name]
    if ds.tiv is not None:
        tiv_name = next(n for n, r in ds.roles.items() if r == "tiv")
        header.append(tiv_name)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n_rows):
            row = [format_float(v) for v in ds.causes[i]]
            row += [format_float(v) for v in ds.covariates[i]]
            row.append(format_float(ds.outcome[i]))
            if ds.tiv is not None:
                row.append(format_float(ds.tiv[i]))
            w.writerow(row)


def normalize_by_tiv(ds):
    """Divide volume causes by total intracranial volume, row-wise.

    Thickness causes are left untouched. The tiv column is dropped from
    the returned dataset, it has served its purpose.
    """
    if ds.tiv is None:
        raise DataError("normalize_by_tiv requires a column with role 'tiv'")
    if (ds.tiv <= 0).any():
        bad = int(np.argmax(ds.tiv <= 0))
        raise DataError("tiv must be strictly positive, row %d has %g" % (bad, ds.tiv[bad]))
    vol = np.array([ds.roles[n] == "cause-volume" for n in ds.cause_names])
    if not vol.any():
        raise DataError("normalize_by_tiv requires at least one 'cause-volume' column")
    causes = ds.causes.copy()
    causes[:, vol] = causes[:, vol] / ds.tiv[:, None]
    roles = {n: r for n, r in ds.roles.items() if r != "tiv"}
    return replace(ds, causes=causes, tiv=None, roles=roles)


def standardize(ds):
    """Center and scale every cause and covariate column to mean 0, sd 1.

    Uses the sample standard deviation (ddof=1). Constant columns are
    centered and given scale 1 with a warning. The outcome is left alone.

    Returns
    -------
    (Dataset, ColumnScaling)
        The standardized dataset and the exact inverse transform.
    """

    def scale_block(x, names):
        loc = x.mean(axis=0)
        if x.shape[0] > 1:
            sd = x.std(axis=0, ddof=1)
        else:
            sd = np.zeros(x.shape[1])
        sd = np.asarray(sd, dtype=np.float64)
        const = sd == 0.0
        for j in np.flatnonzero(const):
            warnings.warn("column %r is constant; scale set to 1" % (names[j],))
        sd = np.where(const, 1.0, sd)
        return (x - loc) / sd, loc, sd

    causes, c_loc, c_sd = scale_block(ds.causes, ds.cause_names)
    if ds.n_covariates:
        covs, f_loc, f_sd = scale_block(ds.covariates, ds.covariate_names)
    else:
        covs = ds.covariates
        f_loc = np.zeros(0)
        f_sd = np.ones(0)
    scaling = ColumnScaling(
        cause_location=c_loc,
        cause_scale=c_sd,
        covariate_location=f_loc,
        covariate_scale=f_sd,
        cause_names=tuple(ds.cause_names),
        covariate_names=tuple(ds.covariate_names),
    )
    return replace(ds, causes=causes, covariates=covs), scaling


def _draw_holdout(rng, n, d, n_hold):
    # fixed-count cell sample; repair fully held rows by releasing one of
    # their cells and holding a spare cell elsewhere, keeping the count exact
    for _ in range(100):
        held = np.zeros(n * d, dtype=bool)
        held[rng.permutation(n * d)[:n_hold]] = True
        held = held.reshape(n, d)
        bad = np.flatnonzero(held.all(axis=1))
        if bad.size == 0:
            return held
        for i in bad:
            held[i, rng.integers(d)] = False
        obs = (~held).sum(axis=1)
        for _ in range(bad.size):
            rows_ok = np.flatnonzero(obs >= 2)
            if rows_ok.size == 0:
                break  # no spare capacity, redraw from scratch
            r = int(rows_ok[rng.integers(rows_ok.size)])
            cols = np.flatnonzero(~held[r])
            held[r, cols[rng.integers(cols.size)]] = True
            obs[r] -= 1
        else:
            return held
    raise DataError(
        "could not draw a holdout mask keeping an observed entry in every row; "
        "lower hold_fraction"
    )


def split_holdout(ds, hold_fraction, seed):
    """Split the cause matrix into observed and held-out parts, cell-wise.

    A fixed count ``round(hold_fraction * N * D)`` of cells is held out,
    chosen uniformly at random. Any row that ends up fully held out has
    one of its cells released, so every row keeps at least one observed
    entry for the factor model.

    Returns
    -------
    (MaskedMatrix, MaskedMatrix, HoldoutMask)
        ``x_obs`` (entries where H=0), ``x_holdout`` (entries where H=1),
        and the mask itself.
    """
    if not (0.0 < hold_fraction < 0.5):
        raise ConfigError("hold_fraction must be in (0, 0.5), got %r" % (hold_fraction,))
    n, d = ds.causes.shape
    rng = np.random.default_rng(seed)
    n_hold = int(round(hold_fraction * n * d))
    held = _draw_holdout(rng, n, d, n_hold)
    mask = HoldoutMask(mask=held.astype(np.uint8), hold_fraction=float(hold_fraction), seed=int(seed))
    x_obs = MaskedMatrix(values=ds.causes, observed=~held)
    x_hold = MaskedMatrix(values=ds.causes, observed=held)
    return x_obs, x_hold, mask
