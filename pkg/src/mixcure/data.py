"""Reading, writing and simulating right-censored survival data."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import ConfigurationError, DataError
from .model import INTERCEPT, Dataset, LatencyFamily, ParameterPoint


def _parse_float(text, row, column):
    value = text.strip()
    if value == "" or value.upper() in ("NA", "NAN"):
        raise DataError(f"row {row}: missing value in column {column!r}")
    try:
        out = float(value)
    except ValueError:
        raise DataError(f"row {row}: non-numeric value {text!r} in column {column!r}") from None
    if not math.isfinite(out):
        raise DataError(f"row {row}: non-finite value {text!r} in column {column!r}")
    return out


def read_dataset(path, time_col: str, status_col: str, incidence_cov: Sequence[str] = (),
                 latency_cov: Sequence[str] = (), center: Sequence[str] = (),
                 family=LatencyFamily.WEIBULL_PH, flip_status: bool = False) -> Dataset:
    """Load a comma-separated file with one header row.

    Status must be coded 1 for an observed event and 0 for censoring; pass
    ``flip_status`` for files using the opposite convention.  Both design
    matrices get a leading intercept column.  Columns listed in ``center`` are
    centred on their sample mean, and the means are kept on the dataset.

    Errors name the offending data row (1-based, header excluded).
    """
    LatencyFamily.parse(family)
    path = Path(path)
    wanted = [time_col, status_col]
    for name in list(incidence_cov) + list(latency_cov):
        if name not in wanted:
            wanted.append(name)
    for name in center:
        if name not in incidence_cov and name not in latency_cov:
            raise DataError(f"centred column {name!r} is not used as a covariate")
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty; a header row is required") from None
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"column(s) {missing} not found in header of {path}")
        pos = {c: header.index(c) for c in wanted}
        values = {c: [] for c in wanted}
        for row, record in enumerate(reader, start=1):
            if not record or all(not f.strip() for f in record):
                continue
            if len(record) != len(header):
                raise DataError(f"row {row}: expected {len(header)} fields, found {len(record)}")
            for c in wanted:
                values[c].append(_parse_float(record[pos[c]], row, c))
            t = values[time_col][-1]
            if t <= 0:
                raise DataError(f"row {row}: time must be positive, found {record[pos[time_col]]!r}")
            s = values[status_col][-1]
            if s not in (0.0, 1.0):
                raise DataError(f"row {row}: status must be 0 or 1, found {record[pos[status_col]]!r}")
    if not values[time_col]:
        raise DataError(f"{path} has no data rows")
    cols = {c: np.array(v) for c, v in values.items()}
    status = cols[status_col].astype(np.int8)
    events = 1 - status if flip_status else status
    means = {c: float(cols[c].mean()) for c in center}

    def design(names):
        X = [np.ones(status.size)]
        for c in names:
            X.append(cols[c] - means.get(c, 0.0))
        return np.column_stack(X), (INTERCEPT,) + tuple(names)

    X1, n1 = design(incidence_cov)
    X2, n2 = design(latency_cov)
    return Dataset(cols[time_col], events, X1, X2, n1, n2, means, cols)


def _format(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_dataset(d: Dataset, path, time_col: str = "time", status_col: str = "status") -> None:
    """Write a dataset as comma-separated text to a path or open text handle.

    Raw columns kept from :func:`read_dataset` are written back as read;
    otherwise time, status and the non-intercept design columns are written.
    """
    if d.columns:
        cols = dict(d.columns)
    else:
        cols = {time_col: d.times, status_col: d.events}
        for names, X in ((d.incidence_names, d.X1), (d.latency_names, d.X2)):
            for j, name in enumerate(names):
                if name != INTERCEPT and name not in cols:
                    cols[name] = X[:, j]
    if hasattr(path, "write"):
        _write_rows(path, cols, d.n)
        return
    with open(path, "w", newline="", encoding="utf-8") as handle:
        _write_rows(handle, cols, d.n)


def _write_rows(handle, cols, n):
    w = csv.writer(handle, lineterminator="\n")
    w.writerow(list(cols))
    for i in range(n):
        w.writerow([_format(cols[c][i]) for c in cols])


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class Covariate:
    """Generated covariate: ``kind`` is ``"binary"`` (parameter = P(1)) or ``"normal"`` (parameter = sd)."""

    name: str
    kind: str = "normal"
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in ("binary", "normal"):
            raise ConfigurationError(f"covariate kind must be 'binary' or 'normal', got {self.kind!r}")
        if self.kind == "binary" and not 0.0 <= self.param <= 1.0:
            raise ConfigurationError("binary covariate probability must lie in [0, 1]")
        if self.kind == "normal" and self.param <= 0:
            raise ConfigurationError("normal covariate sd must be positive")


@dataclass(frozen=True)
class Censoring:
    """Censoring time ``min(admin, Exponential(rate))``; ``None`` disables a part."""

    admin: Optional[float] = None
    rate: Optional[float] = None

    def __post_init__(self):
        if self.admin is not None and not self.admin > 0:
            raise ConfigurationError("administrative censoring time must be positive")
        if self.rate is not None and not self.rate > 0:
            raise ConfigurationError("censoring rate must be positive")

    @property
    def infinite(self) -> bool:
        return self.admin is None and self.rate is None

    def describe(self) -> dict:
        return {"admin": self.admin, "rate": self.rate}


@dataclass(frozen=True)
class SimTruth:
    """Everything needed to regenerate a simulated dataset."""

    n: int
    params: ParameterPoint
    z: np.ndarray
    family: LatencyFamily
    censoring: Censoring
    covariates: tuple
    incidence: tuple
    latency: tuple
    seed: int
    alpha: float

    def regenerate(self):
        return simulate(self.n, self.params.beta1, self.params.beta2, self.alpha, self.family,
                        self.censoring, self.covariates, self.incidence, self.latency, self.seed)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "beta1": self.params.beta1.tolist(),
            "beta2": self.params.beta2.tolist(),
            "alpha": self.alpha,
            "family": self.family.value,
            "censoring": self.censoring.describe(),
            "covariates": [[c.name, c.kind, c.param] for c in self.covariates],
            "incidence": list(self.incidence),
            "latency": list(self.latency),
            "seed": self.seed,
            "z": self.z.tolist(),
        }


_LAGUERRE = np.polynomial.laguerre.laggauss(64)


def expected_censored(eta, nu, alpha, censoring: Censoring) -> float:
    """Expected number of censored subjects for given cure probabilities and latency predictors."""
    eta = np.asarray(eta, dtype=float)
    nu = np.asarray(nu, dtype=float)

    def surv(t):
        return np.exp(-np.exp(alpha * np.log(t) + nu[:, None]))

    if censoring.infinite:
        p_cen = np.zeros_like(eta)
    elif censoring.rate is None:
        p_cen = surv(np.array([censoring.admin]))[:, 0]
    else:
        x, w = _LAGUERRE
        s = x / censoring.rate
        if censoring.admin is not None:
            s = np.minimum(s, censoring.admin)
        p_cen = surv(s) @ w
    return float(np.sum(eta + (1.0 - eta) * p_cen))


def simulate(n: int, beta1, beta2, alpha: float, family=LatencyFamily.WEIBULL_PH,
             censoring: Censoring = Censoring(admin=5.0), covariates: Sequence[Covariate] = (),
             incidence: Sequence[str] = (), latency: Sequence[str] = (), seed: int = 0):
    """Draw a dataset from the mixture cure model.

    Covariates listed in ``incidence``/``latency`` (names from ``covariates``)
    follow an intercept in each design.  ``beta1`` and ``beta2`` must match the
    resulting widths.  Returns ``(dataset, truth)``.

    Cured subjects are censored at their censoring time; susceptible subjects
    draw a Weibull event time ``T`` with ``S(t) = exp(-t**alpha exp(beta2 @ x2))``.
    """
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    family = LatencyFamily.parse(family)
    covariates = tuple(covariates)
    known = {c.name: c for c in covariates}
    for name in tuple(incidence) + tuple(latency):
        if name not in known:
            raise ConfigurationError(f"covariate {name!r} is not defined")
    beta1 = np.atleast_1d(np.asarray(beta1, dtype=float))
    beta2 = np.atleast_1d(np.asarray(beta2, dtype=float))
    if beta1.size != 1 + len(incidence) or beta2.size != 1 + len(latency):
        raise ConfigurationError("coefficient lengths must equal 1 + number of covariates per part")

    rng = np.random.default_rng(seed)
    cols = {}
    for c in covariates:
        if c.kind == "binary":
            cols[c.name] = (rng.random(n) < c.param).astype(float)
        else:
            cols[c.name] = rng.normal(0.0, c.param, n)
    X1 = np.column_stack([np.ones(n)] + [cols[c] for c in incidence])
    X2 = np.column_stack([np.ones(n)] + [cols[c] for c in latency])
    with np.errstate(over="ignore"):
        eta = expit(X1 @ beta1)
    nu = X2 @ beta2
    expected = expected_censored(eta, nu, alpha, censoring)
    if expected < 1.0:
        warnings.warn(
            f"expected number of censored subjects is {expected:.3g} < 1; "
            "the cure fraction will not be identifiable",
            stacklevel=2,
        )
    z = (rng.random(n) < eta).astype(np.int8)
    if censoring.infinite and np.any(z == 1):
        raise ConfigurationError("cured subjects need a finite censoring time")
    with np.errstate(over="ignore", divide="ignore"):
        T = np.exp((np.log(rng.exponential(1.0, n)) - nu) / alpha)
    C = np.full(n, np.inf)
    if censoring.rate is not None:
        C = rng.exponential(1.0 / censoring.rate, n)
    if censoring.admin is not None:
        C = np.minimum(C, censoring.admin)
    times = np.maximum(np.where(z == 1, C, np.minimum(T, C)), np.finfo(float).tiny)
    events = np.where(z == 1, 0, (T <= C)).astype(np.int8)

    raw = {"time": times, "status": events.astype(float)}
    raw.update({c.name: cols[c.name] for c in covariates})
    d = Dataset(times, events, X1, X2, (INTERCEPT,) + tuple(incidence), (INTERCEPT,) + tuple(latency),
                {}, raw)
    truth = SimTruth(n, ParameterPoint(beta1, beta2, math.log(alpha)), z, family, censoring,
                     covariates, tuple(incidence), tuple(latency), seed, float(alpha))
    return d, truth
