"""Mixture cure model: incidence, latency, priors and the complete-data likelihood.

The parameter vector used throughout the package is laid out as::

    x = [beta1 (p1 values), beta2 (p2 values), log_alpha]

``beta1`` are logistic incidence coefficients (probability of cure), ``beta2``
latency coefficients entering the Weibull hazard through ``exp(beta2 @ x2)``
and ``log_alpha`` the log of the Weibull shape.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit, gammaln

from .exceptions import ContractError, DataError, DomainError

INTERCEPT = "(Intercept)"
LOG2PI = math.log(2.0 * math.pi)


class LatencyFamily(str, enum.Enum):
    """Latency model for the susceptible subpopulation."""

    WEIBULL_PH = "weibull-ph"
    WEIBULL_AFT = "weibull-aft"

    @classmethod
    def parse(cls, value) -> "LatencyFamily":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ContractError(
                f"unknown latency family {value!r}; expected one of "
                f"{[f.value for f in cls]}"
            ) from None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Right-censored survival data with incidence and latency design matrices.

    ``events`` uses 1 for an observed event and 0 for a right-censored time.
    """

    times: np.ndarray
    events: np.ndarray
    X1: np.ndarray
    X2: np.ndarray
    incidence_names: tuple = ()
    latency_names: tuple = ()
    centering: Mapping[str, float] = field(default_factory=dict)
    columns: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        events = np.asarray(self.events)
        n = times.shape[0]
        X1 = np.asarray(self.X1, dtype=float).reshape(n, -1)
        X2 = np.asarray(self.X2, dtype=float).reshape(n, -1)
        if events.shape != (n,):
            raise DataError(f"events has shape {events.shape}, expected ({n},)")
        if not np.all(np.isfinite(times)) or np.any(times <= 0):
            raise DataError("all times must be finite and strictly positive")
        if not np.all(np.isin(events, (0, 1))):
            raise DataError("event indicators must be 0 (censored) or 1 (event)")
        for name, X in (("X1", X1), ("X2", X2)):
            if not np.all(np.isfinite(X)):
                raise DataError(f"{name} contains non-finite entries")
        names1 = tuple(self.incidence_names) or tuple(f"x1_{j}" for j in range(X1.shape[1]))
        names2 = tuple(self.latency_names) or tuple(f"x2_{j}" for j in range(X2.shape[1]))
        if len(names1) != X1.shape[1] or len(names2) != X2.shape[1]:
            raise DataError("column name count does not match design matrix width")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "events", events.astype(np.int8))
        object.__setattr__(self, "X1", X1)
        object.__setattr__(self, "X2", X2)
        object.__setattr__(self, "incidence_names", names1)
        object.__setattr__(self, "latency_names", names2)
        if n >= 2:
            for names, X, part in ((names1, X1, "incidence"), (names2, X2, "latency")):
                for j, name in enumerate(names):
                    col = X[:, j]
                    if name != INTERCEPT and np.ptp(col) == 0.0 and col[0] != 1.0:
                        warnings.warn(
                            f"{part} covariate {name!r} is constant; only the prior "
                            "identifies its coefficient",
                            stacklevel=3,
                        )

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def p1(self) -> int:
        return self.X1.shape[1]

    @property
    def p2(self) -> int:
        return self.X2.shape[1]

    @property
    def dim(self) -> int:
        """Length of the full parameter vector (coefficients plus log shape)."""
        return self.p1 + self.p2 + 1

    @property
    def censored(self) -> np.ndarray:
        """Indices of right-censored subjects."""
        return np.flatnonzero(self.events == 0)

    @property
    def n_cen(self) -> int:
        return int(np.sum(self.events == 0))

    @property
    def n_unc(self) -> int:
        return int(np.sum(self.events == 1))

    @property
    def parameter_names(self) -> list:
        return (
            [f"{name}[incidence]" for name in self.incidence_names]
            + [f"{name}[latency]" for name in self.latency_names]
            + ["log_alpha"]
        )

    def take(self, index) -> "Dataset":
        """Return the subjects at ``index`` (any integer index array) as a new dataset."""
        index = np.asarray(index, dtype=int)
        return Dataset(
            self.times[index],
            self.events[index],
            self.X1[index],
            self.X2[index],
            self.incidence_names,
            self.latency_names,
            dict(self.centering),
            {k: np.asarray(v)[index] for k, v in self.columns.items()},
        )


@dataclass(frozen=True)
class ParameterPoint:
    beta1: np.ndarray
    beta2: np.ndarray
    log_alpha: float

    def __post_init__(self):
        object.__setattr__(self, "beta1", np.atleast_1d(np.asarray(self.beta1, dtype=float)))
        object.__setattr__(self, "beta2", np.atleast_1d(np.asarray(self.beta2, dtype=float)))
        object.__setattr__(self, "log_alpha", float(self.log_alpha))

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta1, self.beta2, [self.log_alpha]])

    @classmethod
    def from_vector(cls, x, p1: int) -> "ParameterPoint":
        x = np.asarray(x, dtype=float)
        return cls(x[:p1], x[p1:-1], x[-1])


@dataclass(frozen=True)
class PriorSpec:
    """Independent Normal priors on coefficients and a Gamma(shape, rate) prior on alpha.

    ``means`` and ``variances`` optionally override the common ``variance``
    coefficient by coefficient (in parameter-vector order, excluding log alpha).
    A very small variance effectively pins a coefficient.
    """

    variance: float = 1000.0
    shape: float = 0.01
    rate: float = 0.01
    means: Optional[Sequence[float]] = None
    variances: Optional[Sequence[float]] = None

    def __post_init__(self):
        if not (self.variance > 0 and self.shape > 0 and self.rate > 0):
            raise ContractError("prior variance, shape and rate must all be positive")
        if self.variances is not None and np.any(np.asarray(self.variances) <= 0):
            raise ContractError("per-coefficient prior variances must be positive")

    def coef_means(self, p: int) -> np.ndarray:
        if self.means is None:
            return np.zeros(p)
        m = np.asarray(self.means, dtype=float)
        if m.shape != (p,):
            raise ContractError(f"prior means have length {m.size}, expected {p}")
        return m

    def coef_variances(self, p: int) -> np.ndarray:
        if self.variances is None:
            return np.full(p, float(self.variance))
        v = np.asarray(self.variances, dtype=float)
        if v.shape != (p,):
            raise ContractError(f"prior variances have length {v.size}, expected {p}")
        return v


# ---------------------------------------------------------------------------
# pointwise model quantities


def _linear_predictor(beta, x) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != beta.shape[0]:
        raise ContractError(
            f"covariate length {x.shape[-1]} does not match {beta.shape[0]} coefficients"
        )
    return x @ beta


def incidence_prob(beta1, x1):
    """Cure probability ``eta`` under the logistic link."""
    return expit(_linear_predictor(beta1, x1))


def log_incidence_prob(beta1, x1):
    """``log(eta)`` without forming ``eta``."""
    return -np.logaddexp(0.0, -_linear_predictor(beta1, x1))


def log_susceptible_prob(beta1, x1):
    """``log(1 - eta)``; stays strictly negative where ``eta`` rounds to 1."""
    return -np.logaddexp(0.0, _linear_predictor(beta1, x1))


def _check_times(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise DomainError("survival time must be strictly positive")
    return t


def log_latency_survival(t, p: ParameterPoint, x2, fam=LatencyFamily.WEIBULL_PH):
    """``log S_u(t) = -t**alpha * exp(beta2 @ x2)`` for both Weibull families."""
    LatencyFamily.parse(fam)
    t = _check_times(t)
    nu = _linear_predictor(p.beta2, x2)
    return -np.exp(p.alpha * np.log(t) + nu)


def latency_survival(t, p: ParameterPoint, x2, fam=LatencyFamily.WEIBULL_PH):
    """Survival of the susceptible subpopulation.

    The PH and AFT families share the hazard ``alpha t**(alpha-1) exp(beta2 @ x2)``;
    under AFT this is the Weibull regression ``log T = -sigma beta2 @ x2 + sigma G``
    with ``sigma = 1/alpha`` and ``G`` a standard minimum-Gumbel error.
    """
    return np.exp(log_latency_survival(t, p, x2, fam))


def latency_hazard(t, p: ParameterPoint, x2, fam=LatencyFamily.WEIBULL_PH):
    LatencyFamily.parse(fam)
    t = _check_times(t)
    nu = _linear_predictor(p.beta2, x2)
    return p.alpha * np.exp((p.alpha - 1.0) * np.log(t) + nu)


def population_survival(t, p: ParameterPoint, x1, x2, fam=LatencyFamily.WEIBULL_PH):
    """Improper population survival ``eta + (1 - eta) S_u(t)``."""
    eta = incidence_prob(p.beta1, x1)
    return eta + (1.0 - eta) * latency_survival(t, p, x2, fam)


def aft_log_time_params(p: ParameterPoint, x2):
    """Location and scale of ``log T`` for the AFT reading of the latency model."""
    sigma = 1.0 / p.alpha
    return -sigma * _linear_predictor(p.beta2, x2), sigma


def log_prior(p: ParameterPoint, spec: PriorSpec = PriorSpec()) -> float:
    """Log prior density of ``(beta1, beta2, log_alpha)``.

    Includes the ``log_alpha`` Jacobian of the Gamma prior on ``alpha``.
    """
    beta = np.concatenate([p.beta1, p.beta2])
    m = spec.coef_means(beta.size)
    v = spec.coef_variances(beta.size)
    normal = -0.5 * np.sum((beta - m) ** 2 / v + np.log(v) + LOG2PI)
    return float(normal + _log_shape_prior(p.log_alpha, spec))


def _log_shape_prior(rho: float, spec: PriorSpec) -> float:
    a, b = spec.shape, spec.rate
    return a * math.log(b) - gammaln(a) + a * rho - b * math.exp(rho)


def check_assignment(data: Dataset, z) -> np.ndarray:
    """Validate a latent cure assignment and return it as an int8 array."""
    z = np.asarray(z)
    if z.shape != (data.n,):
        raise ContractError(f"assignment has shape {z.shape}, expected ({data.n},)")
    if not np.all(np.isin(z, (0, 1))):
        raise ContractError("cure indicators must be 0 or 1")
    if np.any(z[data.events == 1] != 0):
        raise ContractError("subjects with an observed event must have z = 0")
    return z.astype(np.int8)


# ---------------------------------------------------------------------------
# complete-data posterior


class CompleteDataPosterior:
    """Log posterior of ``x`` given the data and a fixed cure assignment ``z``.

    Given ``z`` the density factorizes into an incidence block (``beta1``,
    a logistic regression of ``z`` on ``X1``) and a latency block
    (``beta2``, ``log_alpha``, a Weibull regression over susceptible subjects).
    """

    def __init__(self, data: Dataset, z, prior: PriorSpec = PriorSpec(),
                 family=LatencyFamily.WEIBULL_PH):
        self.data = data
        self.z = check_assignment(data, z)
        self.prior = prior
        self.family = LatencyFamily.parse(family)
        self.p1, self.p2 = data.p1, data.p2
        self.dim = data.dim
        self.inc = slice(0, self.p1)
        self.lat = slice(self.p1, self.p1 + self.p2)
        self.rho = self.dim - 1

        self._zf = self.z.astype(float)
        susceptible = self.z == 0
        self._X2u = data.X2[susceptible]
        self._logt = np.log(data.times[susceptible])
        self._delta = data.events[susceptible].astype(float)
        self._n_events = float(self._delta.sum())
        self._delta_logt = float(self._delta @ self._logt)
        self._delta_X2 = self._delta @ self._X2u

        self._m = prior.coef_means(self.p1 + self.p2)
        self._v = prior.coef_variances(self.p1 + self.p2)
        self._normal_const = -0.5 * float(np.sum(np.log(self._v) + LOG2PI))

    # -- pieces ---------------------------------------------------------------

    def incidence_loglik(self, beta1) -> float:
        u = self.data.X1 @ beta1
        return float(-(self._zf @ np.logaddexp(0.0, -u)) - (1.0 - self._zf) @ np.logaddexp(0.0, u))

    def latency_loglik(self, beta2, rho) -> float:
        alpha = math.exp(rho)
        nu = self._X2u @ beta2
        with np.errstate(over="ignore"):
            cumhaz = np.exp(alpha * self._logt + nu)
        return float(
            self._n_events * rho
            + (alpha - 1.0) * self._delta_logt
            + self._delta_X2 @ beta2
            - cumhaz.sum()
        )

    def log_prior(self, x) -> float:
        beta = x[: self.rho]
        return float(
            -0.5 * np.sum((beta - self._m) ** 2 / self._v)
            + self._normal_const
            + _log_shape_prior(x[self.rho], self.prior)
        )

    # -- whole density --------------------------------------------------------

    def loglik(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return self.incidence_loglik(x[self.inc]) + self.latency_loglik(x[self.lat], x[self.rho])

    def logpdf(self, x) -> float:
        """Unnormalized log posterior; ``-inf`` where the density under/overflows."""
        x = np.asarray(x, dtype=float)
        if x[self.rho] > 700:
            return -math.inf
        value = self.loglik(x) + self.log_prior(x)
        return value if math.isfinite(value) else -math.inf

    def incidence_vgh(self, beta1):
        """Incidence block: log-likelihood plus coefficient log prior, gradient, Hessian."""
        beta1 = np.asarray(beta1, dtype=float)
        X1 = self.data.X1
        u = X1 @ beta1
        m, v = self._m[self.inc], self._v[self.inc]
        f = float(
            -(self._zf @ np.logaddexp(0.0, -u))
            - (1.0 - self._zf) @ np.logaddexp(0.0, u)
            - 0.5 * np.sum((beta1 - m) ** 2 / v)
        )
        eta = expit(u)
        g = X1.T @ (self._zf - eta) - (beta1 - m) / v
        H = -(X1.T * (eta * (1.0 - eta))) @ X1
        H[np.diag_indices_from(H)] -= 1.0 / v
        return f, g, H

    def latency_vgh(self, beta2, rho):
        """Latency block over ``(beta2, log_alpha)``: value, gradient, Hessian.

        The value includes the coefficient and shape log priors (up to the
        normalizing constants added by :meth:`logpdf`).
        """
        beta2 = np.asarray(beta2, dtype=float)
        p2 = self.p2
        alpha = math.exp(rho)
        X2u = self._X2u
        aL = alpha * self._logt
        m, v = self._m[self.lat], self._v[self.lat]
        a, b = self.prior.shape, self.prior.rate
        g = np.empty(p2 + 1)
        H = np.empty((p2 + 1, p2 + 1))
        with np.errstate(over="ignore", invalid="ignore"):
            cumhaz = np.exp(aL + X2u @ beta2)
            f = float(
                self._n_events * rho
                + (alpha - 1.0) * self._delta_logt
                + self._delta_X2 @ beta2
                - cumhaz.sum()
                - 0.5 * np.sum((beta2 - m) ** 2 / v)
                + a * rho
                - b * alpha
            )
            g[:p2] = self._delta_X2 - X2u.T @ cumhaz - (beta2 - m) / v
            H[:p2, :p2] = -(X2u.T * cumhaz) @ X2u
            H[np.arange(p2), np.arange(p2)] -= 1.0 / v
            cross = -X2u.T @ (cumhaz * aL)
            H[:p2, p2] = cross
            H[p2, :p2] = cross
            g[p2] = self._n_events + alpha * self._delta_logt - cumhaz @ aL + a - b * alpha
            H[p2, p2] = alpha * self._delta_logt - cumhaz @ (aL * (aL + 1.0)) - b * alpha
        if not math.isfinite(f):
            f = -math.inf
        return f, g, H

    def value_grad_hess(self, x):
        """Log posterior with its analytic gradient and Hessian at ``x``."""
        x = np.asarray(x, dtype=float)
        g = np.zeros(self.dim)
        H = np.zeros((self.dim, self.dim))
        _, g[self.inc], H[self.inc, self.inc] = self.incidence_vgh(x[self.inc])
        lat = slice(self.p1, self.dim)
        _, g[lat], H[lat, lat] = self.latency_vgh(x[self.lat], x[self.rho])
        return self.logpdf(x), g, H


def complete_loglik(p: ParameterPoint, d: Dataset, z, fam=LatencyFamily.WEIBULL_PH) -> float:
    """Complete-data log-likelihood ``log p(t, delta, z | beta1, beta2, alpha)``."""
    post = CompleteDataPosterior(d, z, PriorSpec(), fam)
    return post.loglik(p.vector())


def loglik_grad_hess(p: ParameterPoint, d: Dataset, z, spec: PriorSpec = PriorSpec(),
                     fam=LatencyFamily.WEIBULL_PH):
    """Gradient and Hessian of complete log-likelihood plus log prior at ``p``.

    Returns ``(gradient, hessian)`` over ``(beta1, beta2, log_alpha)``.
    """
    _, g, H = CompleteDataPosterior(d, z, spec, fam).value_grad_hess(p.vector())
    return g, H
