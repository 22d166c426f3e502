"""Univariate posterior marginal densities.

Three building blocks cover every marginal the package reports:

* :class:`GaussianDensity` for Gaussian approximations at a grid point,
* :class:`TabulatedDensity`, a piecewise log-linear density on a node grid,
* :class:`MixtureDensity`, a finite weighted mixture of the above.

:class:`LogScaleDensity` re-expresses a density over ``log a`` as a density
over ``a`` (used for the Weibull shape).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special
from scipy.special import logsumexp

from .exceptions import ContractError

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _expm1_ratio(d):
    """``expm1(d) / d`` with the removable singularity at zero filled in."""
    d = np.asarray(d, dtype=float)
    out = np.ones_like(d)
    big = np.abs(d) > 1e-8
    out[big] = np.expm1(d[big]) / d[big]
    out[~big] = 1.0 + 0.5 * d[~big]
    return out


class Density:
    """Shared summaries; subclasses provide pdf, cdf, mean, var, bounds and log_mgf."""

    def sd(self) -> float:
        return math.sqrt(max(self.var(), 0.0))

    def ppf(self, q: float) -> float:
        if not 0.0 < q < 1.0:
            raise ContractError("quantile level must lie strictly between 0 and 1")
        lo, hi = self.bounds()
        return float(optimize.brentq(lambda x: self.cdf(x) - q, lo, hi, xtol=1e-10, rtol=1e-14))

    def prob_positive(self) -> float:
        return float(1.0 - self.cdf(0.0))

    def interval(self, level: float = 0.95):
        tail = 0.5 * (1.0 - level)
        return self.ppf(tail), self.ppf(1.0 - tail)


@dataclass(frozen=True)
class GaussianDensity(Density):
    loc: float
    scale: float

    def pdf(self, x):
        return np.exp(-0.5 * ((np.asarray(x) - self.loc) / self.scale) ** 2) / (
            self.scale * math.sqrt(2.0 * math.pi)
        )

    def cdf(self, x):
        return special.ndtr((np.asarray(x, dtype=float) - self.loc) / self.scale)

    def ppf(self, q: float) -> float:
        return float(self.loc + self.scale * special.ndtri(q))

    def mean(self) -> float:
        return float(self.loc)

    def var(self) -> float:
        return float(self.scale**2)

    def bounds(self):
        return self.loc - 40.0 * self.scale, self.loc + 40.0 * self.scale

    def log_mgf(self, k: float) -> float:
        return float(k * self.loc + 0.5 * (k * self.scale) ** 2)


class TabulatedDensity(Density):
    """Density whose logarithm is linear between consecutive nodes; zero outside.

    ``log_mass`` keeps the log integral of the unnormalized input.

    Masses, CDF and quantiles are exact for that representation; moments use
    8-point Gauss-Legendre rules on each segment.
    """

    def __init__(self, x, logf):
        x = np.asarray(x, dtype=float)
        y = np.asarray(logf, dtype=float)
        if x.ndim != 1 or x.size < 2 or x.shape != y.shape:
            raise ContractError("need at least two nodes with matching log-density values")
        if np.any(np.diff(x) <= 0):
            raise ContractError("nodes must be strictly increasing")
        if not np.all(np.isfinite(y)):
            raise ContractError("log-density values must be finite")
        ymax = y.max()
        y = y - ymax
        h = np.diff(x)
        seg = h * np.exp(y[:-1]) * _expm1_ratio(np.diff(y))
        total = seg.sum()
        self.log_mass = float(ymax + math.log(total))
        self.x = x
        self.logf = y - math.log(total)
        self._h = h
        self._seg = seg / total
        self._cum = np.concatenate([[0.0], np.cumsum(self._seg)])
        self._cum[-1] = 1.0

        # quadrature nodes for moments
        mid = 0.5 * (x[:-1] + x[1:])
        qx = mid[:, None] + 0.5 * h[:, None] * _GL_NODES[None, :]
        qy = np.interp(qx, x, self.logf)
        self._qx = qx.ravel()
        self._qlogw = (np.log(0.5 * h)[:, None] + np.log(_GL_WEIGHTS)[None, :] + qy).ravel()
        w = np.exp(self._qlogw)
        self._mean = float(w @ self._qx / w.sum())
        self._var = float(w @ (self._qx - self._mean) ** 2 / w.sum())

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.x[0]) & (x <= self.x[-1])
        return np.where(inside, np.exp(np.interp(x, self.x, self.logf)), 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        xc = np.clip(x, self.x[0], self.x[-1])
        i = np.clip(np.searchsorted(self.x, xc, side="right") - 1, 0, self.x.size - 2)
        s = (xc - self.x[i]) / self._h[i]
        d = self.logf[i + 1] - self.logf[i]
        part = self._h[i] * np.exp(self.logf[i]) * s * _expm1_ratio(d * s)
        return np.clip(self._cum[i] + part, 0.0, 1.0)

    def ppf(self, q: float) -> float:
        if not 0.0 < q < 1.0:
            raise ContractError("quantile level must lie strictly between 0 and 1")
        i = int(np.clip(np.searchsorted(self._cum, q, side="right") - 1, 0, self.x.size - 2))
        r = q - self._cum[i]
        a = self._h[i] * math.exp(self.logf[i])
        d = self.logf[i + 1] - self.logf[i]
        if abs(d) < 1e-10:
            s = r / a
        else:
            s = math.log1p(r * d / a) / d
        return float(self.x[i] + min(max(s, 0.0), 1.0) * self._h[i])

    def mean(self) -> float:
        return self._mean

    def var(self) -> float:
        return self._var

    def bounds(self):
        return float(self.x[0]), float(self.x[-1])

    def log_mgf(self, k: float) -> float:
        return float(logsumexp(self._qlogw + k * self._qx) - logsumexp(self._qlogw))


class MixtureDensity(Density):
    """Finite mixture ``sum_k w_k f_k`` of univariate densities."""

    def __init__(self, components, weights):
        weights = np.asarray(weights, dtype=float)
        if len(components) != weights.size or weights.size == 0:
            raise ContractError("need one weight per component")
        if np.any(weights < 0):
            raise ContractError("mixture weights must be non-negative")
        keep = weights > 0
        self.components = [c for c, k in zip(components, keep) if k]
        self.weights = weights[keep] / weights[keep].sum()
        self._gauss = all(isinstance(c, GaussianDensity) for c in self.components)
        if self._gauss:
            self._loc = np.array([c.loc for c in self.components])
            self._scale = np.array([c.scale for c in self.components])

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self._gauss:
            zs = (x[..., None] - self._loc) / self._scale
            return np.exp(-0.5 * zs**2) / (self._scale * math.sqrt(2 * math.pi)) @ self.weights
        return sum(w * c.pdf(x) for w, c in zip(self.weights, self.components))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self._gauss:
            return special.ndtr((x[..., None] - self._loc) / self._scale) @ self.weights
        return sum(w * c.cdf(x) for w, c in zip(self.weights, self.components))

    def mean(self) -> float:
        return float(sum(w * c.mean() for w, c in zip(self.weights, self.components)))

    def var(self) -> float:
        m = self.mean()
        second = sum(w * (c.var() + c.mean() ** 2) for w, c in zip(self.weights, self.components))
        return float(second - m * m)

    def bounds(self):
        b = np.array([c.bounds() for c in self.components])
        return float(b[:, 0].min()), float(b[:, 1].max())

    def log_mgf(self, k: float) -> float:
        return float(
            logsumexp([math.log(w) + c.log_mgf(k) for w, c in zip(self.weights, self.components)])
        )


class LogScaleDensity(Density):
    """Density of ``A = exp(X)`` given a density for ``X``."""

    def __init__(self, base: Density):
        self.base = base

    def pdf(self, a):
        a = np.asarray(a, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(a > 0, self.base.pdf(np.log(np.where(a > 0, a, 1.0))) / a, 0.0)

    def cdf(self, a):
        a = np.asarray(a, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(a > 0, self.base.cdf(np.log(np.where(a > 0, a, 1.0))), 0.0)

    def ppf(self, q: float) -> float:
        return math.exp(self.base.ppf(q))

    def mean(self) -> float:
        return math.exp(self.base.log_mgf(1.0))

    def var(self) -> float:
        return math.exp(self.base.log_mgf(2.0)) - self.mean() ** 2

    def bounds(self):
        lo, hi = self.base.bounds()
        return math.exp(lo), math.exp(hi)

    def prob_positive(self) -> float:
        return 1.0


def summarize(density: Density, level: float = 0.95) -> dict:
    """Mean, sd, equal-tailed interval and ``P(X > 0)`` of a marginal."""
    lo, hi = density.interval(level)
    return {
        "mean": density.mean(),
        "sd": density.sd(),
        "ci_low": lo,
        "ci_high": hi,
        "p_gt_0": density.prob_positive(),
    }
