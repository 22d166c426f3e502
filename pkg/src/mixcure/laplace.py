"""Laplace approximation of the posterior given a fixed cure assignment.

Given ``z`` the coefficients ``beta = (beta1, beta2)`` are integrated with a
Gaussian (Laplace) approximation at each point of a one-dimensional grid over
``log_alpha``; the grid itself is integrated numerically with trapezoid
weights.  Two strategies are available for coefficient marginals:

``"gaussian"``
    a mixture over grid points of the Gaussian approximations;
``"laplace"``
    the Gaussian density corrected, coefficient by coefficient, by the ratio
    of the exact log posterior profiled over the remaining coefficients to
    its Gaussian approximation (with the usual log-determinant term).  This
    removes the skewness error that dominates on small samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.special import logsumexp

from .exceptions import ConfigurationError, CurvatureError, GridError, OptimizerError
from .marginals import GaussianDensity, LogScaleDensity, MixtureDensity, TabulatedDensity
from .model import (
    LOG2PI,
    CompleteDataPosterior,
    Dataset,
    LatencyFamily,
    ParameterPoint,
    PriorSpec,
)

STRATEGIES = ("gaussian", "laplace")


@dataclass(frozen=True)
class LaplaceConfig:
    grid_size: int = 15
    span: float = 4.0
    strategy: str = "laplace"
    tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        if self.grid_size < 1 or self.grid_size % 2 == 0:
            raise ConfigurationError("grid_size must be a positive odd number")
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}")
        if self.span <= 0:
            raise ConfigurationError("span must be positive")


@dataclass
class NewtonResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    hess: np.ndarray
    iterations: int


def _newton_direction(g, H):
    Q = -H
    try:
        L = np.linalg.cholesky(Q)
        return np.linalg.solve(L.T, np.linalg.solve(L, g))
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (Q + Q.T))
        floor = 1e-8 * max(1.0, float(np.max(np.abs(w))))
        w = np.maximum(np.abs(w), floor)
        return V @ ((V.T @ g) / w)


def newton_maximize(vgh: Callable, x0, value: Optional[Callable] = None,
                    tol: float = 1e-8, max_iter: int = 100, max_step: float = 20.0) -> NewtonResult:
    """Maximize a smooth function with damped Newton steps.

    ``vgh(x)`` returns ``(value, gradient, hessian)``; ``value(x)``, if given,
    is a cheaper value-only evaluation used in the backtracking line search.
    Iteration stops once the gradient max-norm drops below ``tol``.
    """
    value = value or (lambda x: vgh(x)[0])
    x = np.array(x0, dtype=float)
    f, g, H = vgh(x)
    if not math.isfinite(f):
        raise OptimizerError("objective is not finite at the starting point", x=x)
    for it in range(max_iter + 1):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm < tol:
            return NewtonResult(x, f, g, H, it)
        if it == max_iter:
            break
        d = _newton_direction(g, H)
        big = float(np.max(np.abs(d)))
        if big > max_step:
            d *= max_step / big
        slope = float(g @ d)
        t = 1.0
        accepted = False
        while t > 1e-10:
            x_new = x + t * d
            f_new = value(x_new)
            if f_new >= f + 1e-4 * t * slope - 1e-12 * (1.0 + abs(f)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # near the optimum the value stops resolving; fall back on the gradient
            x_new = x + d
            f_new, g_new, H_new = vgh(x_new)
            if math.isfinite(f_new) and np.max(np.abs(g_new)) < gnorm:
                x, f, g, H = x_new, f_new, g_new, H_new
                continue
            raise OptimizerError(f"line search failed with gradient norm {gnorm:.3g}", x=x)
        x = x_new
        f, g, H = vgh(x)
    raise OptimizerError(
        f"no convergence after {max_iter} Newton iterations "
        f"(gradient norm {float(np.max(np.abs(g))):.3g})",
        x=x,
    )


def _chol_logdet(Q, what: str, x=None) -> float:
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise CurvatureError(f"negative Hessian {what} is not positive definite", x=x) from None
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def default_start(post: CompleteDataPosterior) -> np.ndarray:
    """Crude starting point: intercepts from empirical rates, slopes at zero."""
    data = post.data
    x = np.zeros(post.dim)
    ones1 = np.flatnonzero(np.all(data.X1 == 1.0, axis=0)) if data.n else []
    if len(ones1):
        frac = (post.z.sum() + 0.5) / (data.n + 1.0)
        x[ones1[0]] = math.log(frac / (1.0 - frac))
    ones2 = np.flatnonzero(np.all(data.X2 == 1.0, axis=0)) if data.n else []
    susceptible = post.z == 0
    if len(ones2) and susceptible.any():
        events = data.events[susceptible].sum() + 0.5
        exposure = data.times[susceptible].sum()
        x[post.p1 + ones2[0]] = math.log(events / exposure)
    return x


def _joint_mode(post: CompleteDataPosterior, x0, cfg: LaplaceConfig):
    res = newton_maximize(post.value_grad_hess, x0, post.logpdf, cfg.tol, cfg.max_iter)
    Q = -res.hess
    _chol_logdet(Q, "at the joint mode", res.x)
    return res, Q


def find_mode(d: Dataset, z, spec: PriorSpec = PriorSpec(), fam=LatencyFamily.WEIBULL_PH,
              init: Optional[ParameterPoint] = None, tol: float = 1e-8, max_iter: int = 100):
    """Posterior mode given ``z`` and the negative Hessian there.

    Raises :class:`OptimizerError` when Newton iterations do not converge and
    :class:`CurvatureError` when the terminal negative Hessian is indefinite.
    """
    post = CompleteDataPosterior(d, z, spec, fam)
    x0 = default_start(post) if init is None else init.vector()
    res, Q = _joint_mode(post, x0, LaplaceConfig(tol=tol, max_iter=max_iter))
    return ParameterPoint.from_vector(res.x, d.p1), Q


@dataclass(frozen=True)
class HyperGrid:
    """Quadrature over ``log_alpha`` with per-point Gaussian fits of the coefficients.

    ``log_density`` is the Laplace approximation of ``log p(D, z, log_alpha)``
    at each point, ``log_weights`` the normalized log quadrature masses
    (density times trapezoid width).
    """

    points: np.ndarray
    log_weights: np.ndarray
    log_density: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    step: float

    @property
    def size(self) -> int:
        return self.points.size

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def _trapezoid_log_widths(M: int, step: float) -> np.ndarray:
    w = np.full(M, step)
    if M > 1:
        w[0] = w[-1] = 0.5 * step
    return np.log(w)


def _build_grid(post: CompleteDataPosterior, x_hat, Q, cfg: LaplaceConfig):
    M = cfg.grid_size
    k = post.dim - 1
    cov = np.linalg.inv(Q)
    sd_rho = math.sqrt(cov[k, k])
    offsets = np.linspace(-cfg.span, cfg.span, M) if M > 1 else np.zeros(1)
    points = x_hat[k] + offsets * sd_rho
    step = float(points[1] - points[0]) if M > 1 else 1.0
    slope = cov[:k, k] / cov[k, k]

    means = np.empty((M, k))
    covs = np.empty((M, k, k))
    log_density = np.empty(M)
    center = M // 2
    order = [(center, None)]
    order += [(m, m - 1) for m in range(center + 1, M)]
    order += [(m, m + 1) for m in range(center - 1, -1, -1)]
    for m, prev in order:
        rho = points[m]
        if prev is None:
            start = x_hat[:k]
        else:
            start = means[prev] + slope * (rho - points[prev])

        def vgh(beta, rho=rho):
            f, g, H = post.value_grad_hess(np.append(beta, rho))
            return f, g[:k], H[:k, :k]

        try:
            res = newton_maximize(vgh, start, lambda b, rho=rho: post.logpdf(np.append(b, rho)),
                                  cfg.tol, cfg.max_iter)
            Qb = -res.hess
            logdet = _chol_logdet(Qb, f"at log_alpha = {rho:.6g}", res.x)
        except (OptimizerError, CurvatureError) as exc:
            raise GridError(f"profile fit failed at grid point {m} (log_alpha = {rho:.6g}): {exc}",
                            point=m) from exc
        means[m] = res.x
        covs[m] = np.linalg.inv(Qb)
        log_density[m] = res.value + 0.5 * (k * LOG2PI - logdet)

    log_mass = log_density + _trapezoid_log_widths(M, step)
    cml = float(logsumexp(log_mass))
    grid = HyperGrid(points, log_mass - cml, log_density, means, covs, step)
    return grid, cml


def build_hyper_grid(d: Dataset, z, spec: PriorSpec = PriorSpec(), fam=LatencyFamily.WEIBULL_PH,
                     M: int = 15, span: float = 4.0, init: Optional[ParameterPoint] = None) -> HyperGrid:
    """Grid over ``log_alpha`` centred at the joint mode, spanning ``span`` marginal sds."""
    cfg = LaplaceConfig(grid_size=M, span=span)
    post = CompleteDataPosterior(d, z, spec, fam)
    x0 = default_start(post) if init is None else init.vector()
    res, Q = _joint_mode(post, x0, cfg)
    return _build_grid(post, res.x, Q, cfg)[0]


class ConditionalFit:
    """Laplace fit of the posterior for one cure assignment.

    Coefficient marginals are built lazily on first request and cached.  With
    the ``"laplace"`` strategy the grid weights and ``cml`` include the
    profile correction along the first coefficient of each block, and
    ``base_cml`` keeps the plain Gaussian-level estimate.
    """

    def __init__(self, posterior: CompleteDataPosterior, mode, neg_hessian, grid: HyperGrid,
                 cml: float, config: LaplaceConfig, iterations: int = 0):
        self.posterior = posterior
        self.mode = np.asarray(mode)
        self.neg_hessian = np.asarray(neg_hessian)
        self.grid = grid
        self.cml = cml
        self.base_cml = cml
        self.config = config
        self.iterations = iterations
        self._marginals = {}
        if config.strategy == "laplace":
            self._apply_profile_correction()

    @property
    def z(self) -> np.ndarray:
        return self.posterior.z

    @property
    def dim(self) -> int:
        return self.posterior.dim

    @property
    def mode_point(self) -> ParameterPoint:
        return ParameterPoint.from_vector(self.mode, self.posterior.p1)

    def gaussian_marginal(self, j: int) -> MixtureDensity:
        g = self.grid
        comps = [GaussianDensity(g.means[m, j], math.sqrt(g.covs[m, j, j])) for m in range(g.size)]
        return MixtureDensity(comps, g.weights)

    def marginal(self, j: int):
        """Posterior marginal of coefficient ``j`` (parameter-vector order)."""
        if not 0 <= j < self.dim - 1:
            raise IndexError(f"coefficient index {j} out of range")
        if j not in self._marginals:
            if self.config.strategy == "gaussian":
                self._marginals[j] = self.gaussian_marginal(j)
            else:
                self._marginals[j] = _laplace_marginal(self, j)
        return self._marginals[j]

    @cached_property
    def log_alpha_marginal(self) -> TabulatedDensity:
        g = self.grid
        if g.size == 1:
            sd = math.sqrt(np.linalg.inv(self.neg_hessian)[-1, -1])
            s = np.linspace(-8.0, 8.0, 321)
            return TabulatedDensity(g.points[0] + s * sd, -0.5 * s**2)
        log_dens = g.log_weights - _trapezoid_log_widths(g.size, g.step)
        fine = np.linspace(g.points[0], g.points[-1], 20 * (g.size - 1) + 1)
        spline = CubicSpline(g.points, log_dens)
        return TabulatedDensity(fine, spline(fine))

    @property
    def alpha_marginal(self) -> LogScaleDensity:
        return LogScaleDensity(self.log_alpha_marginal)

    def _apply_profile_correction(self):
        post, grid, cfg = self.posterior, self.grid, self.config
        p1, p2 = post.p1, post.p2
        centre = grid.size // 2
        inc_density, inc_corr = _corrected_density(
            post.incidence_vgh, grid.means[centre, :p1], grid.covs[centre, :p1, :p1], 0, cfg)
        lat_corr = np.zeros(grid.size)
        lat_comps = []
        if p2 > 0:
            for m in range(grid.size):
                lat_density, lat_corr[m] = _latency_density(post, grid, m, 0, cfg)
                lat_comps.append(lat_density)
        log_density = grid.log_density + inc_corr + lat_corr
        log_mass = log_density + _trapezoid_log_widths(grid.size, grid.step)
        cml = float(logsumexp(log_mass))
        self.grid = HyperGrid(grid.points, log_mass - cml, log_density, grid.means, grid.covs,
                              grid.step)
        self.cml = cml
        self._marginals[0] = inc_density
        if p2 > 0:
            self._marginals[p1] = MixtureDensity(lat_comps, self.grid.weights)


def fit_conditional(d: Dataset, z, spec: PriorSpec = PriorSpec(), fam=LatencyFamily.WEIBULL_PH,
                    config: LaplaceConfig = LaplaceConfig(), init=None) -> ConditionalFit:
    """Mode, hyperparameter grid and conditional marginal log-likelihood for one ``z``."""
    post = CompleteDataPosterior(d, z, spec, fam)
    return fit_posterior(post, config, init)


def fit_posterior(post: CompleteDataPosterior, config: LaplaceConfig = LaplaceConfig(),
                  init=None) -> ConditionalFit:
    if init is None:
        x0 = default_start(post)
    elif isinstance(init, ParameterPoint):
        x0 = init.vector()
    else:
        x0 = np.asarray(init, dtype=float)
    res, Q = _joint_mode(post, x0, config)
    grid, cml = _build_grid(post, res.x, Q, config)
    return ConditionalFit(post, res.x, Q, grid, cml, config, res.iterations)


def marginal_of(fit: ConditionalFit, j: int):
    return fit.marginal(j)


def marginal_of_alpha(fit: ConditionalFit) -> LogScaleDensity:
    return fit.alpha_marginal


def conditional_mloglik(fit: ConditionalFit) -> float:
    """Laplace estimate of ``log p(D, z)``, the evidence of the complete data."""
    return fit.cml


# ---------------------------------------------------------------------------
# profile-corrected coefficient marginals

_NODE_STEP = 0.5
_MIN_REACH = 5.0
_MAX_REACH = 30.0
_TAIL_DROP = 12.5
_FINE_STEP = 0.05
_REFINE_ROUNDS = 6
_REFINE_TOL = 2e-3
_MIN_STEP = 0.5 / 32


def _profile_log_density(vgh, mu, Sigma, j, cfg: LaplaceConfig):
    """Profile-corrected log density of coordinate ``j`` on standardized nodes.

    Returns nodes ``s`` (in Gaussian sd units) and log density values.
    """
    p = mu.size
    sd = math.sqrt(Sigma[j, j])
    others = np.array([i for i in range(p) if i != j], dtype=int)
    slope = Sigma[others, j] / Sigma[j, j]

    def evaluate(s, start):
        full = np.empty(p)
        full[j] = mu[j] + s * sd

        def sub(bo):
            full[others] = bo
            f, g, H = vgh(full)
            return f, g[others], H[np.ix_(others, others)]

        if others.size == 0:
            return vgh(full)[0], start
        res = newton_maximize(sub, start, lambda bo: sub(bo)[0], cfg.tol * 10, cfg.max_iter)
        logdet = _chol_logdet(-res.hess, "in a profile fit", res.x)
        return res.value - 0.5 * logdet, res.x

    centre, sol0 = evaluate(0.0, mu[others])
    nodes = {0.0: (centre, sol0)}
    best = centre
    for direction in (1.0, -1.0):
        sol = sol0
        s = 0.0
        while True:
            s_next = s + direction * _NODE_STEP
            if abs(s_next) > _MAX_REACH:
                break
            start = sol + slope * direction * _NODE_STEP * sd
            try:
                val, sol = evaluate(s_next, start)
            except (OptimizerError, CurvatureError):
                break
            if not math.isfinite(val):
                break
            nodes[s_next] = (val, sol)
            best = max(best, val)
            s = s_next
            if abs(s) >= _MIN_REACH and val < best - _TAIL_DROP:
                break

    # bisect intervals where two interpolants of the correction disagree
    for _ in range(_REFINE_ROUNDS):
        s = np.array(sorted(nodes))
        if s.size < 4:
            break
        vals = np.array([nodes[k][0] for k in s])
        c = vals + 0.5 * s**2
        mid = 0.5 * (s[:-1] + s[1:])
        gap = np.abs(PchipInterpolator(s, c)(mid) - CubicSpline(s, c)(mid))
        relevant = np.maximum(vals[:-1], vals[1:]) > best - _TAIL_DROP
        todo = np.flatnonzero(relevant & (gap > _REFINE_TOL) & (np.diff(s) > _MIN_STEP))
        if todo.size == 0:
            break
        for i in todo:
            near = s[i] if vals[i] >= vals[i + 1] else s[i + 1]
            start = nodes[near][1] + slope * (mid[i] - near) * sd
            try:
                val, sol = evaluate(mid[i], start)
            except (OptimizerError, CurvatureError):
                continue
            if math.isfinite(val):
                nodes[float(mid[i])] = (val, sol)
                best = max(best, val)
    s = np.array(sorted(nodes))
    vals = np.array([nodes[k][0] for k in s])
    return s, vals, sd


def _corrected_density(vgh, mu, Sigma, j, cfg: LaplaceConfig):
    """Profile-corrected marginal of coordinate ``j`` and its log evidence correction.

    The correction is ``log`` of the ratio between the integral that is exact
    along ``j`` (Laplace in the remaining coordinates) and the plain Laplace
    integral.
    """
    s, vals, sd = _profile_log_density(vgh, mu, Sigma, j, cfg)
    if s.size < 4:
        return GaussianDensity(mu[j], sd), 0.0
    correction = PchipInterpolator(s, vals - vals[s == 0.0][0] + 0.5 * s**2)
    fine = np.arange(s[0], s[-1] + 0.5 * _FINE_STEP, _FINE_STEP)
    fine[-1] = min(fine[-1], s[-1])
    density = TabulatedDensity(mu[j] + fine * sd, -0.5 * fine**2 + correction(fine))
    return density, density.log_mass - math.log(sd) - 0.5 * LOG2PI


def _latency_density(post, grid, m, jl, cfg):
    p1, p2 = post.p1, post.p2
    mu = grid.means[m, p1:]
    Sigma = grid.covs[m, p1:, p1:]
    if grid.log_weights[m] < math.log(1e-12):
        return GaussianDensity(mu[jl], math.sqrt(Sigma[jl, jl])), 0.0
    rho = grid.points[m]

    def vgh(beta2):
        f, g, H = post.latency_vgh(beta2, rho)
        return f, g[:p2], H[:p2, :p2]

    return _corrected_density(vgh, mu, Sigma, jl, cfg)


def _laplace_marginal(fit: ConditionalFit, j: int):
    post = fit.posterior
    grid = fit.grid
    cfg = fit.config
    p1 = post.p1
    if j < p1:
        # the incidence block does not depend on log_alpha: one density serves every grid point
        m = grid.size // 2
        return _corrected_density(post.incidence_vgh, grid.means[m, :p1],
                                  grid.covs[m, :p1, :p1], j, cfg)[0]
    comps = [_latency_density(post, grid, m, j - p1, cfg)[0] for m in range(grid.size)]
    return MixtureDensity(comps, grid.weights)
