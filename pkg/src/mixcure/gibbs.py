"""Modal Gibbs sampling of the cure indicators with Laplace fits in between.

Each iteration fits the posterior given the current assignment ``z``, takes
the conditional mode, and redraws the indicator of every censored subject
from its full conditional evaluated at that mode.  Subjects with an observed
event stay susceptible (``z = 0``) throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_expit

from .exceptions import (
    ChainError,
    ConfigurationError,
    ContractError,
    CurvatureError,
    GridError,
    OptimizerError,
)
from .laplace import STRATEGIES, ConditionalFit, LaplaceConfig, default_start, fit_posterior
from .marginals import Density, LogScaleDensity, MixtureDensity, summarize
from .model import CompleteDataPosterior, Dataset, LatencyFamily, ParameterPoint, PriorSpec

MAX_REJECTIONS = 10
AUTO_LAPLACE_MAX_N = 100


@dataclass(frozen=True)
class GibbsConfig:
    """Chain length, seeding and Laplace settings.

    ``q0`` is the probability that a censored subject starts out cured.
    ``strategy`` selects the marginal approximation (see
    :mod:`mixcure.laplace`); ``"auto"`` uses ``"laplace"`` up to
    ``AUTO_LAPLACE_MAX_N`` subjects and ``"gaussian"`` beyond.
    """

    burnin: int = 50
    keep: int = 90
    thin: int = 5
    seed: int = 1
    grid_size: int = 15
    q0: float = 0.5
    strategy: str = "auto"

    def __post_init__(self):
        if self.keep < 1:
            raise ConfigurationError("keep must be at least 1")
        if self.thin < 1:
            raise ConfigurationError("thin must be at least 1")
        if self.burnin < 0:
            raise ConfigurationError("burnin must be non-negative")
        if not 0.0 <= self.q0 <= 1.0:
            raise ConfigurationError("q0 must lie in [0, 1]")
        if self.strategy not in STRATEGIES + ("auto",):
            raise ConfigurationError(f"strategy must be 'auto' or one of {STRATEGIES}")
        LaplaceConfig(grid_size=self.grid_size)

    @property
    def iterations(self) -> int:
        return self.burnin + self.keep * self.thin

    def laplace_config(self, n: int) -> LaplaceConfig:
        """Laplace settings; ``"auto"`` profiles the marginals only for small samples."""
        strategy = self.strategy
        if strategy == "auto":
            strategy = "laplace" if n <= AUTO_LAPLACE_MAX_N else "gaussian"
        return LaplaceConfig(grid_size=self.grid_size, strategy=strategy)


# ---------------------------------------------------------------------------
# full conditional of the cure indicators


def cure_full_conditional(t, delta, eta, s_u):
    """Probability that a censored subject is susceptible (``Z = 0``).

    ``(1 - eta) S_u / (eta + (1 - eta) S_u)`` with ``eta`` the cure probability
    and ``S_u`` the latency survival at the censoring time ``t``.
    """
    delta = np.asarray(delta)
    if np.any(delta != 0):
        raise ContractError("the cure full conditional applies to censored subjects only")
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ContractError("censoring times must be positive")
    eta = np.asarray(eta, dtype=float)
    s_u = np.asarray(s_u, dtype=float)
    if np.any((eta <= 0) | (eta >= 1)):
        raise ContractError("eta must lie strictly between 0 and 1")
    if np.any((s_u < 0) | (s_u > 1)):
        raise ContractError("S_u must lie in [0, 1]")
    num = (1.0 - eta) * s_u
    out = num / (eta + num)
    return float(out) if out.ndim == 0 else out


def susceptible_probs(data: Dataset, x, idx=None) -> np.ndarray:
    """``P(Z_i = 0 | x, D)`` for the censored subjects ``idx`` at parameter vector ``x``.

    Works on the log scale so saturated ``eta`` or vanishing ``S_u`` stay exact.
    This is the code path shared by the modal Gibbs driver and the MCMC sampler.
    """
    idx = data.censored if idx is None else idx
    p1, p2 = data.p1, data.p2
    x = np.asarray(x, dtype=float)
    lin = data.X1[idx] @ x[:p1]
    log_su = -np.exp(math.exp(x[-1]) * np.log(data.times[idx]) + data.X2[idx] @ x[p1:p1 + p2])
    # logit P(Z=0) = log(1-eta) + log S_u - log(eta) = -lin + log S_u
    return np.exp(log_expit(log_su - lin))


def draw_assignment(data: Dataset, x, u, idx=None) -> np.ndarray:
    """New ``z`` given uniforms ``u`` for the censored subjects; events stay at 0."""
    idx = data.censored if idx is None else idx
    z = np.zeros(data.n, dtype=np.int8)
    z[idx] = u >= susceptible_probs(data, x, idx)
    return z


# ---------------------------------------------------------------------------
# chain


@dataclass
class Chain:
    """Output of :func:`run_chain`.

    ``z_samples[k]`` is the ``k``-th kept assignment and ``fits[k]`` its
    conditional fit (fits are shared between identical assignments).
    ``cml_trace`` has one entry per iteration, NaN where the iteration was
    rejected.
    """

    data: Dataset
    prior: PriorSpec
    family: LatencyFamily
    config: GibbsConfig
    z_samples: np.ndarray
    fits: list
    cml_trace: np.ndarray
    rejected: np.ndarray
    kept_iterations: np.ndarray
    failures: list = field(default_factory=list)

    @property
    def keep(self) -> int:
        return len(self.fits)

    @property
    def kept_cml(self) -> np.ndarray:
        return np.array([f.cml for f in self.fits])

    @property
    def cure_probs(self) -> np.ndarray:
        """Posterior cure probability per subject (zero for observed events)."""
        return self.z_samples.mean(axis=0)

    @property
    def most_likely(self) -> int:
        """Index of the kept sample with the largest cml; ties go to the earliest."""
        return int(np.argmax(self.kept_cml))

    @property
    def most_likely_fit(self) -> ConditionalFit:
        return self.fits[self.most_likely]

    def unique_assignments(self):
        """Distinct kept assignments, first-seen order, with their counts."""
        keys = {}
        for k, z in enumerate(self.z_samples):
            key = z.tobytes()
            if key in keys:
                keys[key][1] += 1
            else:
                keys[key] = [k, 1]
        first = np.array([v[0] for v in keys.values()])
        counts = np.array([v[1] for v in keys.values()])
        return first, counts

    def configuration_frequencies(self) -> dict:
        """Empirical distribution of the censored-subject indicators as ``{tuple: freq}``."""
        cen = self.data.censored
        first, counts = self.unique_assignments()
        return {
            tuple(int(v) for v in self.z_samples[k][cen]): c / self.keep
            for k, c in zip(first, counts)
        }


def _attempt_fit(post, starts, cfg):
    last = None
    for x0 in starts:
        try:
            return fit_posterior(post, cfg, x0), None
        except (OptimizerError, CurvatureError, GridError) as exc:
            last = exc
    return None, last


def run_chain(d: Dataset, spec: PriorSpec = PriorSpec(), fam=LatencyFamily.WEIBULL_PH,
              cfg: GibbsConfig = GibbsConfig(), z0=None) -> Chain:
    """Run the modal Gibbs sampler.

    Parameters
    ----------
    d, spec, fam
        Data, prior and latency family.
    cfg : GibbsConfig
        Chain settings; the run is a deterministic function of them.
    z0 : array, optional
        Starting assignment; drawn from ``Bernoulli(cfg.q0)`` when omitted.

    Raises
    ------
    ConfigurationError
        No censored subject in the data.
    ChainError
        More than ten consecutive iterations whose Laplace fit failed.
    """
    fam = LatencyFamily.parse(fam)
    cen = d.censored
    if cen.size == 0:
        raise ConfigurationError(
            "no censored subjects: the cure fraction is not identifiable; "
            "fit a model without a cure component instead"
        )
    rng = np.random.default_rng(cfg.seed)
    lcfg = cfg.laplace_config(d.n)
    if z0 is None:
        z = np.zeros(d.n, dtype=np.int8)
        z[cen] = rng.random(cen.size) < cfg.q0
    else:
        z = CompleteDataPosterior(d, z0, spec, fam).z.astype(np.int8)

    cache = {}
    total = cfg.iterations
    trace = np.full(total, np.nan)
    rejected = np.zeros(total, dtype=bool)
    kept_z, kept_fits, kept_it = [], [], []
    failures = []
    prev_mode = None
    last_fit = None
    streak = 0
    for m in range(total):
        key = z.tobytes()
        fit = cache.get(key)
        if fit is None:
            post = CompleteDataPosterior(d, z, spec, fam)
            starts = [default_start(post)] if prev_mode is None else [prev_mode, default_start(post)]
            starts.append(np.zeros(d.dim))
            fit, err = _attempt_fit(post, starts, lcfg)
            if fit is not None:
                cache[key] = fit
        u = rng.random(cen.size)
        if fit is None:
            rejected[m] = True
            streak += 1
            failures.append({"iteration": m, "error": str(err), "z_cen": z[cen].tolist()})
            if streak > MAX_REJECTIONS:
                raise ChainError(
                    f"{streak} consecutive iterations failed to fit the conditional posterior",
                    diagnostics={"iteration": m, "failures": failures[-streak:]},
                )
            if last_fit is None:
                z = np.zeros(d.n, dtype=np.int8)
                z[cen] = u < cfg.q0
            else:
                z = draw_assignment(d, last_fit.mode, u, cen)
            continue
        streak = 0
        trace[m] = fit.cml
        if m >= cfg.burnin and (m - cfg.burnin) % cfg.thin == cfg.thin - 1:
            kept_z.append(z.copy())
            kept_fits.append(fit)
            kept_it.append(m)
        prev_mode = fit.mode
        last_fit = fit
        z = draw_assignment(d, fit.mode, u, cen)

    if not kept_fits:
        raise ChainError("no iteration after burn-in produced a usable fit",
                         diagnostics={"failures": failures})
    return Chain(d, spec, fam, cfg, np.array(kept_z, dtype=np.int8), kept_fits, trace, rejected,
                 np.array(kept_it), failures)


# ---------------------------------------------------------------------------
# posterior summaries


@dataclass
class PosteriorMarginals:
    """Averaged marginals: one density per coefficient plus ``alpha`` (last)."""

    names: list
    densities: list

    def __getitem__(self, name) -> Density:
        return self.densities[self.names.index(name)]

    def summary(self, level: float = 0.95) -> list:
        return [dict(parameter=n, **summarize(dens, level)) for n, dens in zip(self.names, self.densities)]


def average_marginals(chain: Chain) -> PosteriorMarginals:
    """Equal-weight average of the kept samples' conditional marginals."""
    if chain.keep == 0:
        raise ContractError("chain has no kept samples")
    first, counts = chain.unique_assignments()
    fits = [chain.fits[k] for k in first]
    names = list(chain.data.parameter_names[:-1]) + ["alpha"]
    dens = []
    for j in range(chain.data.dim - 1):
        comps = [f.marginal(j) for f in fits]
        dens.append(comps[0] if len(comps) == 1 else MixtureDensity(comps, counts))
    la = [f.log_alpha_marginal for f in fits]
    dens.append(LogScaleDensity(la[0] if len(la) == 1 else MixtureDensity(la, counts)))
    return PosteriorMarginals(names, dens)


def converged(trace, min_length: int = 20, spread: float = 3.0, max_slope: float = 0.01):
    """Stability check on the last quarter of a cml trace.

    The window is stable when it shows no trend, meaning the least-squares
    slope is below ``max_slope`` nats per iteration or within three standard
    errors of zero, and no level shift, meaning the medians of its two halves
    differ by less than ``spread`` nats or by less than three standard errors
    of that difference.  Medians keep rare single-subject flips (several nats
    each, even at stationarity) from reading as a shift.

    Returns ``(ok, stats)`` with the window bounds, range, slope, its
    standard error, the residual sd and the half-median shift.
    """
    trace = np.asarray(trace, dtype=float)
    if trace.size < min_length:
        raise ContractError(f"need at least {min_length} iterations, got {trace.size}")
    start = trace.size - max(trace.size // 4, 2)
    window = trace[start:]
    it = np.arange(start, trace.size, dtype=float)
    ok_vals = np.isfinite(window)
    stats = {"window_start": int(start), "window_end": int(trace.size), "range": math.nan,
             "slope": math.nan, "slope_se": math.nan, "resid_sd": math.nan, "shift": math.nan}
    if ok_vals.sum() < 3:
        return False, stats
    w, t = window[ok_vals], it[ok_vals]
    tc = t - t.mean()
    slope = float(tc @ (w - w.mean()) / (tc @ tc))
    resid = w - w.mean() - slope * tc
    resid_sd = float(math.sqrt(resid @ resid / (w.size - 2)))
    se = resid_sd / math.sqrt(tc @ tc)
    half = w.size // 2
    shift = float(abs(np.median(w[half:]) - np.median(w[:half])))
    # sd of a difference of two medians of m/2 points each, normal approximation
    shift_se = 1.2533 * resid_sd * math.sqrt(4.0 / w.size)
    stats.update(range=float(w.max() - w.min()), slope=slope, slope_se=se, resid_sd=resid_sd,
                 shift=shift)
    flat = abs(slope) < max_slope or abs(slope) < 3.0 * se
    tight = shift < spread or shift < 3.0 * shift_se
    return bool(flat and tight), stats


@dataclass
class DerivedQuantities:
    profiles: list
    times: np.ndarray
    cure_draws: np.ndarray
    survival_mean: np.ndarray

    def cure_summary(self, level: float = 0.95) -> list:
        tail = 50.0 * (1.0 - level)
        rows = []
        for name, draws in zip(self.profiles, self.cure_draws):
            lo, hi = np.percentile(draws, [tail, 100.0 - tail])
            rows.append({"profile": name, "mean": float(draws.mean()), "sd": float(draws.std(ddof=1)),
                         "ci_low": float(lo), "ci_high": float(hi)})
        return rows


def sample_fit(fit: ConditionalFit, n: int, rng) -> np.ndarray:
    """Joint draws from a fit: grid point by weight, then its Gaussian for the coefficients."""
    g = fit.grid
    m = rng.choice(g.size, size=n, p=g.weights / g.weights.sum())
    k = g.means.shape[1]
    out = np.empty((n, k + 1))
    chol = [np.linalg.cholesky(c) for c in g.covs]
    eps = rng.standard_normal((n, k))
    for i in range(n):
        out[i, :k] = g.means[m[i]] + chol[m[i]] @ eps[i]
    out[:, k] = g.points[m]
    return out


def derived_quantities(chain: Chain, profiles: Sequence, times, n_draws: int = 1000, seed: int = 0,
                       average: bool = False) -> DerivedQuantities:
    """Cure proportions and uncured survival curves per covariate profile.

    ``profiles`` is a sequence of ``(name, x1, x2)`` rows.  Draws come from
    the most likely kept configuration, or from every kept fit in proportion
    to its count when ``average`` is set.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(times <= 0):
        raise ContractError("time grid must be a 1-D array of positive values")
    rng = np.random.default_rng(seed)
    if average:
        first, counts = chain.unique_assignments()
        alloc = rng.multinomial(n_draws, counts / counts.sum())
        draws = np.vstack([sample_fit(chain.fits[k], a, rng) for k, a in zip(first, alloc) if a > 0])
    else:
        draws = sample_fit(chain.most_likely_fit, n_draws, rng)
    return quantities_from_draws(draws, chain.data.p1, chain.data.p2, profiles, times)


def quantities_from_draws(draws, p1: int, p2: int, profiles: Sequence, times) -> DerivedQuantities:
    """Cure proportion draws and mean uncured survival per ``(name, x1, x2)`` profile."""
    times = np.asarray(times, dtype=float)
    draws = np.asarray(draws, dtype=float)
    names, cure, surv = [], [], []
    logt = np.log(times)
    for name, x1, x2 in profiles:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        if x1.size != p1 or x2.size != p2:
            raise ContractError(f"profile {name!r} does not match the design dimensions")
        names.append(name)
        cure.append(np.exp(log_expit(draws[:, :p1] @ x1)))
        nu = draws[:, p1:p1 + p2] @ x2
        alpha = np.exp(draws[:, -1])
        surv.append(np.exp(-np.exp(alpha[:, None] * logt[None, :] + nu[:, None])).mean(axis=0))
    return DerivedQuantities(names, times, np.array(cure), np.array(surv))
