"""Reference Metropolis-within-Gibbs sampler for the mixture cure posterior.

Each sweep redraws the cure indicators of the censored subjects from their
exact full conditional at the current parameters, then updates every
coefficient and ``log_alpha`` in turn with a Gaussian random-walk Metropolis
step.  Step sizes adapt toward an acceptance rate of 0.44 during burn-in only.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import gammaln, log_expit

from .exceptions import ConfigurationError, ContractError
from .gibbs import draw_assignment, susceptible_probs
from .laplace import LaplaceConfig, _joint_mode, default_start
from .model import CompleteDataPosterior, Dataset, LatencyFamily, PriorSpec

TARGET_ACCEPT = 0.44
_BATCH = 50


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 3
    iters: int = 20000
    burnin: int = 5000
    thin: Optional[int] = None
    seed: int = 1
    max_draws: int = 3000
    workers: int = 1

    def __post_init__(self):
        if self.chains < 2:
            raise ConfigurationError("at least two chains are needed for the PSRF")
        if self.iters <= self.burnin:
            raise ConfigurationError("iters must exceed burnin")
        if self.burnin < 0:
            raise ConfigurationError("burnin must be non-negative")
        if self.thin is not None and self.thin < 1:
            raise ConfigurationError("thin must be at least 1")

    @property
    def effective_thin(self) -> int:
        if self.thin is not None:
            return self.thin
        return max(1, math.ceil((self.iters - self.burnin) / self.max_draws))


@dataclass
class McmcResult:
    """Kept draws with shape ``(chains, draws, dim)`` plus diagnostics.

    ``z_draws`` holds the censored subjects' indicators; ``psrf`` and ``ess``
    are per parameter.  ``converged`` is False when any PSRF exceeds 1.1.
    """

    names: list
    draws: np.ndarray
    z_draws: Optional[np.ndarray]
    psrf: np.ndarray
    ess: np.ndarray
    acceptance: np.ndarray
    scales: np.ndarray
    config: McmcConfig

    @property
    def converged(self) -> bool:
        return bool(np.all(self.psrf <= 1.1))

    @property
    def pooled(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    def means(self) -> np.ndarray:
        return self.pooled.mean(axis=0)

    def sds(self) -> np.ndarray:
        return self.pooled.std(axis=0, ddof=1)

    def mcse(self) -> np.ndarray:
        return self.sds() / np.sqrt(self.ess)

    def alpha_draws(self) -> np.ndarray:
        return np.exp(self.pooled[:, -1])

    def summary(self, level: float = 0.95) -> list:
        """Rows of mean, sd, interval and ``P(> 0)``; the last parameter is reported as ``alpha``."""
        tail = 50.0 * (1.0 - level)
        rows = []
        pooled = self.pooled
        for j, name in enumerate(self.names):
            x = pooled[:, j]
            if j == len(self.names) - 1:
                x, name = np.exp(x), "alpha"
            lo, hi = np.percentile(x, [tail, 100.0 - tail])
            rows.append({"parameter": name, "mean": float(x.mean()), "sd": float(x.std(ddof=1)),
                         "ci_low": float(lo), "ci_high": float(hi),
                         "p_gt_0": float(np.mean(x > 0))})
        return rows

    def cure_probs(self) -> Optional[np.ndarray]:
        if self.z_draws is None:
            return None
        return self.z_draws.reshape(-1, self.z_draws.shape[-1]).mean(axis=0)


# ---------------------------------------------------------------------------
# diagnostics


def _check_chains(chains, min_length):
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2:
        raise ContractError("expected a (chains, draws) array")
    if x.shape[0] < 2:
        raise ContractError("need at least two chains")
    if x.shape[1] < min_length:
        raise ContractError(f"chains must have at least {min_length} draws")
    return x


def psrf(chains) -> float:
    """Split-chain potential scale reduction factor.

    ``chains`` is a sequence of equal-length draw sequences.  Returns 1.0 when
    every draw is identical.
    """
    try:
        x = np.asarray(chains, dtype=float)
    except ValueError:
        raise ContractError("chains must have equal lengths") from None
    x = _check_chains(x, 10)
    half = x.shape[1] // 2
    split = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    m, n = split.shape
    means = split.mean(axis=1)
    W = split.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W <= 0.0:
        return 1.0 if B <= 0.0 else math.inf
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def _autocorr(x):
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov


def ess(chains) -> float:
    """Effective sample size across chains (Geyer initial positive sequence)."""
    x = _check_chains(chains, 4)
    m, n = x.shape
    acov = np.array([_autocorr(c) for c in x])
    W = acov[:, 0].mean() * n / (n - 1)
    if W <= 0.0:
        return float(m * n)
    means = x.mean(axis=1)
    var_plus = W * (n - 1) / n + (means.var(ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        total += pair
        t += 2
    tau = max(-1.0 + 2.0 * total, 1.0 / math.log10(m * n + 10))
    return float(m * n / tau)


# ---------------------------------------------------------------------------
# sampler


class _CureTarget:
    """Log posterior split into an incidence block and a latency block.

    A coordinate update only needs the block it belongs to and its own prior
    term, which keeps a sweep at two likelihood evaluations per coordinate.
    """

    def __init__(self, d: Dataset, spec: PriorSpec):
        self.d = d
        self.p1, self.p2 = d.p1, d.p2
        k = d.dim - 1
        self.mu = spec.coef_means(k)
        self.var = spec.coef_variances(k)
        self.a, self.b = spec.shape, spec.rate
        self.logt = np.log(d.times)
        self.delta = d.events.astype(float)
        self.shape_const = self.a * math.log(self.b) - gammaln(self.a)
        self.nblocks = 2

    def block(self, j):
        return 0 if j < self.p1 else 1

    def value(self, b, x, z):
        if b == 0:
            lin = self.d.X1 @ x[:self.p1]
            return float(np.sum(np.where(z == 1, log_expit(lin), log_expit(-lin))))
        rho = x[-1]
        if rho > 700:
            return -math.inf
        alpha = math.exp(rho)
        nu = self.d.X2 @ x[self.p1:self.p1 + self.p2]
        with np.errstate(over="ignore", invalid="ignore"):
            val = float(np.sum((1 - z) * (self.delta * (rho + (alpha - 1.0) * self.logt + nu)
                                          - np.exp(alpha * self.logt + nu))))
        return val if math.isfinite(val) else -math.inf

    def prior(self, x, j):
        if j == x.size - 1:
            return self.shape_const + self.a * x[j] - self.b * math.exp(min(x[j], 700.0))
        return -0.5 * (x[j] - self.mu[j]) ** 2 / self.var[j]


class _InjectedTarget:
    nblocks = 1

    def __init__(self, log_target):
        self.log_target = log_target

    def block(self, j):
        return 0

    def value(self, b, x, z):
        return float(self.log_target(x))

    def prior(self, x, j):
        return 0.0


def _adapt(log_scale, rate, batch):
    # Robbins-Monro step on the log scale; adaptation stops after burn-in,
    # so the gain need not vanish fast
    return log_scale + 2.0 * (rate - TARGET_ACCEPT) / math.sqrt(batch)


def _run_sweeps(rng, x0, scales, cfg: McmcConfig, target, z_step=None, z0=None):
    """One componentwise random-walk chain; ``z_step(x, rng)`` redraws the indicators."""
    x = np.array(x0, dtype=float)
    dim = x.size
    z = z0
    log_scale = np.log(np.asarray(scales, dtype=float))
    thin = cfg.effective_thin
    n_keep = (cfg.iters - cfg.burnin) // thin
    draws = np.empty((n_keep, dim))
    zs = None
    accepted = np.zeros(dim)
    batch_acc = np.zeros(dim)
    blocks = [target.block(j) for j in range(dim)]
    kept = 0
    for it in range(cfg.iters):
        if z_step is not None:
            z, z_cen = z_step(x, rng)
            if zs is None:
                zs = np.empty((n_keep, z_cen.size), dtype=np.int8)
        current = [target.value(b, x, z) for b in range(target.nblocks)]
        steps = rng.standard_normal(dim) * np.exp(log_scale)
        logu = np.log(rng.random(dim))
        for j in range(dim):
            b = blocks[j]
            old = x[j]
            old_prior = target.prior(x, j)
            x[j] = old + steps[j]
            new = target.value(b, x, z)
            if logu[j] < new - current[b] + target.prior(x, j) - old_prior:
                current[b] = new
                batch_acc[j] += 1
                if it >= cfg.burnin:
                    accepted[j] += 1
            else:
                x[j] = old
        if it < cfg.burnin and (it + 1) % _BATCH == 0:
            log_scale = _adapt(log_scale, batch_acc / _BATCH, (it + 1) // _BATCH)
            batch_acc[:] = 0
        if it >= cfg.burnin and (it - cfg.burnin) % thin == thin - 1 and kept < n_keep:
            draws[kept] = x
            if zs is not None:
                zs[kept] = z_cen
            kept += 1
    rate = accepted / max(cfg.iters - cfg.burnin, 1)
    return draws[:kept], (zs[:kept] if zs is not None else None), rate, np.exp(log_scale)


def _model_chain(args):
    d, spec, x0, scales, cfg, seed = args
    rng = np.random.default_rng(seed)
    cen = d.censored

    def z_step(x, rng):
        z = draw_assignment(d, x, rng.random(cen.size), cen)
        return z, z[cen]

    return _run_sweeps(rng, x0, scales, cfg, _CureTarget(d, spec), z_step,
                       np.zeros(d.n, dtype=np.int8))


def _pilot(d: Dataset, spec: PriorSpec, fam, rounds: int = 5):
    """Starting point: alternate conditional modes with the most probable assignment."""
    z = np.zeros(d.n, dtype=np.int8)
    z[d.censored] = 1
    x = None
    cfg = LaplaceConfig()
    for _ in range(rounds):
        post = CompleteDataPosterior(d, z, spec, fam)
        res, Q = _joint_mode(post, default_start(post) if x is None else x, cfg)
        x = res.x
        z_new = np.zeros(d.n, dtype=np.int8)
        z_new[d.censored] = susceptible_probs(d, x) < 0.5
        if np.array_equal(z_new, z):
            break
        z = z_new
    return x, np.sqrt(np.diag(np.linalg.inv(Q)))


def run_mcmc(d: Dataset, spec: PriorSpec = PriorSpec(), fam=LatencyFamily.WEIBULL_PH,
             cfg: McmcConfig = McmcConfig(), log_target: Optional[Callable] = None,
             x0=None, scales=None) -> McmcResult:
    """Sample the posterior with ``cfg.chains`` independent chains.

    Parameters
    ----------
    log_target : callable, optional
        Replaces the model posterior by ``log_target(x)``; then ``x0`` must be
        given and no cure indicators are sampled.  Used to check the sampler
        on targets with known moments.
    x0, scales : array, optional
        Common starting point (each chain is jittered around it) and initial
        random-walk step sizes.
    """
    fam = LatencyFamily.parse(fam)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    if log_target is not None:
        if x0 is None:
            raise ContractError("x0 is required with an injected target")
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        scales = np.ones_like(x0) if scales is None else np.asarray(scales, dtype=float)
        names = [f"x{i}" for i in range(x0.size)]
        results = []
        for s in seeds:
            rng = np.random.default_rng(s)
            start = x0 + scales * rng.standard_normal(x0.size)
            results.append(_run_sweeps(rng, start, 2.4 * scales, cfg, _InjectedTarget(log_target)))
    else:
        if x0 is None or scales is None:
            mode, sd = _pilot(d, spec, fam)
            x0 = mode if x0 is None else np.asarray(x0, dtype=float)
            scales = sd if scales is None else np.asarray(scales, dtype=float)
        names = list(d.parameter_names)
        jobs = []
        for s in seeds:
            rng = np.random.default_rng(s)
            start = x0 + scales * rng.standard_normal(x0.size)
            jobs.append((d, spec, start, 2.4 * scales, cfg, s))
        if cfg.workers > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(_model_chain, jobs))
        else:
            results = [_model_chain(job) for job in jobs]

    draws = np.array([r[0] for r in results])
    zd = None if results[0][1] is None else np.array([r[1] for r in results])
    acc = np.array([r[2] for r in results])
    sc = np.array([r[3] for r in results])
    dim = draws.shape[-1]
    r_hat = np.array([psrf(draws[:, :, j]) for j in range(dim)])
    n_eff = np.array([ess(draws[:, :, j]) for j in range(dim)])
    return McmcResult(names, draws, zd, r_hat, n_eff, acc, sc, cfg)
