"""Exact posterior on tiny instances by enumeration and tensor quadrature.

Every configuration of the cure indicators of the censored subjects is
enumerated.  Given ``z`` the posterior factorizes into an incidence block
(``beta1``) and a latency block (``beta2, log_alpha``); each block is
integrated with the trapezoid rule on a tensor grid whose range is grown until
the log density on its boundary has dropped ``tail`` nats below the maximum.

The log joint density is coded here from scratch (vectorized over grid
nodes) so that it stays independent of :mod:`mixcure.model`.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import gammaln, log_expit, logsumexp

from .exceptions import AccuracyWarning, ContractError, RefusalError
from .model import Dataset, LatencyFamily, PriorSpec

MAX_DIM = 4
MAX_CENSORED = 12
_COARSE = 41
_CLIP_MASS = 1e-10


@dataclass(frozen=True)
class OracleResult:
    """Enumeration results.

    ``configs[k]`` holds the cure indicators of the censored subjects (in the
    order of ``censored``) for configuration ``k``; ``log_joint[k]`` is
    ``log p(D, z_k)`` and ``probs[k]`` is ``p(z_k | D)``.  Conditional moments
    are per configuration, the unconditional ones mix them with ``probs``.
    """

    censored: np.ndarray
    configs: np.ndarray
    log_joint: np.ndarray
    probs: np.ndarray
    log_evidence: float
    cond_means: np.ndarray
    cond_sds: np.ndarray
    cond_alpha_means: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    alpha_mean: float
    cure_probs: np.ndarray
    parameter_names: tuple

    def index_of(self, z) -> int:
        """Row of ``configs`` matching a full-length or censored-only assignment."""
        z = np.asarray(z, dtype=int)
        if z.size != self.configs.shape[1]:
            z = z[self.censored]
        hits = np.flatnonzero(np.all(self.configs == z, axis=1))
        if hits.size == 0:
            raise KeyError("assignment not among the enumerated configurations")
        return int(hits[0])

    def z_full(self, k: int, n: int) -> np.ndarray:
        z = np.zeros(n, dtype=int)
        z[self.censored] = self.configs[k]
        return z


class _Block:
    """Vectorized log density of one posterior block (up to additive constants kept)."""

    def __init__(self, logf, dim):
        self.logf = logf
        self.dim = dim

    def scalar(self, x):
        v = self.logf(np.asarray(x, dtype=float)[None, :])[0]
        return -v if np.isfinite(v) else 1e300


def _normal_logpdf(B, means, variances):
    return np.sum(-0.5 * (B - means) ** 2 / variances - 0.5 * np.log(2 * math.pi * variances), axis=1)


def _incidence_block(X1, z, means, variances):
    def logf(B):
        lin = B @ X1.T
        ll = np.sum(np.where(z == 1, log_expit(lin), log_expit(-lin)), axis=1)
        return ll + _normal_logpdf(B, means, variances)

    return _Block(logf, X1.shape[1])


def _latency_block(X2u, t, delta, means, variances, shape, rate):
    p2 = X2u.shape[1]
    logt = np.log(t)
    lp_const = shape * math.log(rate) - gammaln(shape)

    def logf(B):
        beta, rho = B[:, :p2], B[:, p2]
        nu = beta @ X2u.T
        with np.errstate(over="ignore", invalid="ignore"):
            alpha = np.exp(rho)
            cum = np.exp(alpha[:, None] * logt[None, :] + nu)
            ll = np.sum(delta * (rho[:, None] + (alpha[:, None] - 1.0) * logt + nu) - cum, axis=1)
            lp = lp_const + shape * rho - rate * alpha
        out = ll + lp + _normal_logpdf(beta, means, variances)
        return np.where(np.isfinite(out), out, -np.inf)

    return _Block(logf, p2 + 1)


def _fd_hessian(fun, x):
    k = x.size
    H = np.empty((k, k))
    h = 1e-4 * np.maximum(1.0, np.abs(x))
    f0 = fun(x)
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h[i]
            ej[j] = h[j]
            if i == j:
                v = (fun(x + ei) - 2 * f0 + fun(x - ei)) / h[i] ** 2
            else:
                v = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)) / (
                    4 * h[i] * h[j]
                )
            H[i, j] = H[j, i] = v
    return H


def _pilot(block: _Block, x0):
    res = optimize.minimize(block.scalar, x0, method="BFGS", options={"gtol": 1e-9})
    x = res.x
    # polish: the narrow directions of pinned coefficients need Newton steps
    for _ in range(20):
        H = _fd_hessian(block.scalar, x)
        g = optimize.approx_fprime(x, block.scalar, 1e-7 * np.maximum(1.0, np.abs(x)))
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or block.scalar(x - step) > block.scalar(x):
            break
        x = x - step
        if np.max(np.abs(step)) < 1e-10:
            break
    H = _fd_hessian(block.scalar, x)
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    w = np.maximum(w, 1e-12)
    sd = np.sqrt(np.diag((V / w) @ V.T))
    return x, sd


def _axes(lo, hi, n, shift):
    axes = []
    for a, b in zip(lo, hi):
        step = (b - a) / (n - 1)
        axes.append(np.linspace(a, b, n) + shift * step)
    return axes


def _evaluate(block, axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    return nodes, block.logf(nodes).reshape(mesh[0].shape)


def _edge_profiles(logp, axis):
    other = tuple(i for i in range(logp.ndim) if i != axis)
    prof = logp.max(axis=other) if other else logp
    return prof[0], prof[-1]


def _integrate_block(block: _Block, x0, points: int, tail: float, shift: float):
    """Log normalizer, mean, second moment and E[exp(last coordinate)] of a block."""
    mode, sd = _pilot(block, x0)
    lo = mode - 8.0 * sd
    hi = mode + 8.0 * sd
    for _ in range(40):
        _, logp = _evaluate(block, _axes(lo, hi, _COARSE, 0.0))
        top = logp.max()
        grown = False
        for i in range(block.dim):
            left, right = _edge_profiles(logp, i)
            width = hi[i] - lo[i]
            if left > top - tail:
                lo[i] -= 0.5 * width
                grown = True
            if right > top - tail:
                hi[i] += 0.5 * width
                grown = True
        if not grown:
            break
    axes = _axes(lo, hi, points, shift)
    nodes, logp = _evaluate(block, axes)
    logw = np.zeros(logp.shape)
    for i, ax in enumerate(axes):
        w = np.full(ax.size, ax[1] - ax[0])
        w[0] = w[-1] = 0.5 * w[0]
        shape = [1] * block.dim
        shape[i] = ax.size
        logw = logw + np.log(w).reshape(shape)
    lm = logp + logw
    log_z = float(logsumexp(lm))
    wts = np.exp(lm - log_z).ravel()

    edge = np.zeros(logp.shape, dtype=bool)
    for i in range(block.dim):
        sl = [slice(None)] * block.dim
        sl[i] = 0
        edge[tuple(sl)] = True
        sl[i] = -1
        edge[tuple(sl)] = True
    clipped = float(wts[edge.ravel()].sum())
    if clipped > _CLIP_MASS:
        warnings.warn(
            f"quadrature grid boundary carries {clipped:.2e} of the posterior mass",
            AccuracyWarning,
            stacklevel=3,
        )
    mean = wts @ nodes
    second = wts @ nodes**2
    last = nodes[:, -1]
    with np.errstate(over="ignore"):
        exp_last = float(np.exp(logsumexp(lm.ravel() + last) - log_z))
    return log_z, mean, second, exp_last, mode


def enumerate_posterior(d: Dataset, spec: PriorSpec = PriorSpec(), fam=LatencyFamily.WEIBULL_PH,
                        points: int = 321, tail: float = 30.0, shift: float = 0.0) -> OracleResult:
    """Exact posterior over cure configurations and parameters of a tiny instance.

    Parameters
    ----------
    points : int
        Trapezoid nodes per dimension of each block grid.  The default keeps
        heavy-tailed incidence blocks (vague priors, all subjects susceptible)
        self-converged to about 1e-4 in the mean.
    tail : float
        Grid ranges are grown until the boundary log density lies ``tail``
        nats below the block maximum.
    shift : float
        Translate every final grid by this fraction of its step (used for
        self-consistency checks).

    Raises
    ------
    RefusalError
        More than four parameters or more than twelve censored subjects.
    """
    LatencyFamily.parse(fam)  # both families share the likelihood
    if d.dim > MAX_DIM:
        raise RefusalError(f"tensor quadrature declined: {d.dim} parameters (limit {MAX_DIM})")
    cen = d.censored
    if cen.size > MAX_CENSORED:
        raise RefusalError(
            f"enumeration declined: {cen.size} censored subjects (limit {MAX_CENSORED})"
        )
    if points < 3:
        raise ContractError("points must be at least 3")
    p1, p2 = d.p1, d.p2
    mu1, var1 = spec.coef_means(d.dim - 1)[:p1], spec.coef_variances(d.dim - 1)[:p1]
    mu2, var2 = spec.coef_means(d.dim - 1)[p1:], spec.coef_variances(d.dim - 1)[p1:]

    configs = np.array(list(itertools.product((0, 1), repeat=cen.size)), dtype=int).reshape(
        2**cen.size, cen.size)
    K = configs.shape[0]
    dim = d.dim
    log_joint = np.empty(K)
    cmeans = np.empty((K, dim))
    csecond = np.empty((K, dim))
    calpha = np.empty(K)
    start_inc = np.zeros(p1)
    start_lat = np.zeros(p2 + 1)
    for k in range(K):
        z = np.zeros(d.n, dtype=int)
        z[cen] = configs[k]
        inc = _incidence_block(d.X1, z, mu1, var1)
        lz1, m1, s1, _, start_inc = _integrate_block(inc, start_inc, points, tail, shift)
        sus = z == 0
        lat = _latency_block(d.X2[sus], d.times[sus], d.events[sus].astype(float), mu2, var2,
                             spec.shape, spec.rate)
        lz2, m2, s2, ea, start_lat = _integrate_block(lat, start_lat, points, tail, shift)
        log_joint[k] = lz1 + lz2
        cmeans[k] = np.concatenate([m1, m2])
        csecond[k] = np.concatenate([s1, s2])
        calpha[k] = ea

    log_ev = float(logsumexp(log_joint))
    probs = np.exp(log_joint - log_ev)
    probs /= probs.sum()
    means = probs @ cmeans
    second = probs @ csecond
    cure = probs @ configs if cen.size else np.zeros(0)
    return OracleResult(
        censored=cen,
        configs=configs,
        log_joint=log_joint,
        probs=probs,
        log_evidence=log_ev,
        cond_means=cmeans,
        cond_sds=np.sqrt(np.maximum(csecond - cmeans**2, 0.0)),
        cond_alpha_means=calpha,
        means=means,
        sds=np.sqrt(np.maximum(second - means**2, 0.0)),
        alpha_mean=float(probs @ calpha),
        cure_probs=np.asarray(cure, dtype=float),
        parameter_names=d.parameter_names,
    )
