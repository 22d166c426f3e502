"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 convergence failure
(results are still written and flagged in the manifest).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import Censoring, Covariate, read_dataset, simulate, write_dataset
from .exceptions import (
    ChainError,
    ConfigurationError,
    ContractError,
    DataError,
    MixCureError,
    RefusalError,
)
from .gibbs import (
    GibbsConfig,
    average_marginals,
    converged,
    derived_quantities,
    quantities_from_draws,
    run_chain,
)
from .mcmc import McmcConfig, run_mcmc
from .model import INTERCEPT, LatencyFamily, PriorSpec
from .oracle import enumerate_posterior
from .report import (
    summary_from_draws,
    summary_table,
    survival_grid,
    write_manifest,
    write_outputs,
    write_table,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _names(text):
    return [c.strip() for c in text.split(",") if c.strip()] if text else []


def _floats(flag):
    def parse(text):
        try:
            return [float(v) for v in text.split(",")]
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects comma-separated numbers, got {text!r}")

    return parse


def _data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", required=True, help="comma-separated input file with a header row")
    g.add_argument("--time-col", default="time", help="column holding follow-up times (default: time)")
    g.add_argument("--status-col", default="status",
                   help="column holding the status, 1 = event, 0 = censored (default: status)")
    g.add_argument("--flip-status", action="store_true",
                   help="the status column uses 1 = censored, 0 = event")
    g.add_argument("--incidence-cov", default="", help="comma-separated incidence covariates")
    g.add_argument("--latency-cov", default="", help="comma-separated latency covariates")
    g.add_argument("--center", default="", help="comma-separated covariates to centre on their mean")
    g.add_argument("--family", default="weibull-ph", choices=[f.value for f in LatencyFamily],
                   help="latency family (default: weibull-ph)")
    g.add_argument("--prior-var", type=float, default=1000.0,
                   help="variance of the normal coefficient priors (default: 1000)")
    g.add_argument("--out", required=True, help="output directory")


def _gibbs_flags(p):
    g = p.add_argument_group("modal Gibbs")
    g.add_argument("--burnin", type=int, default=50, help="burn-in iterations (default: 50)")
    g.add_argument("--keep", type=int, default=90, help="kept samples (default: 90)")
    g.add_argument("--thin", type=int, default=5, help="keep one iteration in THIN (default: 5)")
    g.add_argument("--grid-size", type=int, default=15,
                   help="odd number of log-shape grid points (default: 15)")
    g.add_argument("--strategy", default="auto", choices=["auto", "gaussian", "laplace"],
                   help="marginal approximation (default: auto)")
    g.add_argument("--seed", type=int, default=1, help="random seed (default: 1)")
    g.add_argument("--profile", action="append", default=[], metavar="NAME:COV=VAL,...",
                   help="covariate profile for cure proportions and survival curves; "
                        "unlisted covariates are 0 on the (centred) design scale; repeatable")
    g.add_argument("--draws", type=int, default=1000,
                   help="posterior draws for derived quantities (default: 1000)")
    g.add_argument("--time-points", type=int, default=50,
                   help="points on the survival time grid (default: 50)")
    g.add_argument("--average-configs", action="store_true",
                   help="draw derived quantities from all kept configurations, not only the most likely")


def _mcmc_flags(p, seed=True):
    g = p.add_argument_group("MCMC")
    g.add_argument("--chains", type=int, default=3, help="number of chains (default: 3)")
    g.add_argument("--iters", type=int, default=20000, help="iterations per chain (default: 20000)")
    g.add_argument("--mcmc-burnin", type=int, default=None,
                   help="burn-in per chain (default: a quarter of --iters)")
    g.add_argument("--workers", type=int, default=1, help="processes running chains (default: 1)")
    if seed:
        g.add_argument("--seed", type=int, default=1, help="random seed (default: 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixcure", description="Bayesian mixture cure models for survival data.")
    parser.add_argument("--version", action="version", version=f"mixcure {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="modal Gibbs sampler with Laplace fits",
                       description="Fit the model with the modal Gibbs sampler and Laplace fits.")
    _data_flags(p)
    _gibbs_flags(p)

    p = sub.add_parser("mcmc", help="reference Metropolis-within-Gibbs sampler",
                       description="Sample the posterior with the reference MCMC sampler.")
    _data_flags(p)
    _mcmc_flags(p)
    p.add_argument("--profile", action="append", default=[], metavar="NAME:COV=VAL,...",
                   help="covariate profile for cure proportions and survival curves; repeatable")
    p.add_argument("--time-points", type=int, default=50,
                   help="points on the survival time grid (default: 50)")

    p = sub.add_parser("oracle", help="exact enumeration on tiny instances",
                       description="Enumerate every cure configuration and integrate by quadrature.")
    _data_flags(p)
    p.add_argument("--quad-points", type=int, default=321,
                   help="quadrature nodes per dimension (default: 321)")

    p = sub.add_parser("simulate", help="simulate a dataset",
                       description="Simulate right-censored data from the mixture cure model.")
    p.add_argument("--n", type=int, default=100, help="number of subjects (default: 100)")
    p.add_argument("--beta1", type=_floats("--beta1"), default=[-1.0],
                   help="incidence coefficients, intercept first (default: -1)")
    p.add_argument("--beta2", type=_floats("--beta2"), default=[0.0],
                   help="latency coefficients, intercept first (default: 0)")
    p.add_argument("--alpha", type=float, default=1.2, help="Weibull shape (default: 1.2)")
    p.add_argument("--family", default="weibull-ph", choices=[f.value for f in LatencyFamily],
                   help="latency family (default: weibull-ph)")
    p.add_argument("--admin-censor", type=float, default=5.0,
                   help="administrative censoring time; 0 disables (default: 5)")
    p.add_argument("--censor-rate", type=float, default=0.0,
                   help="rate of exponential censoring; 0 disables (default: 0)")
    p.add_argument("--covariate", action="append", default=[], metavar="NAME:KIND:PARAM",
                   help="generated covariate, KIND binary (PARAM = P(1)) or normal (PARAM = sd); repeatable")
    p.add_argument("--incidence-cov", default="", help="comma-separated incidence covariates")
    p.add_argument("--latency-cov", default="", help="comma-separated latency covariates")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--out", default=None, help="output CSV file (default: standard output)")
    p.add_argument("--truth", default=None, help="write the generating truth as JSON to this file")

    p = sub.add_parser("compare", help="run fit and mcmc on the same data",
                       description="Run fit and mcmc on the same data and tabulate the differences.")
    _data_flags(p)
    _gibbs_flags(p)
    _mcmc_flags(p, seed=False)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load(args):
    fam = LatencyFamily.parse(args.family)
    d = read_dataset(args.data, args.time_col, args.status_col, _names(args.incidence_cov),
                     _names(args.latency_cov), _names(args.center), fam, args.flip_status)
    if args.prior_var <= 0:
        raise UsageError("--prior-var must be positive")
    return d, fam, PriorSpec(variance=args.prior_var)


def _profiles(args, d):
    specs = args.profile or ["baseline:"]
    out = []
    for text in specs:
        name, _, body = text.partition(":")
        if not name:
            raise UsageError(f"--profile {text!r}: missing profile name")
        values = {}
        for item in _names(body):
            key, eq, val = item.partition("=")
            if not eq:
                raise UsageError(f"--profile {text!r}: expected COV=VALUE, got {item!r}")
            try:
                values[key.strip()] = float(val)
            except ValueError:
                raise UsageError(f"--profile {text!r}: value for {key!r} is not a number") from None
        known = set(d.incidence_names) | set(d.latency_names)
        unknown = set(values) - known
        if unknown:
            raise UsageError(f"--profile {text!r}: unknown covariate(s) {sorted(unknown)}")

        def row(names):
            return [1.0 if c == INTERCEPT else values.get(c, d.centering.get(c, 0.0))
                    - d.centering.get(c, 0.0) for c in names]

        out.append((name, row(d.incidence_names), row(d.latency_names)))
    return out


def _time_grid(d, points):
    if points < 2:
        raise UsageError("--time-points must be at least 2")
    top = float(d.times.max())
    return np.linspace(top / points, top, points)


def _gibbs_config(args):
    try:
        return GibbsConfig(burnin=args.burnin, keep=args.keep, thin=args.thin, seed=args.seed,
                           grid_size=args.grid_size, strategy=args.strategy)
    except (ConfigurationError, ValueError) as exc:
        raise UsageError(f"--burnin/--keep/--thin/--grid-size: {exc}") from None


def _mcmc_config(args):
    burn = args.mcmc_burnin if args.mcmc_burnin is not None else args.iters // 4
    try:
        return McmcConfig(chains=args.chains, iters=args.iters, burnin=burn, seed=args.seed,
                          workers=args.workers)
    except ConfigurationError as exc:
        raise UsageError(f"--chains/--iters/--mcmc-burnin: {exc}") from None


def _base_manifest(args, d):
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    return {
        "program": "mixcure",
        "version": __version__,
        "command": args.command,
        "flags": flags,
        "data": {"path": str(args.data), "sha256": _sha256(args.data), "n": d.n,
                 "n_censored": d.n_cen, "centering": dict(d.centering)},
        "parameters": d.parameter_names,
    }


def _require_censoring(d):
    if d.n_cen == 0:
        raise DataError(
            "the data contain no censored subjects, so the cure fraction cannot be estimated; "
            "use a model without a cure component"
        )


def _fit_pipeline(args, d, fam, spec):
    _require_censoring(d)
    cfg = _gibbs_config(args)
    chain = run_chain(d, spec, fam, cfg)
    marg = average_marginals(chain)
    ok, stats = converged(chain.cml_trace)
    times = _time_grid(d, args.time_points)
    dq = derived_quantities(chain, _profiles(args, d), times, args.draws, args.seed,
                            args.average_configs)
    info = {
        "config": {"burnin": cfg.burnin, "keep": cfg.keep, "thin": cfg.thin, "seed": cfg.seed,
                   "grid_size": cfg.grid_size, "q0": cfg.q0,
                   "strategy": cfg.laplace_config(d.n).strategy},
        "converged": ok,
        "convergence": stats,
        "cml_trace": chain.cml_trace,
        "rejected_iterations": int(chain.rejected.sum()),
        "failures": chain.failures,
        "most_likely_sample": chain.most_likely,
        "most_likely_iteration": int(chain.kept_iterations[chain.most_likely]),
        "cure_probabilities": chain.cure_probs[d.censored],
    }
    return chain, marg, dq, ok, info


def cmd_fit(args):
    d, fam, spec = _load(args)
    chain, marg, dq, ok, info = _fit_pipeline(args, d, fam, spec)
    manifest = _base_manifest(args, d)
    manifest.update(info)
    write_outputs(args.out, summary_table(marg, fam), dq.cure_summary(),
                  survival_grid(dq.times, dq.profiles, dq.survival_mean), manifest)
    if not ok:
        print(f"warning: cml trace not stable (see {Path(args.out) / 'manifest.txt'})", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def _mcmc_pipeline(args, d, fam, spec):
    cfg = _mcmc_config(args)
    res = run_mcmc(d, spec, fam, cfg)
    info = {
        "mcmc_config": {"chains": cfg.chains, "iters": cfg.iters, "burnin": cfg.burnin,
                        "thin": cfg.effective_thin, "seed": cfg.seed},
        "mcmc_converged": res.converged,
        "psrf": dict(zip(res.names, res.psrf)),
        "ess": dict(zip(res.names, res.ess)),
        "acceptance": res.acceptance,
    }
    return res, info


def cmd_mcmc(args):
    d, fam, spec = _load(args)
    res, info = _mcmc_pipeline(args, d, fam, spec)
    times = _time_grid(d, args.time_points)
    dq = quantities_from_draws(res.pooled, d.p1, d.p2, _profiles(args, d), times)
    manifest = _base_manifest(args, d)
    manifest.update(info)
    write_outputs(args.out, summary_from_draws(res.names, res.pooled, fam), dq.cure_summary(),
                  survival_grid(dq.times, dq.profiles, dq.survival_mean), manifest)
    if not res.converged:
        print("warning: PSRF above 1.1 for some parameter", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_oracle(args):
    d, fam, spec = _load(args)
    res = enumerate_posterior(d, spec, fam, points=args.quad_points)
    rows = [{"parameter": n, "mean": m, "sd": s, "ci_low": None, "ci_high": None, "p_gt_0": None}
            for n, m, s in zip(res.parameter_names, res.means, res.sds)]
    rows.append({"parameter": "alpha", "mean": res.alpha_mean, "sd": None, "ci_low": None,
                 "ci_high": None, "p_gt_0": None})
    out = write_outputs(args.out, rows, None, None, {
        **_base_manifest(args, d),
        "log_evidence": res.log_evidence,
        "censored_rows": res.censored + 1,
    })
    configs = [{"z_censored": "".join(str(v) for v in c), "prob": p, "log_joint": lj}
               for c, p, lj in zip(res.configs, res.probs, res.log_joint)]
    with open(out / "configurations.csv", "w", newline="", encoding="utf-8") as handle:
        w = csv.writer(handle, lineterminator="\n")
        w.writerow(["z_censored", "prob", "log_joint"])
        for r in configs:
            w.writerow([r["z_censored"], f"{r['prob']:.6e}", f"{r['log_joint']:.6f}"])
    return EXIT_OK


def cmd_simulate(args):
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    covs = []
    for text in args.covariate:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError(f"--covariate {text!r}: expected NAME:KIND:PARAM")
        try:
            covs.append(Covariate(parts[0], parts[1], float(parts[2])))
        except (ValueError, ConfigurationError) as exc:
            raise UsageError(f"--covariate {text!r}: {exc}") from None
    cens = Censoring(admin=args.admin_censor or None, rate=args.censor_rate or None)
    try:
        d, truth = simulate(args.n, args.beta1, args.beta2, args.alpha, args.family, cens, covs,
                            _names(args.incidence_cov), _names(args.latency_cov), args.seed)
    except ConfigurationError as exc:
        raise UsageError(f"simulate: {exc}") from None
    if args.out:
        write_dataset(d, args.out)
    else:
        write_dataset(d, sys.stdout)
    if args.truth:
        Path(args.truth).write_text(json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    return EXIT_OK


def cmd_compare(args):
    d, fam, spec = _load(args)
    chain, marg, dq, ok, info = _fit_pipeline(args, d, fam, spec)
    res, minfo = _mcmc_pipeline(args, d, fam, spec)
    fit_rows = summary_table(marg, fam)
    mc_rows = {r["parameter"]: r for r in summary_from_draws(res.names, res.pooled, fam)}
    mcse = dict(zip(res.names, res.mcse()))
    rows = []
    for r in fit_rows:
        m = mc_rows.get(r["parameter"])
        if m is None:
            continue
        rows.append({"parameter": r["parameter"], "fit_mean": r["mean"], "mcmc_mean": m["mean"],
                     "abs_diff": abs(r["mean"] - m["mean"]), "fit_sd": r["sd"], "mcmc_sd": m["sd"],
                     "mcmc_mcse": mcse.get(r["parameter"])})
    dq_mc = quantities_from_draws(res.pooled, d.p1, d.p2, _profiles(args, d), dq.times)
    sup = {name: float(np.max(np.abs(a - b)))
           for name, a, b in zip(dq.profiles, dq.survival_mean, dq_mc.survival_mean)}
    manifest = _base_manifest(args, d)
    manifest.update(info)
    manifest.update(minfo)
    manifest["survival_sup_diff"] = sup
    out = write_outputs(args.out, fit_rows, dq.cure_summary(),
                        survival_grid(dq.times, dq.profiles, dq.survival_mean), manifest)
    write_table(rows, out / "compare.csv",
                ("parameter", "fit_mean", "mcmc_mean", "abs_diff", "fit_sd", "mcmc_sd", "mcmc_mcse"))
    if not ok or not res.converged:
        return EXIT_CONVERGENCE
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "mcmc": cmd_mcmc, "oracle": cmd_oracle, "simulate": cmd_simulate,
            "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help and --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, RefusalError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ChainError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ConfigurationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MixCureError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
