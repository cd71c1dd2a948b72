"""Command-line entry points.

Subcommands:

* ``simulate``   generate a dataset from one of the built-in DGPs and save
                 it (observed part to one .npz, hidden truth optionally to
                 another).
* ``theta0``     compute / cache the Monte-Carlo projection target.
* ``run``        execute a replicated experiment from a JSON config.
* ``summarize``  rebuild summary tables (and figures) from a records dir.
* ``fit``        fit a single estimator on a persisted dataset.

Exit codes: 0 on success, 2 for configuration errors, 3 when a run exceeds
the replication failure budget.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import solvers
from .dataset import ObservedDataset
from .ddr import build_predictions, fit_ddr, split, NuisancePredictions
from .harness import (
    ConfigError,
    FailureBudgetExceeded,
    MalformedRecords,
    PI_SPECS,
    M_SPECS,
    load_config,
    run_experiment,
    summarize,
)
from .nuisance import BasisSpec, BicRule, CvRule, OutcomeSpec, fit_propensity, select_lambda
from .numkit import RngStream
from .simulate import DgpSpec, compute_theta0, default_params, generate

_PI_BASIS = {"linear-logit": BasisSpec.linear, "quad-logit": BasisSpec.quadratic}


def _add_dgp_args(parser):
    parser.add_argument("--kind", required=True,
                        choices=["linear-linear", "quad-quad", "sim-sim"])
    parser.add_argument("--p", type=int, default=50)
    parser.add_argument("--cov", default="identity", choices=["identity", "ar1", "cs"])
    parser.add_argument("--rho", type=float, default=0.2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--trunc", type=float, nargs=2, default=[0.1, 0.9],
                        metavar=("LO", "HI"))


def _spec_from_args(args) -> DgpSpec:
    return DgpSpec(kind=args.kind, p=args.p, cov=args.cov, rho=args.rho,
                   seed=args.seed, trunc=tuple(args.trunc))


def cmd_simulate(args) -> int:
    spec = _spec_from_args(args)
    params = default_params(spec)
    data, truth = generate(spec, params, args.n, RngStream(args.seed, args.stream))
    np.savez(args.out, t=data.t, y=data.y, x=data.x)
    print(f"wrote {data.n} x {data.p} dataset to {args.out} "
          f"(missing fraction {1 - data.t.mean():.3f})")
    if args.truth:
        np.savez(args.truth, y_full=truth.y_full, pi=truth.pi,
                 pi_raw=truth.pi_raw, m=truth.m)
        print(f"wrote hidden truth to {args.truth}")
    return 0


def cmd_theta0(args) -> int:
    spec = _spec_from_args(args)
    params = default_params(spec)
    theta0 = compute_theta0(spec, params, args.size, args.cache)
    payload = {"p": spec.p, "dgp": spec.kind, "cov": spec.cov, "rho": spec.rho,
               "seed": spec.seed, "size": args.size, "theta0": theta0.tolist()}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh)
        print(f"wrote theta0 ({theta0.size} coords) to {args.out}")
    else:
        print(json.dumps(payload))
    return 0


def cmd_run(args) -> int:
    config = load_config(args.config)
    out = run_experiment(config, workers=args.workers)
    print(f"run complete; outputs in {out}")
    return 0


def cmd_summarize(args) -> int:
    tables = summarize(args.records, figures=not args.no_figures)
    print(f"summarized {len(tables.estimation)} estimation row(s), "
          f"{len(tables.inference)} inference row(s)")
    return 0


def _load_dataset(path: str) -> ObservedDataset:
    with np.load(path) as blob:
        return ObservedDataset(blob["t"], blob["y"], blob["x"])


def cmd_fit(args) -> int:
    data = _load_dataset(args.data)
    rng = RngStream(args.seed)
    rule = CvRule()
    xv = np.hstack([np.ones((data.n, 1)), data.x])

    if args.estimator == "ddr":
        pi_model = fit_propensity(
            data, _PI_BASIS[args.pi](), rule=BicRule(), rng=rng.substream("pi")
        )
        plan = split(data.n, rng.substream("split"))
        spec = OutcomeSpec(args.m, rule=rule,
                           pi_model=pi_model if args.m == "sim" else None)
        preds = build_predictions(data, plan, pi_model, spec, rng.substream("m"))
        fit = fit_ddr(data, preds, rule=rule, rng=rng.substream("cv"))
    elif args.estimator == "cc":
        cc = data.complete_cases()
        problem = solvers.DesignProblem(xv[cc], data.y[cc])
        lam = select_lambda(problem, rule, rng.substream("cv"))
        fit = solvers.fit_lasso(problem, lam)
    elif args.estimator in ("full", "oracle"):
        if not args.truth:
            print(f"estimator {args.estimator!r} needs --truth", file=sys.stderr)
            return 2
        with np.load(args.truth) as blob:
            if args.estimator == "full":
                problem = solvers.DesignProblem(xv, blob["y_full"])
                lam = select_lambda(problem, rule, rng.substream("cv"))
                fit = solvers.fit_lasso(problem, lam)
            else:
                plan = split(data.n, rng.substream("split"))
                preds = NuisancePredictions(blob["pi"], blob["m"], plan)
                fit = fit_ddr(data, preds, rule=rule, rng=rng.substream("cv"))
    else:  # pragma: no cover -- argparse restricts choices
        return 2

    payload = {
        "estimator": args.estimator,
        "lambda": fit.lam,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "objective": fit.objective,
        "coefficients": fit.coefficients.tolist(),
    }
    if args.estimator == "ddr":
        payload["pi_spec"] = args.pi
        payload["m_spec"] = args.m
    with open(args.out, "w") as fh:
        json.dump(payload, fh)
    nnz = int(np.count_nonzero(fit.coefficients))
    print(f"fit {args.estimator}: lambda={fit.lam:.5g}, {nnz} nonzero coefficients, "
          f"converged={fit.converged}; wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddrkit",
        description="Doubly robust high-dimensional estimation with missing outcomes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate and persist a dataset")
    _add_dgp_args(p_sim)
    p_sim.add_argument("--n", type=int, required=True)
    p_sim.add_argument("--stream", type=int, default=0,
                       help="RNG stream id (default 0)")
    p_sim.add_argument("--out", required=True, help="output .npz for observed data")
    p_sim.add_argument("--truth", help="optional .npz for the hidden truth")
    p_sim.set_defaults(func=cmd_simulate)

    p_th = sub.add_parser("theta0", help="compute/cache the projection target")
    _add_dgp_args(p_th)
    p_th.add_argument("--size", type=int, default=200_000)
    p_th.add_argument("--cache", help="cache directory")
    p_th.add_argument("--out", help="write theta0 JSON here (default: stdout)")
    p_th.set_defaults(func=cmd_theta0)

    p_run = sub.add_parser("run", help="run an experiment from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--workers", type=int, default=None,
                       help="override worker count (default: DDRKIT_THREADS or all cores)")
    p_run.set_defaults(func=cmd_run)

    p_sum = sub.add_parser("summarize", help="records directory -> summary tables")
    p_sum.add_argument("--records", required=True,
                       help="run output directory (or its records.csv)")
    p_sum.add_argument("--no-figures", action="store_true")
    p_sum.set_defaults(func=cmd_summarize)

    p_fit = sub.add_parser("fit", help="fit one estimator on a persisted dataset")
    p_fit.add_argument("--data", required=True, help=".npz from `ddrkit simulate`")
    p_fit.add_argument("--estimator", required=True,
                       choices=["ddr", "oracle", "full", "cc"])
    p_fit.add_argument("--pi", default="linear-logit", choices=list(PI_SPECS))
    p_fit.add_argument("--m", default="linear", choices=list(M_SPECS))
    p_fit.add_argument("--truth", help=".npz with hidden truth (full/oracle)")
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--out", required=True, help="output JSON for the fit")
    p_fit.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MalformedRecords as exc:
        print(f"records error: {exc}", file=sys.stderr)
        return 2
    except FailureBudgetExceeded as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
