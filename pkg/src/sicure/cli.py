"""Command-line interface: ``sicure {fit,select-r,bootstrap,simulate,curves}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure
(including EM non-convergence; the result file is still written).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_grid(text: str):
    """``"a:b:step"`` (inclusive) or a comma list."""
    text = text.strip()
    if ":" in text:
        parts = [float(v) for v in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
            raise UsageError(f"bad grid {text!r}; expected start:stop:step")
        a, b, s = parts
        return [float(v) for v in np.round(np.arange(a, b + s / 2, s), 10)]
    vals = [float(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise UsageError("empty grid")
    return vals


def _floats(text):
    if text is None or text == "":
        return []
    return [float(v) for v in text.split(",")]


def _add_fit_flags(p):
    p.add_argument("--data", required=True, help="CSV with columns left,right,x1..,z1..")
    p.add_argument("--engine", choices=("kernel", "sieve", "logistic"), default="kernel")
    p.add_argument("--r", type=float, default=0.0, help="transformation index r >= 0")
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--knots", type=int, default=5, help="interior knots of the hazard I-splines")
    p.add_argument("--placement", choices=("quantile", "even"), default="quantile")
    p.add_argument("--sieve-knots", type=int, default=3)
    p.add_argument("--h-grid", default="0.1:0.5:0.05")
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-4, help="parameter-change tolerance")
    p.add_argument("--tol-loglik", type=float, default=1e-7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--standardize", action="store_true", help="z-score X and Z before fitting")
    p.add_argument("--no-accelerate", action="store_true", help="plain EM without quasi-Newton steps")


def build_parser():
    ap = _Parser(prog="sicure", description="Single-index transformation cure models for interval-censored data")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit one model")
    _add_fit_flags(p)
    p.add_argument("--out", required=True, help="FitResult JSON path")
    p.add_argument("--trace", help="optional CSV of the log-likelihood trace")

    p = sub.add_parser("select-r", help="choose r on a validation split")
    _add_fit_flags(p)
    p.add_argument("--split", type=float, default=0.667, help="training fraction")
    p.add_argument("--grid", default="0:5:0.1")
    p.add_argument("--out", help="JSON with the best r and its fit")
    p.add_argument("--profile", help="CSV with columns r,valid_loglik")
    p.add_argument("--cold", action="store_true", help="fit every r from scratch instead of warm-starting")

    p = sub.add_parser("bootstrap", help="bootstrap standard errors")
    _add_fit_flags(p)
    p.add_argument("--b", type=int, default=200)
    p.add_argument("--resamples", help="JSON list of index lists (must have b entries)")
    p.add_argument("--cold-start", action="store_true")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--band", help="CSV of the pointwise Lambda band (t,lo,hi)")

    p = sub.add_parser("simulate", help="simulation study for one scenario")
    p.add_argument("--scenario", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--r", type=float, default=0.0)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--engine", choices=("kernel", "sieve", "logistic"), default="kernel")
    p.add_argument("--sieve-knots", type=int, help="sieve link knots (default depends on the scenario)")
    p.add_argument("--bootstrap-b", type=int, default=0, help="bootstrap replicates per dataset (0 = no SEs)")
    p.add_argument("--n-exams", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("curves", help="tabulate fitted curves")
    p.add_argument("--fit", required=True, help="FitResult JSON")
    p.add_argument("--times", default=None, help="time grid; default 0..max knot boundary, 101 points")
    p.add_argument("--z", default=None, help="latency covariate profile (comma list); default zeros")
    p.add_argument("--x", default=None, help="incidence covariate profile (comma list); default zeros")
    p.add_argument("--u-grid", default=None, help="index grid for the link; default spans the data")
    p.add_argument("--out", required=True, help="CSV with t,Lambda,S_u,S")
    p.add_argument("--link-out", help="CSV with u,g (default: <out>_link.csv)")
    return ap


def _config(args):
    from .fit import FitConfig

    if args.r < 0 or not math.isfinite(args.r):
        raise UsageError("--r must be finite and >= 0")
    return FitConfig(r=args.r, engine=args.engine, degree=args.degree, n_knots=args.knots,
                     placement=args.placement, h_grid=tuple(parse_grid(args.h_grid)), max_iter=args.max_iter,
                     tol_param=args.tol, tol_loglik=args.tol_loglik, seed=args.seed,
                     standardize=args.standardize, sieve_knots=args.sieve_knots,
                     accelerate=not args.no_accelerate)


def _print_coefs(fit, out=None):
    out = out or sys.stdout
    print(f"engine={fit.params.incidence.engine} r={fit.r:g} loglik={fit.loglik:.4f} "
          f"AIC={fit.aic:.2f} BIC={fit.bic:.2f} iter={fit.n_iter} converged={fit.converged}", file=out)
    print(f"{'Par':<10}{'Est':>12}", file=out)
    if fit.params.incidence.gamma0 is not None:
        print(f"{'gamma0':<10}{fit.params.incidence.gamma0:>12.4f}", file=out)
    for j, v in enumerate(fit.gamma):
        print(f"{'gamma' + str(j + 1):<10}{v:>12.4f}", file=out)
    for j, v in enumerate(fit.beta):
        print(f"{'beta' + str(j + 1):<10}{v:>12.4f}", file=out)


def cmd_fit(args):
    from .data import load_csv
    from .fit import fit_em

    cfg = _config(args)
    ds = load_csv(args.data)
    fit = fit_em(ds, cfg)
    fit.save(args.out)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loglik"])
            w.writerows(enumerate(fit.loglik_trace))
    _print_coefs(fit)
    return EXIT_OK if fit.converged else EXIT_NUMERIC


def cmd_select_r(args):
    from .data import load_csv, train_valid_split
    from .fit import fit_r_grid

    cfg = _config(args)
    grid = parse_grid(args.grid)
    if any(r < 0 for r in grid):
        raise UsageError("r grid must be nonnegative")
    if not 0 < args.split < 1:
        raise UsageError("--split must be in (0, 1)")
    ds = load_csv(args.data)
    train, valid = train_valid_split(ds, args.split, args.seed)
    res = fit_r_grid(train, valid, cfg, grid, warm=not args.cold)
    print(f"best r = {res.best_r:g} (train n={train.n}, validation n={valid.n})")
    if args.profile:
        with open(args.profile, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "valid_loglik"])
            w.writerows(res.profile)
    if args.out:
        Path(args.out).write_text(json.dumps({
            "best_r": res.best_r, "profile": [list(p) for p in res.profile],
            "failures": [list(f) for f in res.failures], "fit": res.fit.to_dict()}, indent=2))
    _print_coefs(res.fit)
    return EXIT_OK


def cmd_bootstrap(args):
    from .data import load_csv
    from .uncertainty import bootstrap

    cfg = _config(args)
    if args.b < 2:
        raise UsageError("--b must be >= 2")
    resamples = None
    if args.resamples:
        resamples = json.loads(Path(args.resamples).read_text())
        if len(resamples) != args.b:
            raise UsageError(f"--resamples has {len(resamples)} replicates but --b is {args.b}")
    ds = load_csv(args.data)
    res = bootstrap(ds, cfg, args.b, seed=args.seed, resamples=resamples, cold_start=args.cold_start,
                    workers=args.workers)
    res.save(args.out)
    if args.band:
        res.save_band(args.band)
    print(f"{'Par':<10}{'Est':>10}{'SE':>10}{'p-value':>10}")
    for row in res.table():
        print(f"{row['Par']:<10}{row['Est']:>10.3f}{row['SE']:>10.3f}{row['p_fmt']:>10}")
    print(f"converged replicates: {sum(res.replicate_status)}/{res.b}")
    return EXIT_NUMERIC if res.unreliable else EXIT_OK


def cmd_simulate(args):
    from .fit import FitConfig
    from .simulate import DEFAULT_TUNING, SIEVE_KNOTS, ScenarioSpec, run_replicates

    if args.reps < 2:
        raise UsageError("--reps must be >= 2")
    if args.r < 0:
        raise UsageError("--r must be >= 0")
    tuning = None
    if args.n_exams is not None or args.horizon is not None:
        base = DEFAULT_TUNING.get((args.scenario, float(args.r)), DEFAULT_TUNING[(args.scenario, 0.0)])
        tuning = (args.n_exams or base[0], args.horizon or base[1])
    spec = ScenarioSpec(args.scenario, args.r, args.n, args.seed, tuning)
    knots = SIEVE_KNOTS[args.scenario] if args.sieve_knots is None else args.sieve_knots
    cfg = FitConfig(r=args.r, engine=args.engine, seed=args.seed, sieve_knots=knots)
    m, recs = run_replicates(spec, args.reps, cfg, bootstrap_b=args.bootstrap_b, workers=args.workers,
                             return_records=True)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "replicates.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rep", "beta1", "beta2", "beta3", "gamma1", "gamma2", "gamma3", "ase", "converged",
                    "n_iter", "left_rate", "interval_rate", "right_rate", "error"])
        for r in recs:
            if "error" in r:
                w.writerow([r["rep"]] + [""] * 9 + list(r["rates"]) + [r["error"]])
            else:
                w.writerow([r["rep"], *r["beta"], *r["gamma"], r["ase"], r["converged"], r["n_iter"],
                            *r["rates"], ""])
    with (out / "ase.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rep", "engine", "ase"])
        for r in recs:
            if "ase" in r:
                w.writerow([r["rep"], args.engine, r["ase"]])
    rows = m.table()
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["Par", "Bias", "ESD", "ESE", "CP"])
        w.writeheader()
        w.writerows(rows)
    summary = {"scenario": args.scenario, "r": args.r, "n": args.n, "reps": args.reps, "engine": args.engine,
               "censor_tuning": list(spec.censor_tuning), "censor_rates": list(m.censor_rates),
               "cure_rate": m.cure_rate, "median_ase": float(np.median(m.ase_per_replicate)),
               "n_failed": m.n_failed, "table": rows}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"{'Par':<8}{'Bias':>8}{'ESD':>8}{'ESE':>8}{'CP':>8}")
    for r in rows:
        fmt = lambda v: f"{v:>8.2f}" if v is not None else f"{'-':>8}"  # noqa: E731
        print(f"{r['Par']:<8}{fmt(r['Bias'])}{fmt(r['ESD'])}{fmt(r['ESE'])}{fmt(r['CP'])}")
    print(f"censoring (left, interval, right) = {tuple(round(v, 3) for v in m.censor_rates)}; "
          f"median ASE = {summary['median_ase']:.4f}")
    return EXIT_OK


def cmd_curves(args):
    from .fit import load_fit
    from .transform import survival_u

    fit = load_fit(args.fit)
    st = fit.params.incidence
    d1, d2 = fit.gamma.size, fit.beta.size
    times = parse_grid(args.times) if args.times else list(np.linspace(0.0, fit.basis.hi, 101))
    if any(t < 0 for t in times):
        raise UsageError("times must be nonnegative")
    z = np.asarray(_floats(args.z) or [0.0] * d2, float)
    x = np.asarray(_floats(args.x) or [0.0] * d1, float)
    if z.size != d2 or x.size != d1:
        raise UsageError(f"profiles need {d1} x-values and {d2} z-values")
    s = fit.standardization
    if s:
        x = (x - np.asarray(s["x_mean"])) / np.asarray(s["x_sd"])
        z = (z - np.asarray(s["z_mean"])) / np.asarray(s["z_sd"])
    lam = fit.cumhaz(times)
    su = np.atleast_1d(survival_u(fit.r, lam, float(z @ fit.beta)))
    p = float(st.predict(x[None, :])[0])
    pop = 1.0 - p + p * su
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "Lambda", "S_u", "S"])
        w.writerows(zip(times, lam, su, pop))
    if args.u_grid:
        u = np.asarray(parse_grid(args.u_grid))
    elif st.engine == "kernel":
        u = np.linspace(st.u_train.min(), st.u_train.max(), 101)
    elif st.engine == "sieve":
        u = np.linspace(st.sieve_basis.lo, st.sieve_basis.hi, 101)
    else:
        u = np.linspace(-3, 3, 101)
    link_out = args.link_out or str(Path(args.out).with_name(Path(args.out).stem + "_link.csv"))
    with open(link_out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "g"])
        w.writerows(zip(u, st.link(u)))
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "select-r": cmd_select_r, "bootstrap": cmd_bootstrap,
            "simulate": cmd_simulate, "curves": cmd_curves}


def main(argv=None):
    from .data import DataError
    from .estep import DegenerateIntervalError
    from .fit import EMAscentError

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return COMMANDS[args.verb](args)
    except (DataError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateIntervalError, EMAscentError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
