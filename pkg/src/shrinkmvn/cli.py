"""Command-line front end: ``shrinkmvn <subcommand> [options]``.

Exit codes: 0 success, 2 usage, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import __version__
from . import io as sio
from .engine import (EngineConfig, MvnEstimate, bayes_path, inclusion_probabilities, mle_path,
                     summarize, with_factors)
from .errors import DataError, InfeasibleError, NumericError
from .layout import DataMatrix, load_matrix, order_monotone, check_monotone

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# shared options
# ----------------------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--output-dir", "-o", required=True, help="directory for results")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--na-token", default="NA", help="cell text marking a missing value")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")


def _engine_opts(p):
    p.add_argument("--prior", choices=("lasso", "ng", "ridge", "flat"), default="lasso")
    p.add_argument("--student-t", action="store_true", help="Student-t errors")
    p.add_argument("--common-nu", action="store_true",
                   help="one degrees-of-freedom parameter shared by all columns")
    p.add_argument("--mda", action="store_true", help="impute non-monotone gaps")
    p.add_argument("--mda-mode", choices=("predictive", "full"), default="predictive")
    p.add_argument("--rj", action="store_true", help="reversible-jump model averaging")
    p.add_argument("--delta", type=float, default=0.2,
                   help="use least squares when delta * n_j >= j")
    p.add_argument("--samples", type=int, default=1000, help="saved draws")
    p.add_argument("--burnin", type=int, default=None, help="default 20%% of --samples")
    p.add_argument("--thin", type=int, default=None)
    p.add_argument("--factors", default=None, help="CSV of fully observed factor returns")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shrinkmvn",
                                 description="Shrinkage estimation of multivariate normals "
                                             "from monotone missing data.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="Bayesian posterior sampling")
    p.add_argument("--input", "-i", required=True)
    _common(p)
    _engine_opts(p)
    p.add_argument("--csv-draws", action="store_true", help="also export draws as CSV")

    p = sub.add_parser("mle", help="maximum-likelihood estimate")
    p.add_argument("--input", "-i", required=True)
    _common(p, seed=False)
    p.add_argument("--delta", type=float, default=0.2)

    p = sub.add_parser("simulate", help="random truth and (optionally monotone) sample")
    _common(p)
    p.add_argument("--method", choices=("normwish", "parsimonious"), default="normwish")
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--mono", action="store_true", help="impose monotone missingness")
    p.add_argument("--floor", type=int, default=None, help="minimum rows per column")

    p = sub.add_parser("ell", help="expected log likelihood of an estimate")
    _common(p, seed=False)
    p.add_argument("--truth", required=True, help="summary CSV of the true (mu, Sigma)")
    p.add_argument("--est", required=True, nargs="+", help="summary CSV(s) of estimates")
    p.add_argument("--drop-constant", action="store_true",
                   help="omit the -m term from the divergence")

    p = sub.add_parser("bf", help="normal vs Student-t Bayes factor frequencies")
    _common(p)
    p.add_argument("--n", type=int, nargs="+", default=[200])
    p.add_argument("--nu", nargs="+", default=["3", "inf"], help="'inf' means normal errors")
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--burnin", type=int, default=200)
    p.add_argument("--thin", type=int, default=None)
    p.add_argument("--threshold", type=float, default=1.0, help="|log10 BF| cut-off")

    p = sub.add_parser("balance", help="portfolio weights from an estimate")
    p.add_argument("--input", "-i", required=True, help="summary CSV or draws .npz")
    _common(p, seed=False)
    p.add_argument("--objective", choices=("min_variance", "mean_variance"),
                   default="min_variance")
    p.add_argument("--target", type=float, default=None, help="expected-return floor")
    p.add_argument("--riskfree", type=float, default=None, help="risk-free rate")
    p.add_argument("--cap", type=float, default=1.0, help="upper bound per weight")
    p.add_argument("--no-estimation-risk", action="store_true",
                   help="with draws, use the posterior mean Sigma only")

    p = sub.add_parser("backtest", help="rolling-window portfolio backtest")
    p.add_argument("--input", "-i", required=True, help="CSV of monthly asset returns")
    _common(p)
    p.add_argument("--benchmark", required=True, help="one-column CSV of benchmark returns")
    p.add_argument("--riskfree", required=True, help="one-column CSV of risk-free returns")
    p.add_argument("--strategy", nargs="+", default=["equal", "mle"],
                   choices=("equal", "mle", "bayes"))
    p.add_argument("--objective", choices=("min_variance", "mean_variance"),
                   default="min_variance")
    p.add_argument("--target", type=float, default=None)
    p.add_argument("--cap", type=float, default=1.0)
    p.add_argument("--window", type=int, default=60)
    p.add_argument("--rebalance", type=int, default=12)
    p.add_argument("--min-obs", type=int, default=12)
    _engine_opts(p)
    return ap


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _config(args) -> dict:
    """Resolved arguments that determine the outputs.

    The output directory and the worker count are left out: neither
    changes any result, so reruns elsewhere or in parallel reproduce the
    manifest byte for byte.
    """
    return {k: v for k, v in sorted(vars(args).items())
            if k not in ("output_dir", "jobs", "command")}


def _engine_config(args) -> EngineConfig:
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    if args.common_nu and not args.student_t:
        raise UsageError("--common-nu requires --student-t")
    if args.rj and args.prior == "flat":
        raise UsageError("--rj needs a shrinkage prior")
    return EngineConfig(delta=args.delta, prior=args.prior, student_t=args.student_t,
                        common_nu=args.common_nu, mda=args.mda, mda_mode=args.mda_mode,
                        model_averaging=args.rj, T=args.samples, burnin=args.burnin,
                        thin=args.thin, seed=args.seed, jobs=max(1, args.jobs))


def _load(path, args) -> DataMatrix:
    return load_matrix(path, missing_token=args.na_token)


def _finish(files, command, args):
    files["manifest.json"] = sio.manifest_text(command, _config(args), files, __version__)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_fit(args):
    d = _load(args.input, args)
    cfg = _engine_config(args)
    if args.factors:
        F = _load(args.factors, args)
        if F.n != d.n:
            raise DataError(f"factors have {F.n} rows, data have {d.n}")
        draws = with_factors(d, F.values, cfg, F.labels)
    else:
        draws = bayes_path(d, None, cfg)
    est = summarize(draws)
    with sio.staged_output(args.output_dir) as files:
        files["draws.npz"] = sio.draws_bytes(draws)
        files["summary.csv"] = sio.summary_text(est)
        if args.rj:
            P, rows, cols = inclusion_probabilities(draws)
            files["inclusion.csv"] = sio.matrix_text(P, rows, cols, "response")
        if draws.nu is not None:
            files["nu.csv"] = sio.csv_text(["column", "nu_mean"],
                                           [[lab, draws.nu[:, j].mean()]
                                            for j, lab in enumerate(draws.labels)])
        if args.csv_draws:
            files.update(sio.draws_csv_texts(draws))
        _finish(files, "fit", args)


def cmd_mle(args):
    d = _load(args.input, args)
    if not 0.0 <= args.delta < 1.0:
        raise UsageError("--delta must lie in [0, 1)")
    est = mle_path(d, None, args.delta)
    with sio.staged_output(args.output_dir) as files:
        files["summary.csv"] = sio.summary_text(est)
        files["methods.csv"] = sio.csv_text(["column", "method"],
                                            list(zip(est.labels, est.methods)))
        _finish(files, "mle", args)


def cmd_simulate(args):
    from .evaluation import GeneratorSpec, randmvn, rmono

    spec = GeneratorSpec(args.method, args.m, args.n, args.rate, args.seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed])))
    mu, S = randmvn(spec, rng)
    Y = rng.multivariate_normal(mu, S, size=args.n, method="cholesky")
    d = rmono(Y, rng, args.floor) if args.mono else DataMatrix.from_array(Y)
    if args.mono and check_monotone(order_monotone(d), d):
        raise NumericError("generated pattern is not monotone")
    labels = d.labels
    rows = [[("NA" if np.isnan(v) else v) for v in r] for r in d.values]
    with sio.staged_output(args.output_dir) as files:
        files["data.csv"] = sio.csv_text(labels, rows)
        files["truth.csv"] = sio.summary_text(MvnEstimate(mu, S, labels))
        _finish(files, "simulate", args)


def cmd_ell(args):
    from .evaluation import ell

    truth = sio.read_summary(args.truth)
    out = []
    for path in args.est:
        e = sio.read_summary(path)
        if e.labels != truth.labels:
            raise DataError(f"{path}: labels differ from the truth")
        s = ell(e.mu, e.sigma, truth.mu, truth.sigma, paper_form=args.drop_constant)
        out.append([path, s.value, s.entropy, s.divergence])
    with sio.staged_output(args.output_dir) as files:
        files["ell.csv"] = sio.csv_text(["estimate", "ell", "neg_entropy", "divergence"], out)
        _finish(files, "ell", args)


def cmd_bf(args):
    from .evaluation import bf_frequency_experiment

    try:
        nus = [math.inf if s.lower() in ("inf", "normal") else float(s) for s in args.nu]
    except ValueError:
        raise UsageError("--nu takes numbers or 'inf'") from None
    res = bf_frequency_experiment(args.n, nus, args.reps, seed=args.seed,
                                  threshold=args.threshold, T=args.samples,
                                  burnin=args.burnin, thin=args.thin, jobs=max(1, args.jobs))
    summary = [[r["n"], r["nu"], r["reps"], r["correct"], r["frequency"]] for r in res]
    detail = [[r["n"], r["nu"], i, v] for r in res for i, v in enumerate(r["log_bf"])]
    with sio.staged_output(args.output_dir) as files:
        files["bf.csv"] = sio.csv_text(["n", "nu", "reps", "correct", "frequency"], summary)
        files["bf_replicates.csv"] = sio.csv_text(["n", "nu", "rep", "log_bf"], detail)
        _finish(files, "bf", args)


def cmd_balance(args):
    from .portfolio import (PortfolioProblem, estimation_risk_moments, solve_mean_variance,
                            solve_min_variance)

    if args.input.endswith(".npz"):
        draws = sio.read_draws(args.input)
        labels = draws.labels
        if args.no_estimation_risk:
            e = summarize(draws)
            mu, S = e.mu, e.sigma
        else:
            mu, S = estimation_risk_moments(draws)
    else:
        e = sio.read_summary(args.input)
        mu, S, labels = e.mu, e.sigma, e.labels
    if args.objective == "mean_variance" and args.target is None:
        raise UsageError("--objective mean_variance needs --target")
    prob = PortfolioProblem(S, mu, args.target, args.riskfree, args.cap)
    w = solve_mean_variance(prob) if args.objective == "mean_variance" else solve_min_variance(prob)
    rows = [[lab, w.w[i]] for i, lab in enumerate(labels)]
    with sio.staged_output(args.output_dir) as files:
        files["weights.csv"] = sio.csv_text(["asset", "weight"], rows)
        files["solution.csv"] = sio.csv_text(
            ["objective", "expected_return", "kkt_residual", "iterations"],
            [[w.objective, float(w.w @ mu), w.kkt_residual, w.iterations]])
        _finish(files, "balance", args)


def _series(path, args, n):
    s = _load(path, args)
    if s.m != 1 or s.n != n:
        raise DataError(f"{path}: expected one column of {n} values")
    if np.isnan(s.values).any():
        raise DataError(f"{path}: series must be complete")
    return s.values[:, 0]


def cmd_backtest(args):
    from .portfolio import Strategy, backtest

    R = _load(args.input, args)
    b = _series(args.benchmark, args, R.n)
    f = _series(args.riskfree, args, R.n)
    if args.objective == "mean_variance" and args.target is None:
        raise UsageError("--objective mean_variance needs --target")
    strategies = []
    for name in args.strategy:
        if name == "equal":
            est = None
        elif name == "mle":
            def est(d, _delta=args.delta):
                e = mle_path(d, None, _delta)
                return e.mu, e.sigma
        else:
            base = _engine_config(args)
            counter = iter(range(10 ** 9))

            def est(d, _base=base, _c=counter):
                from dataclasses import replace
                cfg = replace(_base, seed=_base.seed * 1000003 + next(_c), jobs=1)
                e = summarize(bayes_path(d, None, cfg))
                return e.mu, e.sigma
        strategies.append(Strategy(name, est, args.objective, args.target, args.cap))
    reports = [backtest(R, b, f, s, args.window, args.rebalance, None, args.min_obs)
               for s in strategies]
    rows = [[r.name, *r.row(), len(r.flags)] for r in reports]
    T = len(reports[0].returns)
    start = args.window
    ret_rows = [[start + t, *[r.returns[t] for r in reports]] for t in range(T)]
    w_rows = [[r.name, t, *w] for r in reports for t, w in r.weights]
    with sio.staged_output(args.output_dir) as files:
        files["report.csv"] = sio.csv_text(["strategy", *reports[0].COLUMNS, "flagged"], rows)
        files["returns.csv"] = sio.csv_text(["period", *[r.name for r in reports]], ret_rows)
        files["weights.csv"] = sio.csv_text(["strategy", "period", *R.labels], w_rows)
        _finish(files, "backtest", args)


COMMANDS = {"fit": cmd_fit, "mle": cmd_mle, "simulate": cmd_simulate, "ell": cmd_ell,
            "bf": cmd_bf, "balance": cmd_balance, "backtest": cmd_backtest}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"shrinkmvn {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, InfeasibleError, np.linalg.LinAlgError, ArithmeticError) as e:
        print(f"shrinkmvn {args.command}: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as e:
        print(f"shrinkmvn {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
