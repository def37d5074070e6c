"""Command-line entry point: ``dcsgd {account,calibrate,simulate-norms,train}``.

Exit codes: 0 success, 2 usage / invalid arguments, 3 infeasible privacy
parameters, 4 data errors.

``train`` reads an optional flat ``key = value`` config file (``#`` starts
a comment, keys are flag names without the leading dashes). Precedence is
command-line flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import fields
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import accountant as acc
from .data import DataError, gen_blobs, gen_norms, load_csv
from .histogram import build_histogram
from .models import build_model
from .strategy import STRATEGIES, ClipState, error_curve, percentile_threshold
from .trainer import TrainConfig, TrainingDiverged, resolve_budget, train, write_summary

EXIT_USAGE, EXIT_INFEASIBLE, EXIT_DATA = 2, 3, 4


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return [int(v) for v in vals]


# -- account -----------------------------------------------------------------

def cmd_account(args) -> int:
    if args.lt:
        missing = [f for f in ("eps1", "delta1", "gamma", "delta2") if getattr(args, f) is None]
        if missing:
            raise UsageError("--lt needs " + ", ".join("--" + m for m in missing))
        cost = acc.lt_tuning_cost(args.eps1, args.delta1, args.gamma, args.delta2)
        print(f"epsilon'={cost.epsilon!r}")
        print(f"delta'={cost.delta!r}")
        print(f"T={cost.T!r}")
        return 0
    missing = [f for f in ("q", "sigma", "steps", "delta") if getattr(args, f) is None]
    if missing:
        raise UsageError("account needs " + ", ".join("--" + m for m in missing))
    curve = acc.compose(acc.rdp_curve(args.q, args.sigma), args.steps)
    eps, alpha = acc.rdp_to_dp(curve, args.delta)
    print(f"epsilon={eps!r}")
    print(f"alpha={alpha!r}")
    return 0


# -- calibrate ---------------------------------------------------------------

def _rate_and_steps(args) -> tuple[float, int, float]:
    if args.q is not None:
        q = args.q
    elif args.batch_size is not None and args.n is not None:
        q = args.batch_size / args.n
    else:
        raise UsageError("give --q, or --batch-size together with --n")
    if args.steps is not None:
        T = args.steps
    elif args.epochs is not None and args.n is not None and args.batch_size is not None:
        T = args.epochs * math.ceil(args.n / args.batch_size)
    else:
        raise UsageError("give --steps, or --epochs together with --n and --batch-size")
    if args.delta is not None:
        delta = args.delta
    elif args.n is not None:
        delta = 1.0 / args.n
    else:
        raise UsageError("give --delta (or --n for the default 1/N)")
    return q, T, delta


def cmd_calibrate(args) -> int:
    if args.epsilon is None:
        raise UsageError("calibrate needs --epsilon")
    q, T, delta = _rate_and_steps(args)
    sigma = acc.calibrate_sigma(args.epsilon, delta, q, T)
    sigma_H = args.sigma_h if args.sigma_h is not None else acc.auto_sigma_H(sigma)
    sigma_T = acc.split_noise(sigma, sigma_H)
    print(f"sigma={sigma!r}")
    print(f"sigma_H={sigma_H!r}")
    print(f"sigma_T={sigma_T!r}")
    print(f"epsilon={acc.epsilon_for(q, sigma, T, delta)!r} delta={delta!r} q={q!r} T={T}")
    return 0


# -- simulate-norms ----------------------------------------------------------

def _exact_quantile(sorted_norms: np.ndarray, p: float) -> float:
    # smallest order statistic with at least p*n values at or below it
    n = len(sorted_norms)
    k = int(np.nonzero(np.arange(1, n + 1) >= p * n)[0][0])
    return float(sorted_norms[k])


def _dist_params(args) -> tuple:
    if args.dist == "constant":
        return (args.mu,)
    return (args.mu, args.s)


def cmd_simulate_norms(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if any(b < 2 for b in args.bins) or any(s < 0 for s in args.sigma_h) or not args.range > 0:
        raise UsageError("bins must be >= 2, sigma-h >= 0 and range > 0")
    written = []
    for bi, b in enumerate(args.bins):
        # a fresh population per bin count
        pop = gen_norms(args.dist, args.n, _dist_params(args), seed=[args.seed, bi])
        norms = np.sort(pop.values)
        for si, sh in enumerate(args.sigma_h):
            rng = np.random.default_rng([args.seed, bi, si, 1])
            hist = build_histogram(pop.values, args.range, b, sh, rng)
            tag = f"b{b}_sh{sh:g}"
            if args.dump_histograms:
                hist.to_csv(out / f"hist_{tag}.csv")
            if args.mode == "percentile":
                path = out / f"percentile_{tag}.csv"
                state = ClipState(C=args.range / 2, R=args.range, strategy="percentile", p=0.5)
                with open(path, "w", newline="") as f:
                    w = csv.writer(f)
                    w.writerow(["p", "estimated", "exact"])
                    for p in args.p:
                        est = percentile_threshold(hist, p, state).C
                        w.writerow([repr(p), repr(est), repr(_exact_quantile(norms, p))])
            else:
                path = out / f"error_{tag}.csv"
                grid = np.arange(args.c_start, args.c_stop + 0.5 * args.c_step, args.c_step)
                curve = error_curve(hist, grid, args.sigma_t, args.batch_size, args.dim)
                exact_bias = np.mean(np.maximum(norms[None, :] - grid[:, None], 0.0) ** 2, axis=1)
                with open(path, "w", newline="") as f:
                    w = csv.writer(f)
                    w.writerow(["C", "variance", "bias", "total", "exact_bias", "exact_total"])
                    for e, xb in zip(curve, exact_bias):
                        w.writerow([repr(e.candidate_C), repr(e.variance), repr(e.bias), repr(e.total),
                                    repr(float(xb)), repr(e.variance + float(xb))])
            written.append(path)
    for p in written:
        print(p)
    return 0


# -- train -------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "strategy": "expected-error", "p": None, "C": 1.0, "R0": None, "bins": 20,
    "sigma_h": None, "epsilon": 8.0, "delta": None, "sigma": None,
    "batch_size": 256, "epochs": 10, "optimizer": "adam", "lr": None, "momentum": 0.9,
    "model": "logreg", "hidden": 32,
    "data": "blobs", "csv": None, "label_col": "label", "standardize": True,
    "n": 10000, "dim": 20, "classes": 2, "separation": 10.0, "data_seed": None,
    "seed": 0, "out_dir": "runs/latest",
}

_CASTS = {
    "strategy": str, "p": float, "C": float, "R0": float, "bins": int, "sigma_h": float,
    "epsilon": float, "delta": float, "sigma": float, "batch_size": int, "epochs": int,
    "optimizer": str, "lr": float, "momentum": float, "model": str, "hidden": int,
    "data": str, "csv": str, "label_col": str, "n": int, "dim": int, "classes": int,
    "separation": float, "data_seed": int, "seed": int, "out_dir": str,
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file into typed train settings."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.lstrip("-").replace("-", "_")
        if key == "sigma_H":
            key = "sigma_h"
        if key not in TRAIN_DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        if raw.lower() in ("", "none", "null"):
            values[key] = None
        elif key == "standardize":
            values[key] = _parse_bool(raw)
        else:
            try:
                values[key] = _CASTS[key](raw)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value for {key!r}: {raw!r}") from None
    return values


def resolve_run_spec(args) -> dict:
    file_values = read_config(args.config) if args.config else {}
    cli_values = {k: getattr(args, k) for k in TRAIN_DEFAULTS if getattr(args, k, None) is not None}
    run = {**TRAIN_DEFAULTS, **file_values, **cli_values}
    if run["data_seed"] is None:
        run["data_seed"] = run["seed"]
    if run["strategy"] not in STRATEGIES:
        raise UsageError(f"unknown strategy {run['strategy']!r}; valid strategies: {', '.join(STRATEGIES)}")
    if run["strategy"] == "percentile" and run["p"] is None:
        raise UsageError("strategy 'percentile' needs --p")
    run["provenance"] = {
        "config_file": str(args.config) if args.config else None,
        "cli_overrides": sorted(cli_values),
        "version": _version(),
    }
    return run


def _load_dataset(run):
    if run["data"] == "blobs":
        return gen_blobs(run["n"], run["dim"], run["classes"], run["separation"], seed=run["data_seed"])
    if run["data"] == "csv":
        if not run["csv"]:
            raise UsageError("--data csv needs --csv PATH")
        return load_csv(run["csv"], run["label_col"], standardize_features=run["standardize"],
                        seed=run["data_seed"])
    raise UsageError(f"unknown data source {run['data']!r}; expected 'blobs' or 'csv'")


def cmd_train(args) -> int:
    run = resolve_run_spec(args)
    ds = _load_dataset(run)
    model = build_model(run["model"], ds.n_features, ds.n_classes, run["hidden"])
    cfg = TrainConfig(
        batch_size=run["batch_size"], epochs=run["epochs"], optimizer=run["optimizer"],
        lr=run["lr"], momentum=run["momentum"], strategy=run["strategy"], C0=run["C"],
        R0=run["R0"], bins=run["bins"], p=run["p"], epsilon=run["epsilon"],
        delta=run["delta"], sigma=run["sigma"], sigma_H=run["sigma_h"], seed=run["seed"],
    )
    budget = resolve_budget(cfg, len(ds.train_idx))
    _, metrics, budget = train(model, ds, cfg, budget)

    out = Path(run["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(out / "metrics.csv")
    cfg_keys = {f.name for f in fields(TrainConfig)}
    extra = {k: v for k, v in run.items() if k not in cfg_keys}
    write_summary(out / "summary.json", cfg, budget, metrics, extra)
    print(f"final_accuracy={metrics.final_accuracy!r}")
    print(f"epsilon={budget.epsilon!r} delta={budget.delta!r}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcsgd", description="DP-SGD with dynamic clipping")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("account", help="epsilon of the subsampled Gaussian, or tuning cost with --lt")
    p.add_argument("--q", type=float, help="Poisson sampling rate")
    p.add_argument("--sigma", type=float, help="noise multiplier")
    p.add_argument("--steps", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--lt", action="store_true", help="random-stopping hyperparameter tuning cost")
    p.add_argument("--eps1", type=float)
    p.add_argument("--delta1", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--delta2", type=float)
    p.set_defaults(func=cmd_account, subparser=p)

    p = sub.add_parser("calibrate", help="noise multipliers for a target (epsilon, delta)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float, help="default 1/N")
    p.add_argument("--q", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n", type=int, help="training set size")
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--sigma-h", type=float, help="histogram noise multiplier (default: rule on sigma)")
    p.set_defaults(func=cmd_calibrate, subparser=p)

    p = sub.add_parser("simulate-norms", help="histogram estimation sweeps on synthetic norms")
    p.add_argument("--mode", choices=("percentile", "error"), default="percentile")
    p.add_argument("--dist", choices=("gaussian", "lognormal", "constant"), default="gaussian")
    p.add_argument("--mu", type=float, default=100.0, help="mean (or the constant value)")
    p.add_argument("--s", type=float, default=20.0, help="standard deviation")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--range", type=float, default=150.0)
    p.add_argument("--bins", type=_ints, default=[10, 20, 50])
    p.add_argument("--sigma-h", type=_floats, default=[1.0, 5.0, 10.0])
    p.add_argument("--p", type=_floats, default=[round(0.1 * k, 1) for k in range(1, 10)])
    p.add_argument("--sigma-t", type=float, default=1.0)
    p.add_argument("--batch-size", type=float, default=256.0)
    p.add_argument("--dim", type=int, default=100000)
    p.add_argument("--c-start", type=float, default=1.0)
    p.add_argument("--c-stop", type=float, default=120.0)
    p.add_argument("--c-step", type=float, default=1.0)
    p.add_argument("--dump-histograms", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="sim")
    p.set_defaults(func=cmd_simulate_norms, subparser=p)

    p = sub.add_parser("train", help="run DC-SGD end to end")
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--strategy", help=f"one of {', '.join(STRATEGIES)}")
    p.add_argument("--p", type=float, help="percentile as a fraction in (0, 1)")
    p.add_argument("--C", type=float, help="initial clipping threshold")
    p.add_argument("--R0", type=float, help="initial histogram range")
    p.add_argument("--bins", type=int)
    p.add_argument("--sigma-h", dest="sigma_h", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--sigma", type=float, help="skip calibration and use this noise multiplier")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd-momentum"))
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--model", choices=("logreg", "mlp"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--data", choices=("blobs", "csv"))
    p.add_argument("--csv")
    p.add_argument("--label-col")
    p.add_argument("--no-standardize", dest="standardize", action="store_const", const=False)
    p.add_argument("--n", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--separation", type=float)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train, subparser=p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        args.subparser.print_usage(sys.stderr)
        print(f"dcsgd: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except acc.InfeasibleBudgetError as e:
        print(f"dcsgd: infeasible privacy parameters: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DataError as e:
        print(f"dcsgd: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as e:
        print(f"dcsgd: training diverged: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"dcsgd: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
