"""Command-line interface: ``adl design|fit|bias|simulate|asymvar``.

Exit codes: 0 success, 2 usage or configuration error, 3 verification
failure, 4 degenerate data, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from adaptive_design.asymptotics import MixtureLawSampler, asymptotic_variance
from adaptive_design.config import ConfigError, RunConfig, format_config, load_config
from adaptive_design.design import (
    apportion,
    brute_force_d_optimal,
    d_optimal_emax,
    fisher_matrix,
    format_design,
    log_det,
)
from adaptive_design.estimation import emax_bias_coefficient, fit_mle, read_dataset_csv
from adaptive_design.exceptions import (
    RankDeficiencyError,
    SingularMatrixError,
    SingularRateError,
)
from adaptive_design.model import DoseInterval, ModelParams, ParameterBox
from adaptive_design.simulation import (
    efficiency_curve,
    parse_grid,
    run_paired,
    scenario_record,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VERIFY = 3
EXIT_DEGENERATE = 4
EXIT_NUMERIC = 5

VERIFY_GAP = 1e-4


class UsageError(Exception):
    pass


def _g17(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def _g6(value: float) -> str:
    return f"{value:.6g}"


def _plain(value: Any) -> Any:
    """Convert numpy containers to JSON types; non-finite floats become null."""
    if isinstance(value, Mapping):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _dump_json(payload: Mapping[str, Any]) -> str:
    return json.dumps(_plain(payload), indent=2, allow_nan=False) + "\n"


def _write_csv(path: Path, rows: Sequence[Mapping[str, Any]], provenance: Mapping[str, Any]) -> None:
    buf = io.StringIO()
    for line in format_config(provenance).splitlines():
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    columns = list(rows[0]) if rows else []
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_g17(row[c]) for c in columns])
    path.write_text(buf.getvalue())


def _provenance_lines(values: Mapping[str, Any]) -> dict[str, str]:
    return {k: v for k, v in (line.split(" = ", 1) for line in format_config(values).splitlines())}


def _out_dir(cfg_dir: str) -> Path:
    path = Path(cfg_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# design
# ---------------------------------------------------------------------------

def cmd_design(args: argparse.Namespace) -> int:
    interval = DoseInterval(args.a, args.b)
    if args.theta2 <= 0:
        raise UsageError("--theta2 must be positive")
    design = d_optimal_emax(args.theta2, interval)
    provenance = {"theta2": args.theta2, "a": interval.a, "b": interval.b}
    result: Any = design
    if args.n is not None:
        if args.n < 1:
            raise UsageError("--n must be a positive integer")
        result = apportion(design, args.n)
        provenance["n"] = args.n
    text = format_design(result, _provenance_lines(provenance))
    out = _out_dir(args.out_dir) / "design.txt"
    out.write_text(text)
    sys.stdout.write(text)
    if args.verify_grid is not None:
        if args.verify_grid < 50:
            raise UsageError("--verify-grid must be at least 50")
        theta = ModelParams(args.theta0, args.theta1, args.theta2)
        oracle = brute_force_d_optimal(theta, interval, args.verify_grid)
        gap = log_det(fisher_matrix(oracle, theta)) - log_det(fisher_matrix(design, theta))
        print(f"verify grid={args.verify_grid} oracle_interior={_g6(oracle.points[1])} "
              f"max_logdet_gap={gap:.6g}")
        if gap > VERIFY_GAP:
            print(f"verification failed: log-det gap {gap:.6g} > {VERIFY_GAP:g}", file=sys.stderr)
            return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def cmd_fit(args: argparse.Namespace) -> int:
    if not args.sigma > 0:
        raise UsageError("--sigma must be positive")
    try:
        data = read_dataset_csv(args.data, args.sigma)
    except OSError as exc:
        raise UsageError(f"cannot read {args.data}: {exc.strerror}") from None
    box = ParameterBox(args.theta2_min, args.theta2_max)
    res = fit_mle(data, box, trace=args.trace)
    theta = res.theta_hat
    if (args.format or "csv") == "json":
        payload: dict[str, Any] = {
            "theta_hat": list(theta),
            "rss": res.rss,
            "converged": res.converged,
            "at_boundary": res.at_boundary,
            "sigma2_hat": res.sigma2_hat,
            "config": {"data": str(args.data), "sigma": args.sigma,
                       "theta2_min": box.lower, "theta2_max": box.upper},
        }
        if res.profile_trace is not None:
            payload["profile_trace"] = res.profile_trace
        sys.stdout.write(_dump_json(payload))
    else:
        print(f"theta0 = {_g17(theta.theta0)}")
        print(f"theta1 = {_g17(theta.theta1)}")
        print(f"theta2 = {_g17(theta.theta2)}")
        print(f"rss = {_g17(res.rss)}")
        print(f"converged = {_g17(res.converged)}")
        print(f"at_boundary = {_g17(res.at_boundary)}")
        if res.sigma2_hat is not None:
            print(f"sigma2_hat = {_g17(res.sigma2_hat)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bias
# ---------------------------------------------------------------------------

def cmd_bias(args: argparse.Namespace) -> int:
    try:
        values = [float(v) for v in args.theta.split(",")]
    except ValueError:
        raise UsageError(f"--theta must be three comma-separated numbers, got {args.theta!r}") from None
    if len(values) != 3:
        raise UsageError("--theta needs exactly three values")
    theta = ModelParams(*values)
    if args.a == args.b:
        raise UsageError("a and b must differ")
    interval = DoseInterval(args.a, args.b)
    if args.n1 <= 0 or args.n1 % 3:
        raise UsageError("--n1 must be a positive multiple of 3")
    b2 = emax_bias_coefficient(theta, args.theta2_guess, interval, args.sigma)
    if (args.format or "csv") == "json":
        sys.stdout.write(_dump_json({"bias": b2 / args.n1, "b2": b2}))
    else:
        print(f"bias = {_g17(b2 / args.n1)}")
        print(f"b2 = {_g17(b2)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_TABLE_HEADER = ("theta2_true", "theta2_guess", "sigma", "mse_fixed", "mse_adaptive", "fix:adap", "stderr")


def _resolve(args: argparse.Namespace, keys: Sequence[str]) -> RunConfig:
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if getattr(args, "drop_boundary", False):
        overrides["drop_boundary"] = True
    return load_config(args.config, overrides)


_SCENARIO_FLAGS = (
    "theta0", "theta1", "theta2", "theta2_guess", "sigma", "stage1_sigma", "n1", "n2",
    "a", "b", "replications", "seed", "threads", "out_dir", "format", "curve",
    "theta2_min", "theta2_max",
)


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _SCENARIO_FLAGS)
    scenario = cfg.scenario()
    grid = parse_grid(cfg.curve) if cfg.curve else None
    for g in grid or ():
        if g not in scenario.box:
            raise UsageError(f"curve point {g} outside the theta2 box")
    out = _out_dir(cfg.out_dir)
    prov = cfg.provenance()

    res = run_paired(scenario, cfg.threads, cfg.drop_boundary)
    record = scenario_record(res)
    record["drop_boundary"] = cfg.drop_boundary
    _write_csv(out / "scenario.csv", [record], prov)

    curve_rows: list[dict[str, Any]] = []
    if grid is not None:
        for row in efficiency_curve(scenario, grid, cfg.threads, cfg.drop_boundary):
            curve_rows.append({
                "theta2_guess": row.theta2_guess, "rel_eff": row.rel_eff,
                "mc_stderr": row.mc_stderr, "mse_fixed": row.mse_fixed,
                "mse_adaptive": row.mse_adaptive,
            })
        _write_csv(out / "curve.csv", curve_rows, prov)

    summary = {"config": prov, "scenario": record, "curve": curve_rows or None}
    (out / "summary.json").write_text(_dump_json(summary))

    if cfg.format == "json":
        sys.stdout.write(_dump_json(summary))
    else:
        print(" ".join(f"{h:>13}" for h in _TABLE_HEADER))
        vals = (scenario.theta_true.theta2, scenario.theta2_guess, scenario.sigma,
                res.fixed.mse_total, res.adaptive.mse_total, res.rel_eff, res.rel_eff_stderr)
        print(" ".join(f"{_g6(v):>13}" for v in vals))
        for row in curve_rows:
            print(f"curve theta2_guess={_g6(row['theta2_guess'])} rel_eff={_g6(row['rel_eff'])} "
                  f"stderr={_g6(row['mc_stderr'])}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# asymvar
# ---------------------------------------------------------------------------

def cmd_asymvar(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _SCENARIO_FLAGS + ("draws",))
    if cfg.draws < 1:
        raise UsageError("--draws must be at least 1")
    interval = cfg.dose_interval()
    stage1 = apportion(d_optimal_emax(cfg.theta2_guess, interval), cfg.n1)
    sampler = MixtureLawSampler(
        theta_true=cfg.theta_true(), sigma=cfg.sigma, stage1_design=stage1,
        dose_interval=interval, n1=cfg.n1, stage1_sigma=cfg.stage1_sigma, box=cfg.box(),
    )
    av = asymptotic_variance(sampler, cfg.draws, cfg.seed, cfg.threads)
    trace = float(np.trace(av.mean))
    payload = {
        "config": cfg.provenance(),
        "asymptotic_variance": av.mean,
        "asymptotic_variance_stderr": av.stderr,
        "plugin_inverse_information": av.plugin,
        "jensen_gap": av.jensen_gap,
        "min_gap_eigenvalue": av.min_gap_eigenvalue,
        "relative_min_gap_eigenvalue": av.min_gap_eigenvalue / trace,
        "singular_draws": av.n_singular,
        "draws": av.n_rep,
    }
    out = _out_dir(cfg.out_dir)
    (out / "asymvar.json").write_text(_dump_json(payload))
    if cfg.format == "json":
        sys.stdout.write(_dump_json(payload))
    else:
        def show(name: str, mat: np.ndarray) -> None:
            print(name)
            for row in mat:
                print("  " + " ".join(f"{_g6(v):>13}" for v in row))
        show("sigma^2 E[M^-1]", av.mean)
        show("Monte Carlo stderr", av.stderr)
        show("sigma^2 (E[M])^-1", av.plugin)
        print(f"min eigenvalue of difference = {_g6(av.min_gap_eigenvalue)} "
              f"({_g6(av.min_gap_eigenvalue / trace)} x trace)")
        print(f"singular draws = {av.n_singular} of {av.n_rep}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master random seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads, 0 = one per CPU (default $ADL_THREADS or 1)")
    common.add_argument("--out-dir", dest="out_dir", default=None, help="directory for output files")
    common.add_argument("--format", choices=("csv", "json"), default=None, help="report format")

    parser = argparse.ArgumentParser(prog="adl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", parents=[common], help="locally D-optimal Emax design")
    p.add_argument("--theta2", type=float, required=True)
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--b", type=float, default=150.0)
    p.add_argument("--n", type=int, default=None, help="apportion to n subjects")
    p.add_argument("--verify-grid", dest="verify_grid", type=int, default=None)
    p.add_argument("--theta0", type=float, default=2.0)
    p.add_argument("--theta1", type=float, default=0.467)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("fit", parents=[common], help="maximum-likelihood fit of a dataset")
    p.add_argument("--data", required=True, help="CSV with columns stage,dose,replicate,y")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--trace", action="store_true", help="include the profile trace (json)")
    p.add_argument("--theta2-min", dest="theta2_min", type=float, default=0.015)
    p.add_argument("--theta2-max", dest="theta2_max", type=float, default=1500.0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bias", parents=[common], help="first-order bias of the interim theta2")
    p.add_argument("--theta", required=True, help="theta0,theta1,theta2")
    p.add_argument("--theta2-guess", dest="theta2_guess", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--n1", type=int, required=True)
    p.add_argument("--a", type=float, default=0.0)
    p.add_argument("--b", type=float, default=150.0)
    p.set_defaults(func=cmd_bias)

    scen = argparse.ArgumentParser(add_help=False)
    scen.add_argument("--config", default=None, help="key = value configuration file")
    for flag, kind in (
        ("theta0", float), ("theta1", float), ("theta2", float), ("theta2-guess", float),
        ("sigma", float), ("stage1-sigma", float), ("n1", int), ("n2", int),
        ("a", float), ("b", float), ("theta2-min", float), ("theta2-max", float),
    ):
        scen.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=kind, default=None)

    p = sub.add_parser("simulate", parents=[common, scen], help="fixed vs adaptive Monte Carlo study")
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--curve", default=None, help="theta2 guess grid start:stop:count(log|lin)")
    p.add_argument("--drop-boundary", dest="drop_boundary", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("asymvar", parents=[common, scen], help="asymptotic variance of the two-stage MLE")
    p.add_argument("--draws", type=int, default=None)
    p.set_defaults(func=cmd_asymvar)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "design" and args.out_dir is None:
        args.out_dir = "."
    try:
        return args.func(args)
    except RankDeficiencyError as exc:
        print(f"degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (SingularMatrixError, SingularRateError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
