"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 a pass/fail check failed. The run-directory root defaults to ``./runs``
and can be moved with the ``SOFTMOE_RUNS`` environment variable.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from softmoe.config import config_keys, parse_config
from softmoe.errors import ConfigError, NumericalFailure
from softmoe.experiment import STAGES, default_run_dir, resume_stage, run_experiment, runs_root, write_csv
from softmoe.hermite import DEFAULT_K, assumption_sigmoid_check, cs_ratio_check, default_grid, sigmoid_profile
from softmoe.svg import emit_heatmap

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'section.key = value' file")
    group = p.add_argument_group("config overrides")
    for key, (_, default) in config_keys().items():
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", help=f"default {default}")


def _overrides(args) -> dict[str, str]:
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}


def _run_dir(args, cfg) -> Path:
    return args.run_dir if args.run_dir is not None else default_run_dir(cfg)


def cmd_simulate(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    art = run_experiment(cfg, _run_dir(args, cfg), args.stop_after)
    _print_flags(art.run_dir, art.summary)
    if args.strict and not all(v for v in art.summary["flags"].values() if v is not None):
        return EXIT_CHECK
    return EXIT_OK


def _print_flags(run_dir, summary) -> None:
    print(f"run directory: {run_dir}")
    for stage, status in summary.get("stages", {}).items():
        print(f"  stage {stage}: {status}")
    for key, value in summary.get("flags", {}).items():
        print(f"  {key}: {value}")


def _resume(stage):
    def run(args) -> int:
        run_dir = args.run_dir
        if run_dir is None:
            raise ConfigError("--run-dir is required")
        art = resume_stage(run_dir, stage)
        _print_flags(art.run_dir, art.summary)
        ok = art.summary.get("stages", {}).get(stage) == "ok"
        return EXIT_OK if ok else EXIT_CHECK

    return run


def cmd_check_sigmoid(args) -> int:
    out = args.out if args.out is not None else runs_root() / "sigmoid"
    out.mkdir(parents=True, exist_ok=True)
    grid = default_grid(201)
    rep = assumption_sigmoid_check(grid, method=args.method)
    write_csv(out / "sigmoid_check.csv", ["rho", "value"], zip(rep.grid, rep.values))
    ratio = cs_ratio_check()
    lines = [
        f"cross_moment_max = {rep.max_value:.12g}",
        f"cross_moment_pass = {rep.passed}",
        f"cs0 = {ratio.cs0:.12g}",
        f"cs1 = {ratio.cs1:.12g}",
        f"cs_ratio = {ratio.ratio:.12g}",
        f"cs_ratio_pass = {ratio.passed}",
    ]
    (out / "sigmoid_summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if rep.passed and ratio.passed else EXIT_CHECK


def cmd_hermite_table(args) -> int:
    prof = sigmoid_profile(args.K)
    K = prof.truncation_order
    rows = [[k, prof.coeffs[k], prof.coeffs[k] ** 2 / math.factorial(k)] for k in range(K + 4)]
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_csv(args.out, ["k", "c_k", "c_k_sq_over_fact"], rows)
    for k, c, s in rows:
        print(f"{int(k):3d} {c: .12e} {s: .6e}")
    print(f"cs0 = {prof.cs0:.12g}  cs1 = {prof.cs1:.12g}  cs2 = {prof.cs2:.12g}  converged = {prof.converged}")
    return EXIT_OK


def cmd_render(args) -> int:
    out = args.out if args.out is not None else args.csv.with_suffix(".svg")
    try:
        emit_heatmap(args.csv, out, args.title or "")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(out)
    return EXIT_OK


def cmd_verify(args) -> int:
    from softmoe.verify import run_all

    results = run_all()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softmoe", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="init, train, prune and fine-tune one configuration")
    _add_config_flags(p)
    p.add_argument("--run-dir", type=Path)
    p.add_argument("--stop-after", choices=STAGES, default="finetune")
    p.add_argument("--strict", action="store_true", help="exit 4 if any pass flag is false")
    p.set_defaults(func=cmd_simulate)

    for name in ("prune", "finetune"):
        p = sub.add_parser(name, help=f"re-run the {name} stage of an existing run")
        p.add_argument("--run-dir", type=Path)
        p.set_defaults(func=_resume(name))

    p = sub.add_parser("check-sigmoid", help="tabulate the gate cross moment and the cs0/cs1 ratio")
    p.add_argument("--out", type=Path)
    p.add_argument("--method", choices=("series", "quadrature"), default="series")
    p.set_defaults(func=cmd_check_sigmoid)

    p = sub.add_parser("hermite-table", help="print the sigmoid Hermite coefficients")
    p.add_argument("--K", type=int, default=DEFAULT_K)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_hermite_table)

    p = sub.add_parser("render", help="SVG heatmap of a matrix CSV")
    p.add_argument("csv", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--title")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("verify", help="quick analytic/Monte-Carlo/finite-difference agreement checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    np.seterr(over="warn")
    sys.exit(main())
