"""Command-line front end: ``robust-mhe <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .bench import ConfigError
from .mhe import Beta, HorizonWindow, run_estimator, solve_window
from .models import as_nonlinear
from .robustness import TIGHT_SOLVER, gross_error_sensitivity, z_grid

log = logging.getLogger("robust_mhe")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


def _load(args):
    cfg = bench.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    if getattr(args, "trials", None):
        cfg = replace(cfg, n_trials=args.trials)
    return cfg


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _report_failures(results):
    bad = bench.failures(results)
    if bad:
        log.warning("%d of %d estimator runs failed", len(bad), len(results))
        for r in bad[:10]:
            log.warning("  %s trial %d: %s", r.estimator, r.trial, r.status)


def _print_summary(results, header=""):
    if header:
        print(header)
    for row in bench.summarize(results):
        if row["n_ok"]:
            print(f"  {row['estimator']:<20} rmse {row['mean']:.6g} +- {row['std']:.3g}  "
                  f"step {row['mean_step_ms']:.4g} ms  failed {row['n_failed']}")
        else:
            print(f"  {row['estimator']:<20} all {row['n_failed']} runs failed")


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    cfg = _load(args)
    model, _, controls = bench.build_model(cfg.model, cfg.n_steps)
    traj = bench.simulate_trial(cfg, model, cfg.contamination, controls, 0)
    n, m = traj.states.shape[1], traj.measurements.shape[1]
    header = ["t"] + [f"x{i}" for i in range(n)] + [f"y{j}" for j in range(m)] + ["outlier_flag"]
    rows = []
    for k in range(traj.n_steps):
        rows.append([k + 1] + [repr(float(v)) for v in traj.states[k + 1]]
                    + [repr(float(v)) for v in traj.measurements[k]] + [int(traj.outlier_flags[k])])
    out = args.out or "trajectory.csv"
    _write_rows(out, header, rows)
    log.info("wrote %d steps to %s (seed %d)", traj.n_steps, out, traj.seed)
    return EXIT_OK


def cmd_estimate(args):
    cfg = _load(args)
    results = bench.run_experiment(cfg, args.workers)
    out = args.out or f"results.{args.format}"
    bench.export_results(results, out, args.format)
    _print_summary(results, f"{cfg.name or cfg.model}: {cfg.n_trials} trials")
    _report_failures(results)
    return EXIT_OK


def cmd_sweep_beta(args):
    cfg = _load(args)
    results = bench.sweep_beta(cfg, args.workers)
    out = args.out or f"sweep_beta.{args.format}"
    bench.export_results(results, out, args.format)
    _print_summary(results, f"beta sweep over {list(cfg.beta_grid)}")
    _report_failures(results)
    return EXIT_OK


def cmd_sweep_pc(args):
    cfg = _load(args)
    out = _out_dir(args.out or "sweep_pc")
    swept = bench.sweep_pc(cfg, args.workers)
    _write_pc_outputs(swept, out, args.format)
    return EXIT_OK


def _write_pc_outputs(swept, out, fmt):
    rows = []
    for p_c, results in swept.items():
        bench.export_results(results, out / f"results_pc{p_c:g}.{fmt}", fmt)
        _print_summary(results, f"p_c = {p_c:g}")
        _report_failures(results)
        for row in bench.summarize(results):
            rows.append([f"{p_c:g}", row["estimator"], row.get("mean", ""), row.get("std", ""),
                         row["n_ok"], row["n_failed"]])
    _write_rows(out / "summary.csv", ["p_c", "estimator", "mean_rmse", "std_rmse", "n_ok", "n_failed"], rows)


def _write_bands(results, cfg, path):
    rows = []
    for spec in cfg.estimators:
        try:
            bands = bench.error_bands(results, spec.name)
        except ValueError:
            continue
        N, n = bands["mean"].shape
        for t in range(N):
            for s in range(n):
                rows.append([t + 1, spec.name, s, repr(float(bands["mean"][t, s])),
                             repr(float(bands["lo"][t, s])), repr(float(bands["hi"][t, s]))])
    _write_rows(path, ["t", "estimator", "state", "mean", "lo95", "hi95"], rows)


def _write_summary(results, path):
    rows = [[r["estimator"], r.get("mean", ""), r.get("std", ""), r.get("median", ""),
             r.get("p5", ""), r.get("p95", ""), r.get("mean_step_ms", ""), r["n_ok"], r["n_failed"]]
            for r in bench.summarize(results)]
    _write_rows(path, ["estimator", "mean_rmse", "std_rmse", "median_rmse", "p5_rmse", "p95_rmse",
                       "mean_step_ms", "n_ok", "n_failed"], rows)


def cmd_reproduce(args):
    fig = args.figure
    if fig not in bench.FIGURES:
        print(f"unknown figure {fig!r}; valid ids: {', '.join(bench.FIGURES)}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = bench.config_from_dict(bench.figure_config(fig))
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    if args.trials:
        cfg = replace(cfg, n_trials=args.trials)
    out = _out_dir(args.out or fig)
    fmt = args.format
    if fig == "fig2":
        results = bench.sweep_beta(cfg, args.workers)
        bench.export_results(results, out / f"results.{fmt}", fmt)
        _write_summary(results, out / "summary.csv")
        _print_summary(results, "RMSE per estimator and beta")
        _report_failures(results)
    elif fig in ("fig4", "fig9"):
        if fig == "fig9":
            cfg = bench.with_beta_grid(cfg, bench.beta_template(cfg))
        _write_pc_outputs(bench.sweep_pc(cfg, args.workers), out, fmt)
    else:
        cfg = replace(cfg, record_state_errors=True)
        runs = {None: cfg.contamination.p_c} if fig != "fig10" else {p: p for p in cfg.pc_grid}
        for tag, p_c in runs.items():
            results = bench.run_experiment(cfg, args.workers, cfg.contamination.with_p_c(p_c))
            suffix = "" if tag is None else f"_pc{p_c:g}"
            bench.export_results(results, out / f"results{suffix}.{fmt}", fmt)
            _write_summary(results, out / f"summary{suffix}.csv")
            _write_bands(results, cfg, out / f"bands{suffix}.csv")
            _print_summary(results, f"{fig} p_c = {p_c:g}")
            _report_failures(results)
    log.info("wrote %s outputs to %s", fig, out)
    return EXIT_OK


def cmd_analyze_if(args):
    cfg = _load(args)
    specs = [e for e in cfg.estimators if e.kind == "mhe"]
    if args.estimator:
        specs = [e for e in specs if e.name == args.estimator]
    if not specs:
        raise ConfigError("analyze-if needs an MHE estimator in the config")
    spec = specs[0]
    model, _, controls = bench.build_model(cfg.model, cfg.n_steps)
    traj = bench.simulate_trial(cfg, model, cfg.contamination, controls, 0)
    trace = run_estimator(model, traj.measurements, spec.mhe, traj.controls)
    step = args.step or len(trace.windows)
    if not 1 <= step <= len(trace.windows):
        raise ConfigError(f"--step must lie in [1, {len(trace.windows)}]")
    window: HorizonWindow = trace.windows[step - 1]
    kind = spec.mhe.stage_cost
    X, _ = solve_window(window, model, kind, TIGHT_SOLVER, initial=trace.smoothed[step - 1])
    grid = z_grid(as_nonlinear(model).m, args.z_min, args.z_max, args.z_points)
    beta = kind.beta if isinstance(kind, Beta) else None
    report = gross_error_sensitivity(window, X, model, beta, grid, kind=kind)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    print(f"verdict: {report.verdict}  bound: {report.bound}  empirical sup: {report.empirical_sup:.6g}  "
          f"growth ratio: {report.growth_ratio}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int, help="override the config's base seed")
    common.add_argument("--workers", type=int, default=None,
                        help="trial worker processes (default: $ROBUST_MHE_WORKERS or 1)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--trials", type=int, help="override the number of trials")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="robust-mhe", description="Robust moving horizon estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, helptext):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--config", required=True, help="experiment config JSON")
        return p

    with_config("simulate", "simulate one trajectory to CSV").set_defaults(func=cmd_simulate)
    with_config("estimate", "run all estimators over all trials").set_defaults(func=cmd_estimate)
    with_config("sweep-beta", "sweep the beta-MHE estimator over the beta grid").set_defaults(func=cmd_sweep_beta)
    with_config("sweep-pc", "rerun the experiment for each contamination probability").set_defaults(func=cmd_sweep_pc)
    p = with_config("analyze-if", "influence-function sensitivity report for one window")
    p.add_argument("--estimator", help="MHE estimator name (default: first MHE entry)")
    p.add_argument("--step", type=int, help="window end step (default: last)")
    p.add_argument("--z-min", type=float, default=1.0)
    p.add_argument("--z-max", type=float, default=1e6)
    p.add_argument("--z-points", type=int, default=61)
    p.set_defaults(func=cmd_analyze_if)
    p = sub.add_parser("reproduce", parents=[common], help="run a pinned figure configuration")
    p.add_argument("figure", help=f"one of {', '.join(bench.FIGURES)}")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    if args.workers is None:
        args.workers = bench.default_workers()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
