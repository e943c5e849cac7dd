"""Command line: run one scenario with its references, or time ping scans."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .harness.bench import ping_scan_benchmark
from .harness.config import KillMethod, KillSpec, ScenarioConfig, TimingParams, default_kills, parse_scenario
from .harness.metrics import emit_metrics
from .harness.scenario import run_scenario
from .solver.driver import SolverConfig
from .solver.matrix import StencilParams


def _fmt(x, unit="s") -> str:
    return "-" if x is None else f"{x:.4f}{unit}"


def build_config(args) -> ScenarioConfig:
    kind, k = parse_scenario(args.scenario)
    kills = tuple(KillSpec.parse(text) for text in args.kill)
    if kills:
        k = k or len(kills)
    elif k:
        method = KillMethod(args.kill_method.upper())
        kills = default_kills(kind, k, args.workers, args.iterations, args.cp_interval, method)
    nx = args.grid
    solver = SolverConfig(n_global=nx * nx, stencil=StencilParams.grid(nx), max_iterations=args.iterations,
                          cp_interval=args.cp_interval, eig_interval=args.eig_interval, seed=args.seed)
    timing = replace(TimingParams(), scan_period_s=args.scan_period, timeout_ms=int(round(args.timeout * 1000)),
                     parallelism=args.parallelism)
    return ScenarioConfig(n_workers=args.workers, n_spares=args.spares, scenario=kind, k=k, kills=kills,
                          seed=args.seed, solver=solver, timing=timing, mode=args.mode)


def cmd_run(args) -> int:
    cfg = build_config(args)
    report = run_scenario(cfg, references=not args.no_references)
    print(f"scenario {report.scenario} ({report.mode}) W={report.n_workers} spares={report.n_spares} "
          f"seed={report.seed}")
    print(f"  t_total {_fmt(report.t_total)}  baseline {_fmt(report.t_baseline_ref)}  "
          f"oh_cp {_fmt(report.oh_cp)}  oh_hc {_fmt(report.oh_hc)}")
    for f in report.failures:
        print(f"  notice {f.seqno}: failed {list(f.failed)} at iteration {f.fail_iteration}, restart "
              f"{f.restart_iteration}: oh_f1 {_fmt(f.oh_f1)} oh_f2 {_fmt(f.oh_f2)} oh_f3 {_fmt(f.oh_f3)} "
              f"redo {_fmt(f.redo_work)}")
    if report.integrity is None:
        verdict = "all workers agree (no reference run to compare against)" if report.consistent else \
            "workers disagree or the run did not complete"
    else:
        verdict = "bitwise identical to the failure-free run" if report.integrity else \
            "MISMATCH with the failure-free run, or the run did not complete"
    print(f"  eigenvalues: {verdict}")
    if args.out:
        emit_metrics(report, args.out)
        print(f"  metrics appended to {args.out}")
    passed = report.integrity if report.integrity is not None else report.consistent
    return 0 if passed else 1


def cmd_bench_ping(args) -> int:
    counts = [int(x) for x in args.ranks.split(",") if x.strip()]
    result = ping_scan_benchmark(counts, scans=args.scans)
    print("ranks  mean_scan_s  stdev_s   fit_s      residual")
    residuals = result.residuals()
    for row in result.rows:
        print(f"{row.ranks:5d}  {row.mean_s:.6f}   {row.stdev_s:.6f}  {result.predicted(row.ranks):.6f}  "
              f"{residuals[row.ranks]:+.1%}")
    print(f"per-ping cost (slope): {result.slope_s * 1e6:.1f} us")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftpgas", description="fault-tolerant Lanczos runs with spare-rank recovery")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and its failure-free references")
    run.add_argument("--scenario", default="HC_CP",
                     help="BASELINE, CP_ONLY, HC_CP, FAIL_<k>, FAIL_<k>_SEQ or FAIL_<k>_SIM")
    run.add_argument("--workers", type=int, default=8)
    run.add_argument("--spares", type=int, default=2)
    run.add_argument("--kill", action="append", default=[], metavar="TARGET@WHEN:METHOD",
                     help="e.g. 1@120:EXIT, 3@t1.5:SIGKILL, random@random:SIGKILL (repeatable)")
    run.add_argument("--kill-method", default="EXIT", help="method for the default FAIL schedules")
    run.add_argument("--iterations", type=int, default=300)
    run.add_argument("--cp-interval", type=int, default=50)
    run.add_argument("--eig-interval", type=int, default=50)
    run.add_argument("--grid", type=int, default=32, help="stencil grid side; the matrix has grid**2 rows")
    run.add_argument("--scan-period", type=float, default=0.5)
    run.add_argument("--timeout", type=float, default=0.25, help="ping timeout in seconds")
    run.add_argument("--parallelism", type=int, default=8)
    run.add_argument("--mode", choices=("sim", "process"), default="sim")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--no-references", action="store_true", help="skip the failure-free reference runs")
    run.add_argument("--out", help="append a metrics row to this CSV file")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench-ping", help="time sequential ping scans over local ranks")
    bench.add_argument("--ranks", default="4,8,16,32")
    bench.add_argument("--scans", type=int, default=10)
    bench.set_defaults(func=cmd_bench_ping)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
