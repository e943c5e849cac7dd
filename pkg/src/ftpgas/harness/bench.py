"""Ping-scan timing against bare serving ranks on loopback."""

from __future__ import annotations

import os
import statistics
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

from ..detector import AvoidList, FaultDetector, Layout, ProcessStatusTable
from ..transport import find_free_base_port
from ..transport.tcp import TcpEndpoint


@dataclass
class ScanTiming:
    ranks: int
    mean_s: float
    stdev_s: float
    scans: int


@dataclass
class PingBenchResult:
    rows: list
    slope_s: float

    def predicted(self, ranks: int) -> float:
        return self.slope_s * ranks

    def residuals(self) -> dict:
        """Relative deviation of each measured mean from the fitted line."""
        return {row.ranks: (row.mean_s - self.predicted(row.ranks)) / self.predicted(row.ranks) for row in self.rows}

    def max_residual(self) -> float:
        return max(abs(r) for r in self.residuals().values())


def fit_through_origin(xs, ys) -> float:
    """Least-squares slope of ``y = slope * x``."""
    den = sum(x * x for x in xs)
    if den == 0:
        raise ValueError("need at least one non-zero x")
    return sum(x * y for x, y in zip(xs, ys)) / den


def _spawn_ranks(n: int, base_port: int) -> list:
    env = dict(os.environ)
    src_root = str(Path(__file__).resolve().parents[2])
    env["PYTHONPATH"] = src_root + os.pathsep + env.get("PYTHONPATH", "")
    procs = [subprocess.Popen([sys.executable, "-m", "ftpgas.transport", "--rank", str(r), "--ranks", str(n + 1),
                               "--base-port", str(base_port)], stdout=subprocess.PIPE, text=True, env=env)
             for r in range(n)]
    for r, proc in enumerate(procs):
        if not proc.stdout.readline().startswith("ready"):
            raise RuntimeError(f"bare rank {r} failed to start")
    return procs


def ping_scan_benchmark(rank_counts, scans: int = 10, warmup: int = 2, timeout_ms: int = 1000) -> PingBenchResult:
    """Mean duration of one sequential health-check scan over R live ranks.

    One set of ``max(rank_counts)`` serving processes is started; a scan over
    R ranks pings the first R of them one after another (parallelism 1) so
    the time grows with the per-ping cost.
    """
    counts = sorted(set(int(r) for r in rank_counts))
    if not counts or counts[0] < 1:
        raise ValueError("rank counts must be positive")
    if scans < 10:
        raise ValueError("at least ten scans per rank count")
    top = counts[-1]
    base_port = find_free_base_port(top + 1)
    procs = _spawn_ranks(top, base_port)
    ep = TcpEndpoint(top, top + 1, base_port, timeout_ms=timeout_ms)
    try:
        ep.register_segment(0, 4096)
        ep.start()
        status = ProcessStatusTable.initial(Layout(top, 1))
        detector = FaultDetector(ep, status, scan_period_s=0.0, parallelism=1, timeout_ms=timeout_ms)
        rows = []
        for r in counts:
            avoid = AvoidList(top + 1)
            for other in range(r, top):
                avoid.add(other)
            durations = []
            for i in range(warmup + scans):
                report = detector.glo_health_chk(avoid)
                if report.new_failures:
                    raise RuntimeError(f"rank(s) {report.new_failures} stopped answering during the benchmark")
                if i >= warmup:
                    durations.append(report.scan_duration)
            rows.append(ScanTiming(r, statistics.fmean(durations), statistics.stdev(durations), len(durations)))
        slope = fit_through_origin([row.ranks for row in rows], [row.mean_s for row in rows])
        return PingBenchResult(rows, slope)
    finally:
        ep.close()
        for proc in procs:
            proc.kill()
        for proc in procs:
            proc.wait()
            proc.stdout.close()
