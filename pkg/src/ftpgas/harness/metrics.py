"""Overhead accounting from run events, and the metrics CSV.

Every number here is derived post hoc from the event list of a
:class:`~ftpgas.harness.launcher.RunResult`. A recovery is identified by the
notice sequence number the workers restarted under; it covers every notice
accepted since the previous recovery and every injection those notices name.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .launcher import RunResult


@dataclass
class FailureOverhead:
    seqno: int
    failed: tuple
    injected_at: float
    fail_iteration: Optional[int]
    restart_iteration: int
    oh_f1: float
    oh_f2: float
    oh_f3: float
    redo_work: float
    accept_latencies: dict = field(default_factory=dict)

    @property
    def redo_iterations(self) -> Optional[int]:
        if self.fail_iteration is None:
            return None
        return self.fail_iteration - self.restart_iteration

    @property
    def total(self) -> float:
        return self.oh_f1 + self.oh_f2 + self.oh_f3 + self.redo_work


@dataclass
class OverheadReport:
    scenario: str
    mode: str
    n_workers: int
    n_spares: int
    seed: int
    kills: tuple
    t_total: float
    t_baseline_ref: Optional[float]
    oh_cp: Optional[float]
    oh_hc: Optional[float]
    failures: list
    iteration_time: float
    integrity: Optional[bool]
    completed: bool
    consistent: bool = False
    notices: int = 0
    runs: dict = field(default_factory=dict, repr=False, compare=False)

    def accounted(self) -> float:
        """Baseline plus every overhead term; compared against ``t_total``."""
        parts = [self.t_baseline_ref, self.oh_cp, self.oh_hc]
        return sum(p for p in parts if p is not None) + sum(f.total for f in self.failures)

    def accounting_holds(self, slack: float = 0.05) -> bool:
        return self.t_total >= self.accounted() - slack * self.t_total


# -- per-run measurements ------------------------------------------------------


def solve_span(run: RunResult) -> float:
    """Earliest solver start to the last worker's final eigenvalue report."""
    starts = [e["t"] for e in run.of_kind("solve_start")]
    ends = [e["t"] for e in run.of_kind("solve_end")]
    if not starts or not ends:
        raise ValueError("run has no complete solve")
    return max(ends) - min(starts)


def fingerprints(run: RunResult) -> set:
    return {e["fingerprint"] for e in run.of_kind("solve_end")}


def run_completed(run: RunResult) -> bool:
    return (not run.timed_out and not run.aborted
            and len(run.of_kind("solve_end")) == run.config.n_workers)


def _recoveries(events: list) -> list:
    """Seqno each recovery finished under, in order."""
    return sorted({e["seqno"] for e in events if e["kind"] == "restart"})


def failure_overheads(run: RunResult, iteration_time: float) -> list:
    events = run.events
    injections = [e for e in events if e["kind"] == "inject"]
    accepts = [e for e in events if e["kind"] == "notice_accept"]
    out = []
    previous = 0
    claimed: set = set()
    for seqno in _recoveries(events):
        covered = [e for e in accepts if previous < e["seqno"] <= seqno]
        failed = sorted({r for e in covered for r in e["failed"]})
        rescues = {r for e in covered for r in e["rescue"]}
        inj = [e for e in injections if e["physical"] in failed and id(e) not in claimed]
        claimed.update(id(e) for e in inj)
        restarts = [e for e in events if e["kind"] == "restart" and e["seqno"] == seqno]
        survivors = sorted({e["rank"] for e in restarts if e["rank"] not in rescues})
        injected_at = min(e["t"] for e in inj) if inj else min(e["t"] for e in covered)
        first_accept = {}
        for e in accepts:
            if e["seqno"] > previous and e["rank"] in survivors and e["rank"] not in first_accept:
                first_accept[e["rank"]] = e["t"]
        latencies = {r: t - injected_at for r, t in first_accept.items()}
        oh_f1 = max(latencies.values()) if latencies else 0.0
        rebuild = [e["t"] for e in events if e["kind"] == "rebuild_start" and previous < e["seqno"] <= seqno]
        commits = [e["t"] for e in events if e["kind"] == "commit_done" and e["seqno"] == seqno]
        oh_f2 = max(commits) - min(rebuild) if rebuild and commits else 0.0
        reinit = [e["t"] for e in events if e["kind"] == "reinit_start" and e["seqno"] == seqno]
        oh_f3 = max(e["t"] for e in restarts) - min(reinit) if reinit else 0.0
        restart_iteration = restarts[0]["restart"]
        reached = [e["reached"] for e in restarts if e.get("reached") is not None]
        fail_iteration = max(reached) if reached else None
        redo = (fail_iteration - restart_iteration) * iteration_time if fail_iteration is not None else 0.0
        out.append(FailureOverhead(seqno, tuple(failed), injected_at, fail_iteration, restart_iteration,
                                   oh_f1, oh_f2, oh_f3, redo, latencies))
        previous = seqno
    return out


def build_report(run: RunResult, baseline: Optional[RunResult] = None, cp_only: Optional[RunResult] = None,
                 twin: Optional[RunResult] = None) -> OverheadReport:
    """Combine a scenario run with its failure-free reference runs."""
    cfg = run.config
    completed = run_completed(run)
    t_total = solve_span(run) if run.of_kind("solve_end") else float("nan")
    spans = {name: solve_span(r) for name, r in (("baseline", baseline), ("cp", cp_only), ("twin", twin))
             if r is not None and run_completed(r)}
    t_base = spans.get("baseline")
    oh_cp = spans["cp"] - t_base if "cp" in spans and t_base is not None else None
    oh_hc = spans["twin"] - spans["cp"] if "twin" in spans and "cp" in spans else None
    iterations = cfg.solver.max_iterations
    reference_span = spans.get("twin", t_total)
    iteration_time = reference_span / iterations if iterations else 0.0
    failures = failure_overheads(run, iteration_time)
    own = fingerprints(run)
    consistent = completed and len(own) == 1
    refs = [fingerprints(r) for r in (baseline, cp_only, twin) if r is not None]
    integrity = (consistent and all(ref == own for ref in refs)) if refs else None
    notices = len({e["seqno"] for e in run.of_kind("notice_accept")})
    runs = {"scenario": run}
    for name, r in (("baseline", baseline), ("cp_only", cp_only), ("twin", twin)):
        if r is not None:
            runs[name] = r
    return OverheadReport(cfg.name, cfg.mode, cfg.n_workers, cfg.n_spares, cfg.seed,
                          tuple(str(k) for k in cfg.kills), t_total, t_base, oh_cp, oh_hc, failures,
                          iteration_time, integrity, completed, consistent, notices, runs)


# -- CSV -----------------------------------------------------------------------

COLUMNS = (
    "scenario", "mode", "n_workers", "n_spares", "seed", "kills", "completed", "integrity",
    "t_total", "t_baseline_ref", "oh_cp", "oh_hc", "iteration_time", "n_failures",
    "oh_f1", "oh_f2", "oh_f3", "redo_work", "fail_iteration", "restart_iteration",
)
_FLOATS = ("t_total", "t_baseline_ref", "oh_cp", "oh_hc", "iteration_time")
_PER_FAILURE = ("oh_f1", "oh_f2", "oh_f3", "redo_work", "fail_iteration", "restart_iteration")


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def report_row(report: OverheadReport) -> dict:
    row = {
        "scenario": report.scenario, "mode": report.mode, "n_workers": report.n_workers,
        "n_spares": report.n_spares, "seed": report.seed, "kills": " ".join(report.kills),
        "completed": int(report.completed), "integrity": "" if report.integrity is None else int(report.integrity),
        "n_failures": len(report.failures),
    }
    for name in _FLOATS:
        row[name] = getattr(report, name)
    for name in _PER_FAILURE:
        row[name] = ";".join(_cell(getattr(f, name)) for f in report.failures)
    return {k: _cell(row[k]) for k in COLUMNS}


def emit_metrics(report: OverheadReport, path) -> Path:
    """Append one row for ``report``; the header is written once per file."""
    path = Path(path)
    fresh = not path.exists() or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        if fresh:
            writer.writeheader()
        writer.writerow(report_row(report))
    return path


def _parse_number(text: str):
    if text == "":
        return None
    if text in ("None",):
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def load_metrics(path) -> list:
    """Read a metrics file back; numeric cells become numbers, per-failure cells lists."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = dict(raw)
            for name in ("n_workers", "n_spares", "seed", "completed", "n_failures"):
                row[name] = int(row[name])
            row["integrity"] = None if row["integrity"] == "" else bool(int(row["integrity"]))
            for name in _FLOATS:
                row[name] = None if row[name] == "" else float(row[name])
            for name in _PER_FAILURE:
                row[name] = [] if row[name] == "" else [_parse_number(x) for x in row[name].split(";")]
            row["kills"] = row["kills"].split() if row["kills"] else []
            rows.append(row)
    return rows
