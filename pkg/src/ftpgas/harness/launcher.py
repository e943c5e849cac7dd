"""Start all ranks of a scenario, inject time-based faults, collect events.

Both launchers return a :class:`RunResult` holding a flat, time-ordered list
of event dicts (``t``, ``rank``, ``kind`` plus event fields). Metrics are
computed from those events only, so both modes share one accounting path.
"""

from __future__ import annotations

import json
import logging
import os
import random
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..checkpoint import StoreLayout
from ..detector import Layout, ProcessStatusTable
from ..recovery import RankMap
from ..transport import SimKernel, SimNetwork, find_free_base_port
from .config import KillMethod, KillSpec, ScenarioConfig
from .node import FiredRegistry, node_main

log = logging.getLogger(__name__)


class LaunchError(RuntimeError):
    pass


@dataclass
class RunResult:
    config: ScenarioConfig
    events: list
    wall_s: float
    kill_log: list = field(default_factory=list)
    timed_out: bool = False

    def of_kind(self, kind: str) -> list:
        return [e for e in self.events if e["kind"] == kind]

    @property
    def aborted(self) -> bool:
        return any(e["kind"] in ("abort", "crash") for e in self.events)

    def status_table(self) -> ProcessStatusTable:
        return ProcessStatusTable.initial(Layout(self.config.n_workers, self.config.n_spares))


def resolve_kill_plan(cfg: ScenarioConfig) -> ScenarioConfig:
    """Replace random targets and random instants by concrete draws from the run seed."""
    rng = random.Random(cfg.seed * 7919 + 17)
    kills = []
    for kill in cfg.kills:
        target = kill.target if kill.target is not None else rng.randrange(cfg.n_workers)
        if kill.random_time:
            lo, hi = cfg.timing.random_window
            kills.append(KillSpec(target, kill.method, at_time=rng.uniform(lo, hi)))
        else:
            kills.append(KillSpec(target, kill.method, kill.at_iteration, kill.at_time))
    return cfg.variant(cfg.scenario, tuple(kills), cfg.k)


class _RankMapTracker:
    """Current logical-to-physical map as seen from accepted failure notices."""

    def __init__(self, n_workers: int):
        self.n_workers = n_workers
        self.map = RankMap.identity(n_workers)

    def update(self, event: dict) -> None:
        if event["kind"] == "reinit_start" and event.get("version", 0) > self.map.version:
            self.map = RankMap(event["rank_map"], event["version"])


def _prepare_store(cfg: ScenarioConfig, workdir: Path) -> ScenarioConfig:
    if not cfg.checkpointing:
        return cfg
    store = cfg.store_root or str(workdir / "store")
    durable = cfg.durable_root
    if cfg.durable_every and durable is None:
        durable = str(workdir / "durable")
    from dataclasses import replace

    return replace(cfg, store_root=store, durable_root=durable)


# -- simulation mode ---------------------------------------------------------


def run_sim(cfg: ScenarioConfig, workdir: Optional[Path] = None) -> RunResult:
    """Run every rank as cooperative tasks on one virtual clock."""
    cleanup = workdir is None
    workdir = Path(tempfile.mkdtemp(prefix="ftpgas-sim-")) if workdir is None else Path(workdir)
    t_wall = time.perf_counter()
    try:
        cfg = _prepare_store(resolve_kill_plan(cfg), workdir)
        kernel = SimKernel()
        net = SimNetwork(kernel, cfg.n_ranks, cfg.timing.sim_latency_s, cfg.timing.sim_bandwidth)
        events: list = []
        tracker = _RankMapTracker(cfg.n_workers)
        store = StoreLayout(cfg.store_root, cfg.durable_root) if cfg.store_root else None
        fired = FiredRegistry()
        state = {"ended": 0, "abort": False}

        def emitter(rank):
            def emit(kind, **fields):
                rec = {"t": kernel.now, "rank": rank, "kind": kind, **fields}
                events.append(rec)
                tracker.update(rec)
                if kind == "solve_end":
                    state["ended"] += 1
                elif kind in ("abort", "crash"):
                    state["abort"] = True
            return emit

        from ..transport.sim import SimEvent

        stop = SimEvent(kernel)
        for rank in range(cfg.n_ranks):
            ep = net.endpoint(rank, cfg.timing.timeout_ms)
            kernel.spawn(node_main, ep, cfg, emitter(rank), fired, stop, owner=rank, name=f"node{rank}")

        def kill(kill_spec: KillSpec, index: int) -> None:
            physical = tracker.map.resolve(kill_spec.target)
            if not net.is_open(physical):
                raise LaunchError(f"kill target {physical} already dead")
            events.append({"t": kernel.now, "rank": -1, "kind": "inject", "method": kill_spec.method.value,
                           "logical": kill_spec.target, "physical": physical, "kill_index": index})
            if kill_spec.method is KillMethod.LINK_DROP:
                net.isolate(physical)
            else:
                net.kill(physical, issuer="injector")
                if store is not None:
                    store.wipe(physical)

        timed = [(k.at_time, i, k) for i, k in enumerate(cfg.kills) if k.at_time is not None]
        if timed:
            def injector():
                def started():
                    return any(e["kind"] == "solve_start" for e in events)

                while not started():
                    kernel.sleep(0.001)
                t0 = min(e["t"] for e in events if e["kind"] == "solve_start")
                for at, index, spec in sorted(timed, key=lambda x: (x[0], x[1])):
                    delay = t0 + at - kernel.now
                    if delay > 0:
                        kernel.sleep(delay)
                    kill(spec, index)

            kernel.spawn(injector, owner="injector", name="injector")

        def finished():
            return state["ended"] >= cfg.n_workers or state["abort"]

        try:
            kernel.run(until=cfg.timing.max_virtual_s, stop=finished)
        finally:
            stop.set()
            timed_out = not finished()
            try:
                kernel.shutdown()
            except RuntimeError:
                log.debug("errors while unwinding the simulation", exc_info=True)
        events.sort(key=lambda e: e["t"])
        kill_log = [(t, issuer, rank) for t, issuer, rank in net.kill_log]
        for ep in net.endpoints.values():
            for t, target in ep.kills_issued:
                events.append({"t": t, "rank": ep.rank, "kind": "proc_kill", "target": target})
        events.sort(key=lambda e: e["t"])
        return RunResult(cfg, events, time.perf_counter() - t_wall, kill_log, timed_out)
    finally:
        if cleanup:
            shutil.rmtree(workdir, ignore_errors=True)


# -- process mode ------------------------------------------------------------


def _read_events(run_dir: Path, n_ranks: int) -> list:
    events = []
    for rank in range(n_ranks):
        path = run_dir / f"events-{rank}.jsonl"
        if not path.exists():
            continue
        for line in path.read_text().splitlines():
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError:
                pass  # a line cut short by SIGKILL
    return events


def run_process(cfg: ScenarioConfig, workdir: Optional[Path] = None, base_port: Optional[int] = None) -> RunResult:
    """One OS process per rank on loopback TCP; SIGKILL injections come from here."""
    cleanup = workdir is None
    workdir = Path(tempfile.mkdtemp(prefix="ftpgas-proc-")) if workdir is None else Path(workdir)
    run_dir = workdir / "run"
    run_dir.mkdir(parents=True, exist_ok=True)
    t_wall = time.perf_counter()
    procs = []
    try:
        cfg = _prepare_store(resolve_kill_plan(cfg), workdir)
        (run_dir / "config.json").write_text(json.dumps(cfg.to_dict()))
        port = base_port if base_port is not None else find_free_base_port(cfg.n_ranks)
        env = dict(os.environ)
        src_root = str(Path(__file__).resolve().parents[2])
        env["PYTHONPATH"] = src_root + os.pathsep + env.get("PYTHONPATH", "")
        for rank in range(cfg.n_ranks):
            procs.append(subprocess.Popen(
                [sys.executable, "-m", "ftpgas.harness.node", "--run-dir", str(run_dir), "--rank", str(rank),
                 "--base-port", str(port)],
                stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, env=env))
        pids = {}
        for rank, proc in enumerate(procs):
            line = proc.stdout.readline()
            if not line.startswith("ready"):
                raise LaunchError(f"rank {rank} failed to start (exit {proc.poll()})")
            pids[rank] = proc.pid
        go = "go " + json.dumps(pids) + "\n"
        for proc in procs:
            proc.stdin.write(go)
            proc.stdin.flush()
        launcher_events: list = []
        kill_log: list = []
        store = StoreLayout(cfg.store_root, cfg.durable_root) if cfg.store_root else None

        def current_map() -> RankMap:
            tracker = _RankMapTracker(cfg.n_workers)
            for e in sorted(_read_events(run_dir, cfg.n_ranks), key=lambda e: e["t"]):
                tracker.update(e)
            return tracker.map

        timed = sorted(((k.at_time, i, k) for i, k in enumerate(cfg.kills) if k.at_time is not None),
                       key=lambda x: (x[0], x[1]))
        deadline = time.monotonic() + cfg.timing.max_wall_s
        t0 = None
        timed_out = False
        while True:
            events = _read_events(run_dir, cfg.n_ranks)
            if t0 is None:
                starts = [e["t"] for e in events if e["kind"] == "solve_start"]
                if starts:
                    t0 = min(starts)
            while timed and t0 is not None and time.monotonic() >= t0 + timed[0][0]:
                _, index, spec = timed.pop(0)
                physical = current_map().resolve(spec.target)
                t_inject = time.monotonic()
                try:
                    os.kill(pids[physical], signal.SIGKILL)
                except ProcessLookupError:
                    raise LaunchError(f"kill target {physical} already dead") from None
                kill_log.append((t_inject, "injector", physical))
                launcher_events.append({"t": t_inject, "rank": -1, "kind": "inject", "method": spec.method.value,
                                        "logical": spec.target, "physical": physical, "kill_index": index})
                if store is not None:
                    store.wipe(physical)
            ended = sum(e["kind"] == "solve_end" for e in events)
            if ended >= cfg.n_workers or any(e["kind"] in ("abort", "crash") for e in events):
                break
            if time.monotonic() > deadline:
                timed_out = True
                break
            if all(p.poll() is not None for p in procs[:cfg.n_workers]):
                break
            time.sleep(0.005 if timed else 0.02)
        # the detector goes first: workers leaving before it stops would look like failures
        fd_rank = Layout(cfg.n_workers, cfg.n_spares).fd_rank
        shutdown_order = [procs[fd_rank]] + [p for r, p in enumerate(procs) if r != fd_rank]
        for i, proc in enumerate(shutdown_order):
            try:
                proc.stdin.close()
            except OSError:
                pass
            if i == 0:
                try:
                    proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    proc.kill()
        for proc in procs:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        events = _read_events(run_dir, cfg.n_ranks) + launcher_events
        events.sort(key=lambda e: e["t"])
        return RunResult(cfg, events, time.perf_counter() - t_wall, kill_log, timed_out)
    finally:
        for proc in procs:
            if proc.poll() is None:
                proc.kill()
                proc.wait()
            for stream in (proc.stdin, proc.stdout):
                try:
                    if stream:
                        stream.close()
                except OSError:
                    pass
        if cleanup:
            shutil.rmtree(workdir, ignore_errors=True)


def launch(cfg: ScenarioConfig, workdir: Optional[Path] = None) -> RunResult:
    if cfg.mode == "sim":
        return run_sim(cfg, workdir)
    return run_process(cfg, workdir)
