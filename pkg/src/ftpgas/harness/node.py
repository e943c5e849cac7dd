"""What every rank runs: worker, fault detector or idle spare.

The same :func:`node_main` drives an in-process simulated rank and an OS
process (``python -m ftpgas.harness.node``). In process mode the launcher
starts every rank, waits until all of them listen, then releases them with a
``go`` line on stdin carrying the pid table. Events are appended as JSON
lines to ``events-<rank>.jsonl`` in the run directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
import threading
import time
from pathlib import Path
from typing import Callable, Optional

from ..checkpoint import CheckpointUnavailable, StoreLayout
from ..detector import (
    NOTICE_SEGMENT,
    NOTICE_SLOT_BYTES,
    FaultDetector,
    Layout,
    ProcessStatusTable,
    ProcStatus,
)
from ..recovery import NoticeWatcher, RecoveryAborted
from ..solver.driver import Worker, register_worker_segments
from .config import KillMethod, ScenarioConfig

log = logging.getLogger(__name__)


class FiredRegistry:
    """Remembers which iteration-triggered kills already happened (once per run)."""

    def __init__(self, directory: Optional[Path] = None):
        self.directory = Path(directory) if directory is not None else None
        self._fired: set = set()

    def claim(self, index: int) -> bool:
        if self.directory is None:
            if index in self._fired:
                return False
            self._fired.add(index)
            return True
        try:
            fd = os.open(self.directory / f"fired-{index}", os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            return False
        os.close(fd)
        return True


def register_node_segments(ep, n_workers: int):
    ep.register_segment(NOTICE_SEGMENT, NOTICE_SLOT_BYTES)
    return register_worker_segments(ep, n_workers)


def make_exit_hook(cfg: ScenarioConfig, store: Optional[StoreLayout], fired: FiredRegistry, emit: Callable):
    """Iteration-boundary hook implementing EXIT kills for the rank holding the target."""
    exits = [(i, k) for i, k in enumerate(cfg.kills) if k.method is KillMethod.EXIT]
    if not exits:
        return None

    def hook(worker: Worker, completed: int) -> None:
        for index, kill in exits:
            if kill.at_iteration != completed or kill.target != worker.logical:
                continue
            if not fired.claim(index):
                continue
            if worker.cp is not None:
                # pending replication finishes first, so redo work is exactly j mod interval
                worker.cp.quiesce()
            emit("inject", method="EXIT", logical=worker.logical, physical=worker.ep.rank, iteration=completed,
                 kill_index=index)
            if store is not None:
                store.wipe(worker.ep.rank)
            worker.ep.exit_self()

    return hook


def node_main(ep, cfg: ScenarioConfig, emit: Callable, fired: FiredRegistry, stop=None,
              segments: Optional[tuple] = None) -> Optional[object]:
    """Run rank ``ep.rank`` until its role is finished; returns the worker's report if any.

    ``segments`` are the exchanges from :func:`register_node_segments` when the
    caller registered them already (they must exist before peers may write).
    """
    layout = Layout(cfg.n_workers, cfg.n_spares)
    small, large = segments if segments is not None else register_node_segments(ep, cfg.n_workers)
    status = ProcessStatusTable.initial(layout)
    role = status[ep.rank]
    store = StoreLayout(cfg.store_root, cfg.durable_root) if cfg.checkpointing and cfg.store_root else None
    watcher = NoticeWatcher(ep, emit=emit)
    costs = (cfg.timing.sim_write_cost_per_byte, cfg.timing.sim_copy_cost_per_byte) if cfg.mode == "sim" else (0.0, 0.0)
    worker = Worker(ep, cfg.solver_config(), layout, small, large, watcher, store=store, emit=emit,
                    before_iteration=make_exit_hook(cfg, store, fired, emit), cp_costs=costs,
                    durable_every=cfg.durable_every, commit_timeout_ms=max(cfg.timing.timeout_ms, 1000))
    stop = stop if stop is not None else ep.event()
    emit("role", role=role.name)
    try:
        if role == ProcStatus.WORKING:
            worker.start_fresh()
            return worker.run()
        if role == ProcStatus.FD and cfg.health_check:
            detector = FaultDetector(ep, status, scan_period_s=cfg.timing.scan_period_s,
                                     parallelism=cfg.timing.parallelism, timeout_ms=cfg.timing.timeout_ms,
                                     fd_may_join=cfg.fd_may_join, emit=emit)
            # a simulated detector starts at a seeded point of its period; real ones start at random
            phase = random.Random(cfg.seed).uniform(0.0, cfg.timing.scan_period_s) if cfg.mode == "sim" else 0.0
            outcome = detector.run_detector_loop(stop, phase)
            emit("detector_stopped", outcome=outcome, scans=detector.scans)
            if outcome == "joined":
                watcher.last_seen = detector.notice.seqno
                worker.start_rescue(detector.notice)
                return worker.run()
            return None
        # idle spare (or a detector that does not scan): wait to be named as a rescue
        while not stop.is_set():
            if not ep.wait_local(watcher.pending, 200 if cfg.mode == "process" else None):
                continue
            notice = watcher.check_failure_notice()
            if notice is None:
                continue
            if notice.aborted:
                emit("abort", reason="spares exhausted")
                return None
            if ep.rank in notice.rescue:
                worker.start_rescue(notice)
                return worker.run()
        return None
    except (RecoveryAborted, CheckpointUnavailable) as exc:
        emit("abort", reason=str(exc))
        log.error("rank %d aborting: %s", ep.rank, exc)
        return None
    finally:
        worker.shutdown()


# -- process mode entry point ------------------------------------------------


class JsonlEmitter:
    def __init__(self, path: Path, rank: int, clock: Callable[[], float]):
        self._fh = open(path, "a", buffering=1)
        self._lock = threading.Lock()
        self.rank = rank
        self.clock = clock

    def __call__(self, kind: str, **fields) -> None:
        rec = {"t": self.clock(), "rank": self.rank, "kind": kind, **fields}
        line = json.dumps(rec, default=_jsonable)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()


def _jsonable(x):
    if hasattr(x, "tolist"):
        return x.tolist()
    if hasattr(x, "value"):
        return x.value
    return str(x)


def process_main(argv=None) -> None:
    from ..transport.tcp import TcpEndpoint

    p = argparse.ArgumentParser(description="run one rank of a scenario (launched by the harness)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--base-port", type=int, required=True)
    args = p.parse_args(argv)
    run_dir = Path(args.run_dir)
    cfg = ScenarioConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    logging.basicConfig(level=logging.WARNING, format=f"[rank {args.rank}] %(levelname)s %(message)s")
    ep = TcpEndpoint(args.rank, cfg.n_ranks, args.base_port, timeout_ms=cfg.timing.timeout_ms)
    emit = JsonlEmitter(run_dir / f"events-{args.rank}.jsonl", args.rank, time.monotonic)
    stop = threading.Event()
    result: dict = {}
    segments = register_node_segments(ep, cfg.n_workers)

    def body():
        try:
            result["report"] = node_main(ep, cfg, emit, FiredRegistry(run_dir), stop, segments)
        except BaseException as exc:  # noqa: BLE001 - reported through the event log
            emit("crash", error=repr(exc))
            raise
        finally:
            emit("node_done")

    ep.start()
    print(f"ready {args.rank} {os.getpid()}", flush=True)
    line = sys.stdin.readline()
    if not line.startswith("go"):
        return
    ep.pids = {int(k): v for k, v in json.loads(line[2:].strip() or "{}").items()}
    t = threading.Thread(target=body, name="main", daemon=True)
    t.start()
    sys.stdin.readline()  # launcher closes stdin (EOF) to end the run
    stop.set()
    t.join(timeout=1.0)
    ep.close()
    logging.shutdown()
    os._exit(0)


if __name__ == "__main__":
    process_main()
