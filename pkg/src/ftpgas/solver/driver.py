"""Fault-tolerant worker: Lanczos iterations with checkpointing and recovery.

A :class:`Worker` is either started fresh (initial workers) or as a rescue
named in a failure notice. Every communication call is guarded by the
notice watcher; a new notice unwinds the current iteration via
:class:`FailureAcknowledged`, after which the worker rebuilds the group,
rebinds its communication to the new rank map, agrees on a restart
generation and continues from it.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..checkpoint import CheckpointLibrary, CheckpointUnavailable, StoreLayout, neighbor_map_for
from ..detector import Layout
from ..recovery import (
    FailureAcknowledged,
    NoticeWatcher,
    RankMap,
    RecoveryAborted,
    WorkerGroup,
    rebuild_worker_group,
)
from ..transport import CommResult, Endpoint, Exchange, Group
from .comm import (
    CommPlan,
    HaloExchanger,
    LocalOperator,
    compute_recv_lists,
    ensure_halo_segment,
    halo_bytes_for,
    preprocess_comm,
    spmvm,
)
from .lanczos import LanczosState, initial_state, lanczos_step, start_vector
from .matrix import StencilParams, generate_matrix
from .ql import TridiagonalSpectrum

log = logging.getLogger(__name__)

SMALL_EXCHANGE_SEGMENT = 1
LARGE_EXCHANGE_SEGMENT = 2
SMALL_SLOT = 64
LARGE_SLOT = 4096


@dataclass
class SolverConfig:
    n_global: int = 1024
    stencil: StencilParams = StencilParams(nx=32)
    max_iterations: int = 300
    cp_interval: int = 50
    eig_interval: int = 50
    benchmark: bool = True
    p: int = 1
    tol: float = 1e-10
    window: int = 10
    seed: int = 0
    breakdown_tol: float = 1e-12
    sim_iteration_time: float = 0.0


@dataclass
class EigenReport:
    eigenvalues: list
    lowest: list
    iterations: int
    converged: bool
    breakdown: bool
    alphas: list = field(repr=False, default_factory=list)
    betas: list = field(repr=False, default_factory=list)

    def fingerprint(self) -> str:
        """Exact textual form of the spectrum (hex floats) for bitwise comparison."""
        return ",".join(float(x).hex() for x in self.eigenvalues)


def register_worker_segments(ep: Endpoint, n_workers: int) -> tuple:
    small = Exchange(ep, SMALL_EXCHANGE_SEGMENT, n_workers, SMALL_SLOT)
    large = Exchange(ep, LARGE_EXCHANGE_SEGMENT, n_workers, LARGE_SLOT)
    return small, large


def converged_over_window(history, p: int, tol: float, window: int) -> bool:
    """Relative change of the ``p`` lowest estimates stayed below ``tol`` for ``window`` steps."""
    if len(history) < window + 1:
        return False
    seq = list(history)[-(window + 1):]
    for prev, cur in zip(seq, seq[1:]):
        if len(prev) < p or len(cur) < p:
            return False
        denom = np.maximum(np.abs(cur[:p]), np.finfo(float).tiny)
        if np.max(np.abs(cur[:p] - prev[:p]) / denom) >= tol:
            return False
    return True


def _nothing(kind: str, **fields) -> None:
    pass


class Worker:
    def __init__(self, ep: Endpoint, cfg: SolverConfig, layout: Layout, small: Exchange, large: Exchange,
                 watcher: NoticeWatcher, *, store: Optional[StoreLayout] = None, emit: Callable = _nothing,
                 before_iteration: Optional[Callable] = None, cp_costs: tuple = (0.0, 0.0),
                 durable_every: int = 0, commit_timeout_ms: Optional[int] = None):
        self.ep = ep
        self.cfg = cfg
        self.layout = layout
        self.small = small
        self.large = large
        self.watcher = watcher
        self.store = store
        self.emit = emit
        self.before_iteration = before_iteration
        self.cp_costs = cp_costs
        self.durable_every = durable_every
        self.commit_timeout_ms = commit_timeout_ms
        self.rank_map = RankMap.identity(layout.n_workers)
        self.logical: Optional[int] = None
        self.group: Optional[WorkerGroup] = None
        self.killed: set = set()
        self.part = None
        self.plan: Optional[CommPlan] = None
        self.op: Optional[LocalOperator] = None
        self.halo: Optional[HaloExchanger] = None
        self.cp: Optional[CheckpointLibrary] = None
        self.state: Optional[LanczosState] = None
        self.history: deque = deque(maxlen=cfg.window + 2)
        self.converged = False
        self.recoveries = 0
        self._pending: Optional[object] = None
        self._fresh_after_recovery = False

    # -- setup -------------------------------------------------------------

    @property
    def checkpointing(self) -> bool:
        return self.store is not None and self.cfg.cp_interval > 0

    def _bind(self) -> None:
        peers = list(self.rank_map.physical_of)
        epoch = self.rank_map.version
        self.small.reset(peers, self.logical, epoch, self.watcher)
        self.large.reset(peers, self.logical, epoch, self.watcher)
        if self.halo is not None:
            self.halo.epoch = epoch

    def _make_cp(self) -> None:
        if self.store is None:
            return
        self.cp = CheckpointLibrary(self.ep, self.store, self.logical, neighbor_map_for(self.rank_map),
                                    durable_every=self.durable_every, write_cost_per_byte=self.cp_costs[0],
                                    copy_cost_per_byte=self.cp_costs[1], emit=self.emit)
        self.cp.start()

    def _install_plan(self, plan: CommPlan) -> None:
        self.plan = plan
        ensure_halo_segment(self.ep, plan.halo_bytes)
        self.op = LocalOperator(self.part, plan)
        self.halo = HaloExchanger(self.ep, plan, self.rank_map.resolve, self.watcher)
        self.halo.epoch = self.rank_map.version

    def start_fresh(self) -> None:
        """Initial worker: commit the first group, generate, preprocess, checkpoint 0."""
        W = self.layout.n_workers
        self.logical = self.ep.rank
        group = Group(range(W), 1)
        result = self.ep.group_commit(group, self.commit_timeout_ms)
        if result is not CommResult.SUCCESS:
            raise RecoveryAborted(f"initial group commit failed: {result.value}")
        self.group = WorkerGroup(group, W)
        self._bind()
        self.emit("group_ready", version=1, members=list(group.members))
        self.part = generate_matrix(self.cfg.n_global, self.cfg.stencil, self.logical, W)
        ensure_halo_segment(self.ep, halo_bytes_for(compute_recv_lists(self.part, W)))
        self._install_plan(preprocess_comm(self.part, self.large, W))
        self._make_cp()
        if self.cp is not None:
            self.cp.write_comm_checkpoint(self.plan.to_bytes())
        r0, r1 = self.part.row_range
        self.state = initial_state(start_vector(self.cfg.n_global, self.cfg.seed)[r0:r1])
        if self.checkpointing:
            self.cp.checkpoint(self.state.to_record(self.logical))

    def start_rescue(self, notice) -> None:
        """Idle rank named in ``notice``: take over a failed logical rank."""
        self._pending = notice

    # -- recovery ----------------------------------------------------------

    def recover(self, notice) -> None:
        reached = self.state.j if self.state is not None else None
        self.emit("recovery_begin", seqno=notice.seqno, reached=reached)
        if self.cp is not None:
            self.cp.quiesce(self.ep.timeout_ms / 1000.0)
        result = rebuild_worker_group(self.ep, notice, self.rank_map, self.layout, watcher=self.watcher,
                                      current=self.group, killed=self.killed,
                                      timeout_ms=self.commit_timeout_ms, emit=self.emit)
        previous = self.cp.neighbors if self.cp is not None else None
        self.rank_map = result.rank_map
        self.group = result.group
        new_logical = self.rank_map.logical(self.ep.rank)
        rescue = self.logical is None
        self.logical = new_logical
        self._bind()
        self.emit("reinit_start", seqno=result.notice.seqno, version=self.rank_map.version, rescue=rescue,
                  rank_map=list(self.rank_map.physical_of), members=list(self.group.members))
        if not self.checkpointing:
            raise CheckpointUnavailable("failure without checkpointing enabled")
        if rescue:
            self.part = generate_matrix(self.cfg.n_global, self.cfg.stencil, self.logical, self.layout.n_workers)
            self._make_cp()
            source = self.cp.neighbors.physical_neighbor(self.logical)
            plan = CommPlan.from_bytes(self.cp.read_comm_checkpoint(source))
            self._install_plan(plan)
            previous = None
        else:
            self.halo.resolve = self.rank_map.resolve
            self.halo.epoch = self.rank_map.version
        self.cp.refresh_neighbors(self.rank_map, self.logical)
        restart = self.cp.agree_restart_iteration(self.large, previous)
        record = self.cp.read_checkpoint(restart, previous)
        self.state = LanczosState.from_record(record)
        self._rebuild_history()
        self.recoveries += 1
        self._fresh_after_recovery = True
        self.emit("restart", restart=restart, reached=reached, seqno=result.notice.seqno)

    def _rebuild_history(self) -> None:
        self.history.clear()
        self.converged = False
        if self.cfg.benchmark:
            return
        j = self.state.j
        for k in range(max(1, j - self.cfg.window - 1), j + 1):
            self.history.append(self._spectrum(k).lowest(self.cfg.p))

    # -- iteration ---------------------------------------------------------

    def _matvec(self, v: np.ndarray) -> np.ndarray:
        return spmvm(self.op, self.halo, v, self.state.j + 1)

    def _reduce(self, x: float) -> float:
        return self.small.allreduce_sum(x)

    def _spectrum(self, j: Optional[int] = None) -> TridiagonalSpectrum:
        j = self.state.j if j is None else j
        return TridiagonalSpectrum.from_coefficients(self.state.alphas[:j], self.state.betas[:j + 1])

    def _after_step(self) -> None:
        cfg, st = self.cfg, self.state
        if cfg.benchmark:
            if cfg.eig_interval > 0 and st.j % cfg.eig_interval == 0:
                st.eigen_estimates = self._spectrum().lowest(cfg.p)
        else:
            est = self._spectrum().lowest(cfg.p)
            st.eigen_estimates = est
            self.history.append(est)
            self.converged = converged_over_window(self.history, cfg.p, cfg.tol, cfg.window)
        if self.checkpointing and st.j % cfg.cp_interval == 0:
            self.cp.checkpoint(st.to_record(self.logical))

    def _done(self) -> bool:
        st = self.state
        return st.j >= self.cfg.max_iterations or st.breakdown or self.converged

    def _iterate(self) -> None:
        while not self._done():
            if self.before_iteration is not None:
                self.before_iteration(self, self.state.j)
            self.watcher.check()
            lanczos_step(self.state, self._matvec, self._reduce, self.cfg.breakdown_tol)
            self.ep.charge(self.cfg.sim_iteration_time)
            self._after_step()
            if self._fresh_after_recovery:
                self._fresh_after_recovery = False
                self.emit("resumed", iteration=self.state.j)

    def run(self) -> EigenReport:
        self.emit("solve_start")
        while True:
            try:
                if self._pending is not None:
                    notice, self._pending = self._pending, None
                    self.recover(notice)
                self._iterate()
                break
            except FailureAcknowledged as exc:
                self._pending = exc.notice
        spectrum = self._spectrum()
        report = EigenReport(spectrum.eigenvalues.tolist(), spectrum.lowest(self.cfg.p).tolist(), self.state.j,
                             self.converged, self.state.breakdown, list(self.state.alphas),
                             list(self.state.betas))
        if self.cp is not None:
            self.cp.quiesce(self.ep.timeout_ms / 1000.0)
        self.emit("solve_end", iterations=report.iterations, fingerprint=report.fingerprint(),
                  lowest=report.lowest, converged=report.converged, breakdown=report.breakdown)
        return report

    def shutdown(self) -> None:
        if self.cp is not None:
            self.cp.stop()


def run_solver(cfg: SolverConfig, worker: Worker) -> EigenReport:
    """Run a fresh worker to completion."""
    worker.start_fresh()
    return worker.run()


def serial_lanczos(cfg: SolverConfig) -> EigenReport:
    """Single-process reference run without any communication layer."""
    part = generate_matrix(cfg.n_global, cfg.stencil, 0, 1)
    plan = CommPlan(0, 1, part.row_range, {}, {}, {}, {})
    op = LocalOperator(part, plan)
    state = initial_state(start_vector(cfg.n_global, cfg.seed))
    while state.j < cfg.max_iterations and not state.breakdown:
        lanczos_step(state, lambda v: spmvm(op, None, v), lambda x: x, cfg.breakdown_tol)
    spec = TridiagonalSpectrum.from_coefficients(state.alphas, state.betas)
    return EigenReport(spec.eigenvalues.tolist(), spec.lowest(cfg.p).tolist(), state.j, False, state.breakdown,
                       list(state.alphas), list(state.betas))
