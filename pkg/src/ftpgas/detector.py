"""Dedicated fault-detector process.

The detector rank periodically pings every rank it has not yet given up on.
A ping that returns ERROR marks the rank as failed for the rest of the run.
Once a scan finds new failures, the detector picks rescue ranks from the
idle pool and writes one cumulative failure notice into the notice slot of
every working rank and every freshly assigned rescue.

Workers never talk to the detector. They only read their own notice slot,
which is why the scheme costs nothing while the run is failure-free.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .transport import CommResult, Endpoint, frame_record, parse_record
from .transport.base import MAX_ATOMIC_RECORD, RECORD_OVERHEAD

log = logging.getLogger(__name__)

NOTICE_SEGMENT = 0
NOTICE_OFFSET = 0
NOTICE_SLOT_BYTES = MAX_ATOMIC_RECORD

FLAG_ABORT = 0x1

_NOTICE_HEAD = struct.Struct("<BI")
MAX_NOTICE_PAIRS = (NOTICE_SLOT_BYTES - RECORD_OVERHEAD - _NOTICE_HEAD.size) // 8


class ProcStatus(enum.IntEnum):
    WORKING = 0
    IDLE = 1
    FD = 2
    FAILED = 3


class CommState(enum.Enum):
    WORKING = "working"
    BROKEN = "broken"


@dataclass(frozen=True)
class Layout:
    """Initial role assignment: ranks ``[0, W)`` work, rank ``W`` detects, the rest idle."""

    n_workers: int
    n_spares: int

    def __post_init__(self):
        if self.n_workers < 1:
            raise ValueError("need at least one worker")
        if self.n_spares < 1:
            raise ValueError("the fault detector needs one spare rank")

    @property
    def n_ranks(self) -> int:
        return self.n_workers + self.n_spares

    @property
    def fd_rank(self) -> int:
        return self.n_workers


class ProcessStatusTable:
    def __init__(self, statuses: Iterable[ProcStatus]):
        self._status = [ProcStatus(s) for s in statuses]
        self.failed_from: dict = {}

    @classmethod
    def initial(cls, layout: Layout) -> "ProcessStatusTable":
        status = [ProcStatus.WORKING] * layout.n_workers + [ProcStatus.FD]
        status += [ProcStatus.IDLE] * (layout.n_spares - 1)
        return cls(status)

    def __getitem__(self, rank: int) -> ProcStatus:
        return self._status[rank]

    def __len__(self) -> int:
        return len(self._status)

    def __eq__(self, other) -> bool:
        return isinstance(other, ProcessStatusTable) and self._status == other._status

    def as_tuple(self) -> tuple:
        return tuple(self._status)

    def ranks(self, status: ProcStatus) -> list:
        return [r for r, s in enumerate(self._status) if s == status]

    def working(self) -> list:
        return self.ranks(ProcStatus.WORKING)

    def idle(self) -> list:
        return self.ranks(ProcStatus.IDLE)

    def fd(self) -> Optional[int]:
        fds = self.ranks(ProcStatus.FD)
        return fds[0] if fds else None

    def mark_failed(self, rank: int) -> None:
        if self._status[rank] != ProcStatus.FAILED:
            self.failed_from[rank] = self._status[rank]
            self._status[rank] = ProcStatus.FAILED

    def promote(self, rank: int) -> None:
        if self._status[rank] not in (ProcStatus.IDLE, ProcStatus.FD):
            raise ValueError(f"rank {rank} is {self._status[rank].name}, cannot become a rescue")
        self._status[rank] = ProcStatus.WORKING

    def apply_notice(self, notice: "FailureNotice") -> "ProcessStatusTable":
        """Table as implied by the initial layout plus a cumulative notice."""
        for failed, rescue in zip(notice.failed, notice.rescue):
            self.mark_failed(failed)
            self.promote(rescue)
        return self


def status_from_notice(layout: Layout, notice: Optional["FailureNotice"]) -> ProcessStatusTable:
    table = ProcessStatusTable.initial(layout)
    if notice is not None:
        table.apply_notice(notice)
    return table


@dataclass(frozen=True)
class FailureNotice:
    """Cumulative list of failed ranks and the rescue rank taking over each."""

    seqno: int
    failed: tuple = ()
    rescue: tuple = ()
    flags: int = 0
    uncovered: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "failed", tuple(int(r) for r in self.failed))
        object.__setattr__(self, "rescue", tuple(int(r) for r in self.rescue))
        if len(self.failed) != len(self.rescue):
            raise ValueError("failed and rescue lists must have equal length")
        if len(self.failed) > MAX_NOTICE_PAIRS:
            raise ValueError("too many failures for one notice slot")

    @property
    def aborted(self) -> bool:
        return bool(self.flags & FLAG_ABORT)

    def __bool__(self) -> bool:
        return bool(self.failed) or self.aborted

    def pairs(self) -> list:
        return list(zip(self.failed, self.rescue))

    def encode(self) -> bytes:
        n = len(self.failed)
        payload = _NOTICE_HEAD.pack(self.flags, n) + struct.pack(f"<{2 * n}I", *self.failed, *self.rescue)
        return frame_record(self.seqno, payload)

    @classmethod
    def decode(cls, buf: bytes) -> Optional["FailureNotice"]:
        parsed = parse_record(buf)
        if parsed is None:
            return None
        seqno, payload = parsed
        if seqno == 0 or len(payload) < _NOTICE_HEAD.size:
            return None
        flags, n = _NOTICE_HEAD.unpack_from(payload)
        if len(payload) != _NOTICE_HEAD.size + 8 * n:
            return None
        ranks = struct.unpack_from(f"<{2 * n}I", payload, _NOTICE_HEAD.size)
        return cls(seqno, ranks[:n], ranks[n:], flags)


class AvoidList:
    """Ranks that have answered a ping with ERROR; never cleared within a run."""

    def __init__(self, n_ranks: int):
        self.avoid = [False] * n_ranks

    def __getitem__(self, rank: int) -> bool:
        return self.avoid[rank]

    def __contains__(self, rank: int) -> bool:
        return self.avoid[rank]

    def add(self, rank: int) -> None:
        self.avoid[rank] = True

    def ranks(self) -> list:
        return [r for r, a in enumerate(self.avoid) if a]


@dataclass
class ScanReport:
    comm_state: CommState
    scan_duration: float
    pinged: int
    new_failures: tuple = ()


def assign_rescues(status: ProcessStatusTable, newly_failed: Sequence[int],
                   previous: Optional[FailureNotice] = None,
                   fd_may_join: bool = False) -> FailureNotice:
    """Extend the cumulative notice with a rescue for every newly failed worker.

    Rescues are the lowest-id idle ranks. Failed idle ranks need no rescue.
    When spares run out, the detector rank itself is used if ``fd_may_join``,
    otherwise the returned notice covers the assignable prefix, carries the
    abort flag and lists the rest in ``uncovered``.
    """
    previous = previous or FailureNotice(0)
    need = [r for r in newly_failed if status.failed_from.get(r, status[r]) == ProcStatus.WORKING]
    if not need:
        return previous
    idle = status.idle()
    pairs = []
    uncovered = []
    for failed in need:
        if idle:
            rescue = idle.pop(0)
        elif fd_may_join and status.fd() is not None:
            rescue = status.fd()
        else:
            uncovered.append(failed)
            continue
        status.promote(rescue)
        pairs.append((failed, rescue))
    flags = previous.flags | (FLAG_ABORT if uncovered else 0)
    return FailureNotice(
        previous.seqno + 1,
        previous.failed + tuple(f for f, _ in pairs),
        previous.rescue + tuple(r for _, r in pairs),
        flags,
        tuple(uncovered),
    )


def _no_events(kind: str, **fields) -> None:
    pass


class FaultDetector:
    def __init__(self, ep: Endpoint, status: ProcessStatusTable, *, scan_period_s: float = 3.0,
                 parallelism: int = 8, timeout_ms: Optional[int] = None,
                 notice_segment: int = NOTICE_SEGMENT, notice_offset: int = NOTICE_OFFSET,
                 fd_may_join: bool = False, emit: Callable = _no_events,
                 before_write: Optional[Callable[[int], None]] = None):
        self.ep = ep
        self.status = status
        self.scan_period_s = scan_period_s
        self.parallelism = max(1, parallelism)
        self.timeout_ms = ep.timeout_ms if timeout_ms is None else timeout_ms
        self.notice_segment = notice_segment
        self.notice_offset = notice_offset
        self.fd_may_join = fd_may_join
        self.emit = emit
        self.before_write = before_write
        self.avoid = AvoidList(ep.n_ranks)
        self.notice = FailureNotice(0)
        self.scans = 0
        self.notices_sent = 0
        self._unacked: set = set()

    def glo_health_chk(self, avoid: Optional[AvoidList] = None) -> ScanReport:
        avoid = self.avoid if avoid is None else avoid
        t0 = self.ep.now()
        targets = [r for r in range(self.ep.n_ranks) if r != self.ep.rank and not avoid[r]]
        results = self.ep.parallel_map(lambda r: self.ep.ping(r, self.timeout_ms), targets, self.parallelism)
        new = []
        for rank, result in zip(targets, results):
            if result is CommResult.ERROR:
                avoid.add(rank)
                self.status.mark_failed(rank)
                new.append(rank)
        self.scans += 1
        state = CommState.BROKEN if new else CommState.WORKING
        return ScanReport(state, self.ep.now() - t0, len(targets), tuple(new))

    def broadcast_failure_notice(self, notice: FailureNotice, status: Optional[ProcessStatusTable] = None) -> int:
        """Write ``notice`` into the notice slot of every working rank."""
        if not notice:
            raise ValueError("refusing to broadcast an empty notice")
        status = self.status if status is None else status
        record = notice.encode()
        targets = [r for r in status.working() if r != self.ep.rank and not self.avoid[r]]

        def write(rank):
            if self.before_write is not None:
                self.before_write(rank)
            return self.ep.one_sided_write(rank, self.notice_segment, self.notice_offset, record, self.timeout_ms)

        results = self.ep.parallel_map(write, targets, self.parallelism)
        if status[self.ep.rank] == ProcStatus.WORKING:
            self.ep.write_local(self.notice_segment, self.notice_offset, record)
        self._unacked = {r for r, res in zip(targets, results) if res is not CommResult.SUCCESS}
        self.notices_sent += 1
        return sum(res is CommResult.SUCCESS for res in results)

    def _resend(self) -> None:
        record = self.notice.encode()
        for rank in sorted(self._unacked):
            if self.avoid[rank]:
                self._unacked.discard(rank)
                continue
            res = self.ep.one_sided_write(rank, self.notice_segment, self.notice_offset, record, self.timeout_ms)
            if res is CommResult.SUCCESS:
                self._unacked.discard(rank)

    def step(self) -> ScanReport:
        """One scan plus, on new failures, rescue assignment and notification."""
        report = self.glo_health_chk()
        self.emit("scan", duration=report.scan_duration, pinged=report.pinged)
        if report.comm_state is CommState.BROKEN:
            self.emit("detect", failed=list(report.new_failures))
            notice = assign_rescues(self.status, report.new_failures, self.notice, self.fd_may_join)
            if notice.seqno != self.notice.seqno:
                self.notice = notice
                acked = self.broadcast_failure_notice(notice)
                self.emit("notice_sent", seqno=notice.seqno, failed=list(notice.failed),
                          rescue=list(notice.rescue), acked=acked, aborted=notice.aborted)
                if notice.aborted:
                    log.error("spares exhausted: no rescue for failed ranks %s; aborting run",
                              list(notice.uncovered))
        elif self._unacked:
            self._resend()
        return report

    @property
    def joined_as_worker(self) -> bool:
        return self.status[self.ep.rank] == ProcStatus.WORKING

    def run_detector_loop(self, stop=None, phase_s: float = 0.0) -> str:
        """Scan every ``scan_period_s`` until ``stop`` is set.

        The first scan starts after ``phase_s``. Returns ``"stopped"``,
        ``"aborted"`` (spares exhausted) or ``"joined"`` when the detector had
        to become a worker itself.
        """
        stop = stop if stop is not None else self.ep.event()
        if phase_s > 0 and stop.wait(phase_s):
            return "stopped"
        next_scan = self.ep.now()
        while not stop.is_set():
            self.step()
            if self.notice.aborted:
                return "aborted"
            if self.joined_as_worker:
                return "joined"
            next_scan += self.scan_period_s
            delay = next_scan - self.ep.now()
            if delay < 0:
                next_scan = self.ep.now()
                delay = 0.0
            if stop.wait(delay):
                break
        return "stopped"
