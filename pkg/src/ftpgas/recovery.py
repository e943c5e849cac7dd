"""Worker-side failure handling: notice polling and non-shrinking group rebuild.

Workers poll their own notice slot before every communication call and in
every timeout-retry loop. A notice with a higher sequence number than the
last one seen triggers :func:`rebuild_worker_group` on every survivor and on
every rescue rank named in it. The rebuild is a pure function of the notice,
so all participants derive the same member list and rank map without any
further agreement round beyond the group commit itself.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .detector import (
    NOTICE_OFFSET,
    NOTICE_SEGMENT,
    NOTICE_SLOT_BYTES,
    FailureNotice,
    Layout,
    ProcStatus,
    status_from_notice,
)
from .transport import CommResult, Endpoint, Group

log = logging.getLogger(__name__)

MAX_COMMIT_ATTEMPTS = 5
_SEQNO = struct.Struct("<Q")  # leading seqno of a framed record


class RankMap:
    """Logical worker id to physical rank mapping; ``version`` grows per recovery."""

    def __init__(self, physical_of: Sequence[int], version: int = 1):
        self.physical_of = tuple(int(p) for p in physical_of)
        if len(set(self.physical_of)) != len(self.physical_of):
            raise ValueError("physical ranks in a rank map must be distinct")
        self.version = int(version)
        self.logical_of = {p: l for l, p in enumerate(self.physical_of)}

    @classmethod
    def identity(cls, n_workers: int) -> "RankMap":
        return cls(range(n_workers), 1)

    @classmethod
    def from_notice(cls, n_workers: int, notice: Optional[FailureNotice]) -> "RankMap":
        """Apply every (failed, rescue) substitution of a cumulative notice in order."""
        physical = list(range(n_workers))
        if notice is None or not notice.failed:
            return cls(physical, 1)
        where = {p: l for l, p in enumerate(physical)}
        for failed, rescue in notice.pairs():
            logical = where.pop(failed, None)
            if logical is None:
                continue  # a spare that died before ever being used
            physical[logical] = rescue
            where[rescue] = logical
        return cls(physical, 1 + notice.seqno)

    @property
    def size(self) -> int:
        return len(self.physical_of)

    def resolve(self, logical: int) -> int:
        if not 0 <= logical < len(self.physical_of):
            raise IndexError(f"logical rank {logical} outside [0, {len(self.physical_of)})")
        return self.physical_of[logical]

    def logical(self, physical: int) -> Optional[int]:
        return self.logical_of.get(physical)

    def to_bytes(self) -> bytes:
        n = len(self.physical_of)
        return struct.pack(f"<QI{n}I", self.version, n, *self.physical_of)

    def __eq__(self, other) -> bool:
        return isinstance(other, RankMap) and self.to_bytes() == other.to_bytes()

    def __repr__(self) -> str:
        return f"RankMap({list(self.physical_of)}, version={self.version})"


@dataclass
class WorkerGroup:
    group: Group
    size: int

    @property
    def members(self) -> tuple:
        return self.group.members

    @property
    def version(self) -> int:
        return self.group.version


class FailureAcknowledged(Exception):
    """Raised at a communication point once a new failure notice is seen."""

    def __init__(self, notice: FailureNotice):
        super().__init__(f"failure notice {notice.seqno}: failed={list(notice.failed)}")
        self.notice = notice


class RecoveryAborted(RuntimeError):
    """Recovery cannot continue (spares exhausted or rebuild kept failing)."""


class NoticeWatcher:
    """Reads this rank's notice slot and tracks the last accepted seqno.

    Also acts as the *guard* consulted by blocking collectives: ``pending``
    is a cheap probe and ``check`` raises :class:`FailureAcknowledged`.
    """

    def __init__(self, ep: Endpoint, segment: int = NOTICE_SEGMENT, offset: int = NOTICE_OFFSET,
                 last_seen: int = 0, emit: Optional[Callable] = None):
        self.ep = ep
        self.segment = segment
        self.offset = offset
        self.last_seen = last_seen
        self.emit = emit
        self.enabled = True

    def peek(self) -> Optional[FailureNotice]:
        # the leading seqno copy rules out stale slots without decoding; a
        # torn record with a new head still goes through full validation
        (head_seqno,) = _SEQNO.unpack(self.ep.read(self.segment, self.offset, _SEQNO.size))
        if head_seqno <= self.last_seen:
            return None
        raw = self.ep.read(self.segment, self.offset, NOTICE_SLOT_BYTES)
        notice = FailureNotice.decode(raw)
        if notice is None or notice.seqno <= self.last_seen:
            return None
        return notice

    def check_failure_notice(self) -> Optional[FailureNotice]:
        notice = self.peek()
        if notice is not None:
            self.last_seen = notice.seqno
            if self.emit is not None:
                self.emit("notice_accept", seqno=notice.seqno, failed=list(notice.failed),
                          rescue=list(notice.rescue))
        return notice

    def pending(self) -> bool:
        return self.enabled and self.peek() is not None

    def check(self) -> None:
        if not self.enabled:
            return
        notice = self.check_failure_notice()
        if notice is not None:
            raise FailureAcknowledged(notice)


def check_failure_notice(watcher: NoticeWatcher) -> Optional[FailureNotice]:
    return watcher.check_failure_notice()


def working_members(layout: Layout, notice: Optional[FailureNotice]) -> tuple:
    """WORKING physical ranks in ascending order, capped at the worker count."""
    status = status_from_notice(layout, notice)
    members = []
    for rank in range(len(status)):
        if status[rank] == ProcStatus.WORKING:
            members.append(rank)
            if len(members) == layout.n_workers:
                break
    return tuple(members)


@dataclass
class RebuildResult:
    group: WorkerGroup
    rank_map: RankMap
    notice: FailureNotice
    attempts: int


def _silent(kind: str, **fields) -> None:
    pass


def rebuild_worker_group(ep: Endpoint, notice: Optional[FailureNotice], rank_map: RankMap,
                         layout: Layout, *, watcher: Optional[NoticeWatcher] = None,
                         current: Optional[WorkerGroup] = None, killed: Optional[set] = None,
                         timeout_ms: Optional[int] = None, max_attempts: int = MAX_COMMIT_ATTEMPTS,
                         emit: Callable = _silent) -> RebuildResult:
    """Reconstruct the worker group after ``notice``; run by survivors and rescues.

    ``killed`` collects the failed ranks this rank has already terminated so
    repeated rebuilds do not repeat the kills. A commit that does not succeed
    is retried after re-reading the notice slot, because a further failure
    during recovery shows up there as a newer notice.
    """
    if notice is None or not notice.failed:
        if current is None:
            raise ValueError("no notice and no current group")
        return RebuildResult(current, rank_map, notice or FailureNotice(0), 0)
    killed = set() if killed is None else killed
    timeout_ms = ep.timeout_ms if timeout_ms is None else timeout_ms
    attempts = 0
    while True:
        attempts += 1
        if notice.aborted:
            raise RecoveryAborted(f"no spare left for failed ranks {list(notice.uncovered) or list(notice.failed)}")
        emit("rebuild_start", seqno=notice.seqno, attempt=attempts)
        new_map = RankMap.from_notice(layout.n_workers, notice)
        if ep.rank not in new_map.logical_of:
            raise RecoveryAborted(f"rank {ep.rank} is not part of the worker set after notice {notice.seqno}")
        was_worker = rank_map.logical(ep.rank) is not None
        if was_worker and current is not None:
            ep.group_delete(current.group)
            current = None
        for failed in notice.failed:
            if failed not in killed and failed != ep.rank:
                ep.proc_kill(failed, timeout_ms)
                killed.add(failed)
        emit("kills_done", seqno=notice.seqno, killed=sorted(killed))
        group = Group(working_members(layout, notice), new_map.version)
        result = ep.group_commit(group, timeout_ms)
        if result is CommResult.SUCCESS:
            emit("commit_done", seqno=notice.seqno, version=group.version, members=list(group.members))
            return RebuildResult(WorkerGroup(group, layout.n_workers), new_map, notice, attempts)
        emit("commit_failed", seqno=notice.seqno, result=result.value)
        log.warning("rank %d: group commit v%d returned %s (attempt %d)", ep.rank, group.version,
                    result.value, attempts)
        if attempts >= max_attempts:
            raise RecoveryAborted(f"group commit failed {attempts} times")
        if watcher is not None:
            newer = watcher.check_failure_notice()
            if newer is None and ep.wait_local(watcher.pending, timeout_ms):
                newer = watcher.check_failure_notice()
            if newer is not None:
                notice = newer


def resolve(rank_map: RankMap, logical: int) -> int:
    return rank_map.resolve(logical)
