"""Transport primitives shared by the simulated and the process-backed runtime.

An :class:`Endpoint` is one rank's view of the global address space: the
segments it owns, the error state it has observed for every other rank and
the operations it may issue (one-sided writes, pings, kills, group commits).
Subclasses supply the wire (in-memory network or loopback TCP) together with
clock and concurrency primitives; everything protocol-level lives here so both
modes behave identically.
"""

from __future__ import annotations

import enum
import struct
import threading
import zlib
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

DEFAULT_TIMEOUT_MS = 1000
MAX_ATOMIC_RECORD = 512


class CommResult(enum.Enum):
    SUCCESS = "success"
    TIMEOUT = "timeout"
    ERROR = "error"


class RankState(enum.IntEnum):
    HEALTHY = 0
    CORRUPT = 1


class FrameKind(enum.IntEnum):
    PING = 1
    PONG = 2
    WRITE = 3
    ACK = 4
    GROUP = 5
    KILL = 6


class TransportError(Exception):
    """Precondition violation of a transport operation."""


class DuplicateSegmentError(TransportError):
    pass


class RankKilled(BaseException):
    """Raised inside a rank whose process has been terminated.

    Derives from BaseException so application ``except Exception`` blocks do
    not swallow the death of their own rank.
    """


@dataclass
class Segment:
    segment_id: int
    data: bytearray
    registered: bool = True

    @property
    def size(self) -> int:
        return len(self.data)


@dataclass
class Group:
    members: tuple
    version: int
    committed: bool = False

    def __post_init__(self):
        self.members = tuple(int(m) for m in self.members)

    def encode(self) -> bytes:
        return struct.pack(f"<QI{len(self.members)}I", self.version, len(self.members), *self.members)

    @classmethod
    def decode(cls, body: bytes) -> "Group":
        version, count = struct.unpack_from("<QI", body)
        members = struct.unpack_from(f"<{count}I", body, 12)
        return cls(members, version)


@dataclass(frozen=True)
class StateVector:
    states: tuple

    def __getitem__(self, rank: int) -> RankState:
        return self.states[rank]

    def __len__(self) -> int:
        return len(self.states)

    def corrupt(self) -> frozenset:
        return frozenset(r for r, s in enumerate(self.states) if s == RankState.CORRUPT)


# -- record framing --------------------------------------------------------
#
# Records written into notification-style slots are laid out as
#   seqno u64 | length u32 | payload | crc32 u32 | seqno u64
# A reader accepts a record only when both sequence numbers agree and the
# checksum (over seqno, length and payload) validates.

_REC_HEAD = struct.Struct("<QI")
_REC_TAIL = struct.Struct("<IQ")
RECORD_OVERHEAD = _REC_HEAD.size + _REC_TAIL.size


def frame_record(seqno: int, payload: bytes) -> bytes:
    head = _REC_HEAD.pack(seqno, len(payload))
    crc = zlib.crc32(head + payload)
    return head + payload + _REC_TAIL.pack(crc, seqno)


def parse_record(buf: bytes) -> Optional[tuple]:
    """Return ``(seqno, payload)`` for a valid record in ``buf``, else None."""
    if len(buf) < RECORD_OVERHEAD:
        return None
    seqno, length = _REC_HEAD.unpack_from(buf)
    end = _REC_HEAD.size + length
    if end + _REC_TAIL.size > len(buf):
        return None
    crc, seqno2 = _REC_TAIL.unpack_from(buf, end)
    if seqno != seqno2:
        return None
    payload = bytes(buf[_REC_HEAD.size:end])
    if zlib.crc32(bytes(buf[:end])) != crc:
        return None
    return seqno, payload


# -- wire frames -----------------------------------------------------------
#
# length u32 (bytes following the length field) | kind u8 | req_id u32 |
# src u32 | body

FRAME_HEADER = struct.Struct("<IBII")
_WRITE_HEAD = struct.Struct("<IQ")


def encode_frame(kind: FrameKind, req_id: int, src: int, body: bytes = b"") -> bytes:
    return FRAME_HEADER.pack(FRAME_HEADER.size - 4 + len(body), int(kind), req_id, src) + body


def encode_write(segment_id: int, offset: int, payload: bytes) -> bytes:
    return _WRITE_HEAD.pack(segment_id, offset) + bytes(payload)


def decode_write(body: bytes) -> tuple:
    segment_id, offset = _WRITE_HEAD.unpack_from(body)
    return segment_id, offset, body[_WRITE_HEAD.size:]


ACK_OK = b"\x00"
ACK_BAD_RANGE = b"\x01"
ACK_MISMATCH = b"\x02"


class _NullLock:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


class Endpoint:
    """One rank's communication endpoint.

    Subclasses implement :meth:`_request`, :meth:`_terminate_remote`,
    :meth:`now`, :meth:`sleep`, :meth:`spawn`, :meth:`event`,
    :meth:`wait_local` and :meth:`_notify_change`.
    """

    mode = "abstract"

    def __init__(self, rank: int, n_ranks: int, timeout_ms: int = DEFAULT_TIMEOUT_MS,
                 lock=None):
        if not 0 <= rank < n_ranks:
            raise ValueError(f"rank {rank} outside [0, {n_ranks})")
        self.rank = rank
        self.n_ranks = n_ranks
        self.timeout_ms = timeout_ms
        self._lock = lock if lock is not None else _NullLock()
        self._segments: dict = {}
        self._states = [RankState.HEALTHY] * n_ranks
        self._group_inbox: dict = defaultdict(dict)
        self.groups: dict = {}
        self.kills_issued: list = []

    # -- segments ----------------------------------------------------------

    def register_segment(self, segment_id: int, size_bytes: int) -> Segment:
        if size_bytes <= 0:
            raise ValueError("segment size must be positive")
        with self._lock:
            if segment_id in self._segments:
                raise DuplicateSegmentError(f"segment {segment_id} already registered on rank {self.rank}")
            seg = Segment(segment_id, bytearray(size_bytes))
            self._segments[segment_id] = seg
        return seg

    def has_segment(self, segment_id: int) -> bool:
        return segment_id in self._segments

    def segment_size(self, segment_id: int) -> int:
        return self._segments[segment_id].size

    def read(self, segment_id: int, offset: int = 0, length: Optional[int] = None) -> bytes:
        with self._lock:
            seg = self._segments[segment_id]
            end = seg.size if length is None else offset + length
            if offset < 0 or end > seg.size:
                raise TransportError("read outside segment")
            return bytes(seg.data[offset:end])

    def write_local(self, segment_id: int, offset: int, payload: bytes) -> None:
        if self._apply_write(segment_id, offset, payload) != ACK_OK:
            raise TransportError("local write outside segment")

    def _apply_write(self, segment_id: int, offset: int, payload: bytes) -> bytes:
        with self._lock:
            seg = self._segments.get(segment_id)
            if seg is None or offset < 0 or offset + len(payload) > seg.size:
                return ACK_BAD_RANGE
            seg.data[offset:offset + len(payload)] = payload
        self._notify_change()
        return ACK_OK

    # -- receiver side -----------------------------------------------------

    def handle_frame(self, kind: int, src: int, body: bytes):
        """Serve one incoming frame; returns ``(reply_kind, reply_body)``."""
        if kind == FrameKind.PING:
            return FrameKind.PONG, b""
        if kind == FrameKind.WRITE:
            segment_id, offset, payload = decode_write(body)
            return FrameKind.ACK, self._apply_write(segment_id, offset, payload)
        if kind == FrameKind.GROUP:
            proposal = Group.decode(body)
            with self._lock:
                self._group_inbox[proposal.version][src] = proposal.members
            self._notify_change()
            return FrameKind.ACK, ACK_OK
        if kind == FrameKind.KILL:
            self._on_kill_frame()
            return FrameKind.ACK, ACK_OK
        raise TransportError(f"unexpected frame kind {kind}")

    def _on_kill_frame(self) -> None:
        raise NotImplementedError

    # -- operations --------------------------------------------------------

    def _timeout(self, timeout_ms):
        return self.timeout_ms if timeout_ms is None else timeout_ms

    def _mark(self, target: int, result: CommResult) -> CommResult:
        if result is CommResult.ERROR:
            with self._lock:
                self._states[target] = RankState.CORRUPT
        return result

    def one_sided_write(self, target: int, segment_id: int, offset: int, payload: bytes,
                        timeout_ms: Optional[int] = None) -> CommResult:
        if target == self.rank:
            self.write_local(segment_id, offset, payload)
            return CommResult.SUCCESS
        result, reply = self._request(target, FrameKind.WRITE,
                                      encode_write(segment_id, offset, payload),
                                      self._timeout(timeout_ms))
        if result is CommResult.SUCCESS and reply != ACK_OK:
            raise TransportError(f"write to rank {target} segment {segment_id} outside its range")
        return self._mark(target, result)

    def ping(self, target: int, timeout_ms: Optional[int] = None) -> CommResult:
        if target == self.rank:
            return CommResult.SUCCESS
        result, _ = self._request(target, FrameKind.PING, b"", self._timeout(timeout_ms))
        return self._mark(target, result)

    def proc_kill(self, target: int, timeout_ms: Optional[int] = None) -> CommResult:
        if target == self.rank:
            raise TransportError("a rank cannot proc_kill itself")
        self.kills_issued.append((self.now(), target))
        result = self._terminate_remote(target, self._timeout(timeout_ms))
        if result is CommResult.SUCCESS:
            with self._lock:
                self._states[target] = RankState.CORRUPT
        return result

    def group_commit(self, group: Group, timeout_ms: Optional[int] = None) -> CommResult:
        """Barrier across ``group.members``; all must propose identical members."""
        if self.rank not in group.members:
            raise TransportError(f"rank {self.rank} is not a member of the group")
        timeout_ms = self._timeout(timeout_ms)
        deadline = self.now() + timeout_ms / 1000.0
        body = group.encode()
        pending = [m for m in group.members if m != self.rank]
        while pending:
            remaining_ms = int(max(0.0, deadline - self.now()) * 1000)
            if remaining_ms <= 0:
                return CommResult.TIMEOUT
            target = pending[0]
            result, _ = self._request(target, FrameKind.GROUP, body, remaining_ms)
            if result is CommResult.ERROR:
                return self._mark(target, result)
            if result is CommResult.SUCCESS:
                pending.pop(0)
        others = [m for m in group.members if m != self.rank]

        def arrived():
            inbox = self._group_inbox.get(group.version, {})
            return all(m in inbox for m in others)

        if not self.wait_local(arrived, max(0, int((deadline - self.now()) * 1000))):
            return CommResult.TIMEOUT
        with self._lock:
            inbox = self._group_inbox[group.version]
            if any(inbox[m] != group.members for m in others):
                return CommResult.ERROR
        group.committed = True
        self.groups[group.version] = group
        return CommResult.SUCCESS

    def group_delete(self, group: Group) -> None:
        self.groups.pop(group.version, None)
        group.committed = False

    def state_vec_get(self) -> StateVector:
        with self._lock:
            return StateVector(tuple(self._states))

    # -- runtime hooks -----------------------------------------------------

    def _request(self, target: int, kind: FrameKind, body: bytes, timeout_ms: int):
        raise NotImplementedError

    def _terminate_remote(self, target: int, timeout_ms: int) -> CommResult:
        raise NotImplementedError

    def _notify_change(self) -> None:
        raise NotImplementedError

    def wait_local(self, predicate: Callable[[], bool], timeout_ms: Optional[int]) -> bool:
        """Block until ``predicate()`` holds; re-evaluated on every local write."""
        raise NotImplementedError

    def now(self) -> float:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError

    def charge(self, seconds: float) -> None:
        """Account modelled compute time (only meaningful under virtual time)."""

    def spawn(self, fn: Callable, *args, name: str = ""):
        raise NotImplementedError

    def event(self):
        raise NotImplementedError

    def exit_self(self) -> None:
        """Terminate this rank in-band (the ``exit(-1)`` fault)."""
        raise NotImplementedError

    def parallel_map(self, fn: Callable, items: Sequence, lanes: int) -> list:
        """Apply ``fn`` to ``items`` on up to ``lanes`` concurrent lanes, keeping order."""
        items = list(items)
        if lanes <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        results = [None] * len(items)
        queue = list(range(len(items)))
        done = self.event()
        guard = threading.Lock()
        state = {"left": min(lanes, len(items)), "error": None}

        def lane():
            try:
                while True:
                    with guard:
                        if not queue:
                            break
                        i = queue.pop(0)
                    results[i] = fn(items[i])
            except Exception as exc:  # surfaced to the caller below
                state["error"] = exc
            finally:
                with guard:
                    state["left"] -= 1
                    last = state["left"] == 0
                if last:
                    done.set()

        for k in range(state["left"]):
            self.spawn(lane, name=f"lane{k}")
        done.wait()
        if state["error"] is not None:
            raise state["error"]
        return results


def make_lock():
    return threading.RLock()

