"""Collective operations built from one-sided writes into slot segments.

Each participating rank owns an exchange segment with two banks of one slot
per member. For the ``k``-th operation of an epoch every member writes its
framed contribution into slot ``me`` of bank ``k % 2`` on every peer, then
waits until all slots of that bank carry the operation's tag. Two banks are
enough: a member can only start operation ``k + 2`` after every peer has
finished reading operation ``k``.

Blocking points consult a *guard* (see :class:`NullGuard`): ``pending()`` is
a cheap test for an outstanding failure notice and ``check()`` raises when
one must be acted upon. Timeouts and broken channels never raise by
themselves, they lead to a guard check and a retry.
"""

from __future__ import annotations

import struct
from typing import Optional, Sequence

from .base import RECORD_OVERHEAD, CommResult, Endpoint, frame_record, parse_record


class NullGuard:
    def pending(self) -> bool:
        return False

    def check(self) -> None:
        pass


def pairwise_sum(values: Sequence[float]) -> float:
    """Sum in a fixed balanced-tree order (left half + right half)."""
    n = len(values)
    if n == 0:
        return 0.0
    if n == 1:
        return float(values[0])
    mid = n // 2
    return pairwise_sum(values[:mid]) + pairwise_sum(values[mid:])


def put(ep: Endpoint, target: int, segment_id: int, offset: int, payload: bytes,
        guard=None, timeout_ms: Optional[int] = None) -> None:
    """One-sided write that retries until delivered or the guard raises."""
    guard = guard or NullGuard()
    timeout_ms = ep.timeout_ms if timeout_ms is None else timeout_ms
    while True:
        guard.check()
        result = ep.one_sided_write(target, segment_id, offset, payload, timeout_ms)
        if result is CommResult.SUCCESS:
            return
        if result is CommResult.ERROR:
            # broken channel: give the failure notice a chance to arrive
            ep.wait_local(guard.pending, timeout_ms)


def wait_for(ep: Endpoint, predicate, guard=None, timeout_ms: Optional[int] = None) -> None:
    """Block until ``predicate()`` holds, polling the guard after each timeout."""
    guard = guard or NullGuard()
    timeout_ms = ep.timeout_ms if timeout_ms is None else timeout_ms
    while True:
        guard.check()
        if ep.wait_local(lambda: predicate() or guard.pending(), timeout_ms) and predicate():
            guard.check()
            return


class Exchange:
    """Slot-based all-to-all exchange among an ordered list of physical ranks."""

    def __init__(self, ep: Endpoint, segment_id: int, n_members: int, slot_size: int = 64,
                 register: bool = True):
        if slot_size <= RECORD_OVERHEAD:
            raise ValueError("slot too small for record framing")
        self.ep = ep
        self.segment_id = segment_id
        self.n_members = n_members
        self.slot_size = slot_size
        self.peers: list = []
        self.me = -1
        self.epoch = 0
        self.counter = 0
        self.guard = NullGuard()
        if register:
            ep.register_segment(segment_id, self.segment_bytes(n_members, slot_size))

    @staticmethod
    def segment_bytes(n_members: int, slot_size: int) -> int:
        return 2 * n_members * slot_size

    @property
    def capacity(self) -> int:
        return self.slot_size - RECORD_OVERHEAD

    def reset(self, peers: Sequence[int], me: int, epoch: int, guard=None) -> None:
        """Bind to a new member list (logical order) and restart the tag sequence."""
        if len(peers) != self.n_members:
            raise ValueError("member count differs from the registered layout")
        if epoch >= 1 << 31:
            raise ValueError("epoch too large")
        self.peers = list(peers)
        self.me = me
        self.epoch = epoch
        self.counter = 0
        self.guard = guard or NullGuard()

    def _offset(self, bank: int, slot: int) -> int:
        return (bank * self.n_members + slot) * self.slot_size

    def _round(self, payloads: Sequence[bytes]) -> list:
        """One exchange round: ``payloads[i]`` goes to member ``i``."""
        tag = (self.epoch << 32) | self.counter
        bank = self.counter % 2
        self.counter += 1
        off = self._offset(bank, self.me)
        for i, peer in enumerate(self.peers):
            if len(payloads[i]) > self.capacity:
                raise ValueError("payload exceeds slot capacity")
            rec = frame_record(tag, payloads[i])
            if i == self.me:
                self.ep.write_local(self.segment_id, off, rec)
            else:
                put(self.ep, peer, self.segment_id, off, rec, self.guard)
        got = [None] * self.n_members

        def complete():
            for i in range(self.n_members):
                if got[i] is None:
                    parsed = parse_record(self.ep.read(self.segment_id, self._offset(bank, i), self.slot_size))
                    if parsed is None or parsed[0] != tag:
                        return False
                    got[i] = parsed[1]
            return True

        wait_for(self.ep, complete, self.guard)
        return got

    def allgather(self, payload: bytes) -> list:
        return self._round([payload] * self.n_members)

    def _next_tag(self) -> tuple:
        tag = (self.epoch << 32) | self.counter
        bank = self.counter % 2
        self.counter += 1
        return tag, bank

    def _await_slots(self, tag: int, bank: int, slots: Sequence[int]) -> dict:
        got: dict = {}

        def complete():
            for i in slots:
                if i not in got:
                    parsed = parse_record(self.ep.read(self.segment_id, self._offset(bank, i), self.slot_size))
                    if parsed is None or parsed[0] != tag:
                        return False
                    got[i] = parsed[1]
            return True

        wait_for(self.ep, complete, self.guard)
        return got

    def allreduce_sum(self, value: float) -> float:
        """Global sum of one float per member, identical bits on every member.

        Members send to the lowest member, which sums the rank-ordered partials
        pairwise and writes the result back: 2(n-1) messages instead of n(n-1).
        """
        if self.n_members == 1:
            return pairwise_sum([value])
        up_tag, up_bank = self._next_tag()
        down_tag, down_bank = self._next_tag()
        mine = struct.pack("<d", value)
        if self.me != 0:
            put(self.ep, self.peers[0], self.segment_id, self._offset(up_bank, self.me),
                frame_record(up_tag, mine), self.guard)
            got = self._await_slots(down_tag, down_bank, [0])
            return struct.unpack("<d", got[0])[0]
        got = self._await_slots(up_tag, up_bank, range(1, self.n_members))
        parts = [value] + [struct.unpack("<d", got[i])[0] for i in range(1, self.n_members)]
        total = pairwise_sum(parts)
        rec = frame_record(down_tag, struct.pack("<d", total))
        for peer in self.peers[1:]:
            put(self.ep, peer, self.segment_id, self._offset(down_bank, 0), rec, self.guard)
        return total

    def alltoallv(self, payloads: Sequence[bytes]) -> list:
        """Variable-length all-to-all; splits into as many rounds as needed."""
        longest = max(len(p) for p in payloads)
        sizes = [struct.unpack("<Q", b)[0] for b in self.allgather(struct.pack("<Q", longest))]
        rounds = max(1, -(-max(sizes) // self.capacity))
        received = [bytearray() for _ in range(self.n_members)]
        cap = self.capacity
        for r in range(rounds):
            chunk = [bytes(p[r * cap:(r + 1) * cap]) for p in payloads]
            for i, part in enumerate(self._round(chunk)):
                received[i] += part
        return [bytes(b) for b in received]
