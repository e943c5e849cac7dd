from __future__ import annotations

import signal
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SimWorld, spawn_bare_ranks, stop_procs
from ftpgas.transport import (
    CommResult,
    DuplicateSegmentError,
    Exchange,
    Group,
    RankState,
    TcpEndpoint,
    TransportError,
    find_free_base_port,
    frame_record,
    pairwise_sum,
    parse_record,
)
from ftpgas.transport.base import RECORD_OVERHEAD


# -- segments and records ------------------------------------------------------


def test_register_segment_is_zeroed():
    w = SimWorld(1)
    seg = w.eps[0].register_segment(0, 4096)
    assert seg.segment_id == 0 and seg.size == 4096
    assert w.eps[0].read(0) == bytes(4096)


def test_register_segment_twice_fails():
    w = SimWorld(1)
    w.eps[0].register_segment(0, 4096)
    with pytest.raises(DuplicateSegmentError):
        w.eps[0].register_segment(0, 4096)


def test_register_segment_rejects_empty():
    w = SimWorld(1)
    with pytest.raises(ValueError):
        w.eps[0].register_segment(1, 0)


def test_vector_sized_segment_reads_zero():
    n_local = 37
    w = SimWorld(1)
    w.eps[0].register_segment(1, 8 * n_local)
    assert w.eps[0].read(1, 0, 8 * n_local) == b"\0" * (8 * n_local)


@given(seqno=st.integers(1, 2**64 - 1), payload=st.binary(max_size=200))
def test_record_round_trip(seqno, payload):
    rec = frame_record(seqno, payload)
    assert len(rec) == len(payload) + RECORD_OVERHEAD
    assert parse_record(rec) == (seqno, payload)


@given(payload=st.binary(min_size=1, max_size=64), data=st.data())
def test_record_with_any_changed_byte_is_rejected(payload, data):
    rec = bytearray(frame_record(7, payload))
    i = data.draw(st.integers(0, len(rec) - 1))
    rec[i] ^= data.draw(st.integers(1, 255))
    assert parse_record(bytes(rec)) is None


@given(old=st.binary(min_size=8, max_size=64), new=st.binary(min_size=8, max_size=64), data=st.data())
def test_torn_overwrite_is_never_accepted(old, new, data):
    size = min(len(old), len(new))
    before, after = frame_record(2, old[:size]), frame_record(3, new[:size])
    cut = data.draw(st.integers(0, len(after)))
    mixed = after[:cut] + before[cut:]
    assert parse_record(mixed) in (None, (2, old[:size]), (3, new[:size]))
    if mixed not in (before, after):
        assert parse_record(mixed) is None


# -- point-to-point in simulation ----------------------------------------------


def test_write_to_healthy_rank_is_visible():
    w = SimWorld(2)
    for ep in w.eps:
        ep.register_segment(0, 64)
    w.spawn(0, lambda ep: ep.one_sided_write(1, 0, 8, b"abcdefgh"))
    res = w.run()
    assert res[0] is CommResult.SUCCESS
    assert w.eps[1].read(0, 8, 8) == b"abcdefgh"


def test_write_and_ping_to_killed_rank_error_and_mark_corrupt():
    w = SimWorld(3)
    for ep in w.eps:
        ep.register_segment(0, 64)
    w.net.kill(2)
    w.spawn(0, lambda ep: (ep.one_sided_write(2, 0, 0, b"x"), ep.ping(2)))
    res = w.run()
    assert res[0] == (CommResult.ERROR, CommResult.ERROR)
    assert w.eps[0].state_vec_get()[2] == RankState.CORRUPT
    assert w.eps[0].state_vec_get()[1] == RankState.HEALTHY


def test_write_to_stalled_receiver_times_out_without_marking():
    w = SimWorld(2)
    for ep in w.eps:
        ep.register_segment(0, 64)
    w.net.stall(1, 1.0)
    w.spawn(0, lambda ep: ep.one_sided_write(1, 0, 0, b"late", timeout_ms=1))
    res = w.run()
    assert res[0] is CommResult.TIMEOUT
    assert w.eps[0].state_vec_get().corrupt() == frozenset()


def test_ping_over_dropped_link_errors():
    w = SimWorld(3)
    w.net.drop_link(0, 1)
    w.spawn(0, lambda ep: (ep.ping(1), ep.ping(2)))
    assert w.run()[0] == (CommResult.ERROR, CommResult.SUCCESS)


def test_proc_kill_is_idempotent_and_final():
    w = SimWorld(3)

    def body(ep):
        first = ep.proc_kill(1)
        second = ep.proc_kill(1)
        return first, second, ep.ping(1)

    w.spawn(0, body)
    assert w.run()[0] == (CommResult.SUCCESS, CommResult.SUCCESS, CommResult.ERROR)
    assert not w.net.is_open(1)


def test_proc_kill_self_is_rejected():
    w = SimWorld(2)
    with pytest.raises(TransportError):
        w.eps[0].proc_kill(0)


def test_fresh_state_vector_is_healthy():
    w = SimWorld(4)
    assert w.eps[0].state_vec_get().corrupt() == frozenset()
    assert len(w.eps[0].state_vec_get()) == 4


@settings(max_examples=30, deadline=None)
@given(ops=st.lists(st.tuples(st.sampled_from(["kill", "ping", "stall"]), st.integers(1, 4)), max_size=12))
def test_state_vector_is_monotone(ops):
    w = SimWorld(5, timeout_ms=5)
    snaps = []

    def body(ep):
        for op, target in ops:
            if op == "kill":
                w.net.kill(target)
            elif op == "stall":
                w.net.stall(target, 0.01)
            else:
                ep.ping(target)
            snaps.append(ep.state_vec_get().corrupt())

    w.spawn(0, body)
    w.run()
    for a, b in zip(snaps, snaps[1:]):
        assert a <= b
    dead = {t for op, t in ops if op == "kill"}
    assert snaps[-1] <= dead if snaps else True


# -- group commit --------------------------------------------------------------


def test_group_commit_all_members():
    w = SimWorld(4)
    for r in range(4):
        w.spawn(r, lambda ep: (ep.group_commit(Group((0, 1, 2, 3), 1)), ep.groups.get(1)))
    res = w.run()
    for r in range(4):
        result, group = res[r]
        assert result is CommResult.SUCCESS
        assert group.members == (0, 1, 2, 3) and group.version == 1 and group.committed
    assert len({res[r][1].encode() for r in range(4)}) == 1


def test_group_commit_with_dead_member_fails_on_survivors():
    w = SimWorld(4, timeout_ms=100)
    w.net.kill(2)
    for r in (0, 1, 3):
        w.spawn(r, lambda ep: ep.group_commit(Group((0, 1, 2, 3), 1)))
    res = w.run()
    assert all(res[r] in (CommResult.ERROR, CommResult.TIMEOUT) for r in (0, 1, 3))


def test_group_commit_with_member_killed_mid_barrier():
    w = SimWorld(4, timeout_ms=200)
    for r in (0, 1, 3):
        w.spawn(r, lambda ep: ep.group_commit(Group((0, 1, 2, 3), 1)))
    w.kernel.at(1e-5, w.net.kill, 2)
    res = w.run()
    assert all(res[r] in (CommResult.ERROR, CommResult.TIMEOUT) for r in (0, 1, 3))


def test_recommit_with_rescue_member():
    w = SimWorld(6)

    def body(ep):
        if ep.rank != 5:
            assert ep.group_commit(Group((0, 1, 2, 3), 1)) is CommResult.SUCCESS
        if ep.rank == 2:
            return None
        ep.sleep(0.01)
        return ep.group_commit(Group((0, 1, 3, 5), 2)), ep.groups[2].members

    for r in (0, 1, 2, 3):
        w.spawn(r, body)
    w.spawn(5, lambda ep: (ep.group_commit(Group((0, 1, 3, 5), 2)), ep.groups[2].members))
    w.kernel.at(0.005, w.net.kill, 2)
    res = w.run()
    for r in (0, 1, 3, 5):
        assert res[r] == (CommResult.SUCCESS, (0, 1, 3, 5))


def test_group_commit_with_disagreeing_members_errors():
    w = SimWorld(2, timeout_ms=100)
    w.spawn(0, lambda ep: ep.group_commit(Group((0, 1), 1)))
    w.spawn(1, lambda ep: ep.group_commit(Group((1, 0), 1)))
    res = w.run()
    assert CommResult.ERROR in (res[0], res[1])


def test_group_commit_requires_membership():
    w = SimWorld(3)
    with pytest.raises(TransportError):
        w.eps[2].group_commit(Group((0, 1), 1))


# -- collectives -----------------------------------------------------------------


def test_pairwise_sum_order():
    assert pairwise_sum([]) == 0.0
    assert pairwise_sum([1.5]) == 1.5
    vals = [1e16, 1.0, -1e16, 1.0]
    assert pairwise_sum(vals) == (1e16 + 1.0) + (-1e16 + 1.0)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8])
def test_exchange_collectives_agree(n):
    w = SimWorld(n)
    values = [0.1 * (r + 1) ** 3 for r in range(n)]

    def body(ep):
        ex = Exchange(ep, 1, n, 64)
        ex.reset(list(range(n)), ep.rank, 1)
        out = []
        for _ in range(3):  # bank reuse across consecutive operations
            out.append(ex.allreduce_sum(values[ep.rank]))
        gathered = ex.allgather(bytes([ep.rank]) * (ep.rank + 1))
        sent = [bytes([ep.rank, dst]) for dst in range(n)]
        return out, gathered, ex.alltoallv(sent)

    for r in range(n):
        w.spawn(r, body)
    res = w.run()
    expect = pairwise_sum(values)
    for r in range(n):
        sums, gathered, received = res[r]
        assert sums == [expect] * 3
        assert gathered == [bytes([s]) * (s + 1) for s in range(n)]
        assert received == [bytes([s, r]) for s in range(n)]


def test_exchange_rejects_oversized_payload():
    w = SimWorld(1)
    ex = Exchange(w.eps[0], 1, 1, 32)
    ex.reset([0], 0, 1)
    with pytest.raises(ValueError):
        ex.allgather(b"x" * (ex.capacity + 1))


# -- process mode -----------------------------------------------------------------


@pytest.fixture
def tcp_pair():
    base = find_free_base_port(2)
    a = TcpEndpoint(0, 2, base, timeout_ms=500).start()
    b = TcpEndpoint(1, 2, base, timeout_ms=500).start()
    for ep in (a, b):
        ep.register_segment(0, 1024)
    yield a, b
    a.close()
    b.close()


@pytest.mark.process
def test_tcp_write_ping_and_close(tcp_pair):
    a, b = tcp_pair
    assert a.ping(1) is CommResult.SUCCESS
    assert a.one_sided_write(1, 0, 16, b"payload!") is CommResult.SUCCESS
    assert b.read(0, 16, 8) == b"payload!"
    b.close()
    assert a.ping(1) is CommResult.ERROR
    assert a.state_vec_get()[1] == RankState.CORRUPT


@pytest.mark.process
def test_tcp_group_commit(tcp_pair):
    a, b = tcp_pair
    out = {}
    t = threading.Thread(target=lambda: out.setdefault("b", b.group_commit(Group((0, 1), 1))))
    t.start()
    out["a"] = a.group_commit(Group((0, 1), 1))
    t.join()
    assert out == {"a": CommResult.SUCCESS, "b": CommResult.SUCCESS}
    assert a.groups[1].encode() == b.groups[1].encode()


@pytest.mark.process
def test_tcp_records_are_never_torn(tcp_pair):
    a, b = tcp_pair
    patterns = [bytes([k]) * 400 for k in (1, 2, 3)]
    stop = threading.Event()
    seen = set()

    def writer(k):
        seq = 1
        while not stop.is_set():
            a.one_sided_write(1, 0, 0, frame_record(seq, patterns[k]))
            seq += 1

    threads = [threading.Thread(target=writer, args=(k,)) for k in range(3)]
    for t in threads:
        t.start()
    deadline = time.monotonic() + 1.0
    while time.monotonic() < deadline:
        parsed = parse_record(b.read(0, 0, 400 + RECORD_OVERHEAD))
        if parsed is not None:
            assert parsed[1] in patterns
            seen.add(parsed[1][0])
    stop.set()
    for t in threads:
        t.join()
    assert seen


@pytest.mark.process
def test_tcp_sigkilled_rank_errors_every_time():
    n_targets = 4
    base = find_free_base_port(n_targets + 1)
    procs = spawn_bare_ranks(n_targets, n_targets + 1, base)
    me = TcpEndpoint(n_targets, n_targets + 1, base, timeout_ms=1000)
    try:
        for r in range(n_targets):
            assert me.ping(r) is CommResult.SUCCESS
        for proc in procs:
            proc.send_signal(signal.SIGKILL)
            proc.wait()
        trials = 0
        for r in range(n_targets):
            for i in range(25):
                t0 = time.monotonic()
                result = me.ping(r) if i % 2 else me.one_sided_write(r, 0, 0, b"x")
                assert result is CommResult.ERROR
                assert time.monotonic() - t0 < 1.0 + 0.1
                trials += 1
        assert trials == 100
        assert me.state_vec_get().corrupt() == frozenset(range(n_targets))
    finally:
        stop_procs(procs)


@pytest.mark.process
def test_tcp_proc_kill_of_serving_process():
    base = find_free_base_port(2)
    procs = spawn_bare_ranks(1, 2, base)
    me = TcpEndpoint(1, 2, base, timeout_ms=1000, pids={0: procs[0].pid})
    try:
        assert me.proc_kill(0) is CommResult.SUCCESS
        procs[0].wait(timeout=5)
        assert me.ping(0) is CommResult.ERROR
        assert me.proc_kill(0) is CommResult.SUCCESS
    finally:
        stop_procs(procs)
