from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SimWorld
from ftpgas.detector import (
    NOTICE_OFFSET,
    NOTICE_SEGMENT,
    NOTICE_SLOT_BYTES,
    FLAG_ABORT,
    FailureNotice,
    Layout,
    ProcessStatusTable,
    assign_rescues,
)
from ftpgas.recovery import (
    FailureAcknowledged,
    NoticeWatcher,
    RankMap,
    RecoveryAborted,
    WorkerGroup,
    rebuild_worker_group,
    resolve,
    working_members,
)
from ftpgas.transport import Group, put


def recovery_world(n_ranks: int, timeout_ms: int = 200) -> SimWorld:
    world = SimWorld(n_ranks, timeout_ms=timeout_ms)
    for ep in world.eps:
        ep.register_segment(NOTICE_SEGMENT, NOTICE_SLOT_BYTES)
        ep.register_segment(7, 64)
    return world


def deliver(world: SimWorld, notice: FailureNotice, ranks) -> None:
    for r in ranks:
        world.eps[r].write_local(NOTICE_SEGMENT, NOTICE_OFFSET, notice.encode())


# -- rank map ---------------------------------------------------------------------


def test_identity_map_resolves_to_itself():
    rmap = RankMap.identity(4)
    assert resolve(rmap, 2) == 2 and rmap.version == 1


def test_map_after_single_substitution():
    rmap = RankMap.from_notice(4, FailureNotice(1, (2,), (5,)))
    assert list(rmap.physical_of) == [0, 1, 5, 3] and rmap.version == 2
    assert resolve(rmap, 2) == 5 and rmap.logical(5) == 2 and rmap.logical(2) is None


def test_resolve_out_of_range():
    with pytest.raises(IndexError):
        RankMap.identity(4).resolve(4)


def test_rescue_that_fails_is_replaced_again():
    notice = FailureNotice(2, (2, 5), (5, 6))
    assert list(RankMap.from_notice(4, notice).physical_of) == [0, 1, 6, 3]


def test_failed_spare_is_ignored_by_the_map():
    notice = FailureNotice(1, (7,), (8,))
    assert list(RankMap.from_notice(4, notice).physical_of) == [0, 1, 2, 3]


@settings(max_examples=200)
@given(n_workers=st.integers(1, 10), n_spares=st.integers(2, 6), data=st.data())
def test_map_is_inverse_and_tracks_the_status_table(n_workers, n_spares, data):
    layout = Layout(n_workers, n_spares)
    table = ProcessStatusTable.initial(layout)
    notice = FailureNotice(0)
    current = list(range(n_workers))
    for _ in range(data.draw(st.integers(1, 3))):
        if not table.idle():
            break
        batch = data.draw(st.lists(st.sampled_from(current), unique=True, min_size=1,
                                   max_size=min(len(current), len(table.idle()))))
        for r in batch:
            table.mark_failed(r)
        notice = assign_rescues(table, batch, notice)
        current = [p for p in current if p not in batch] + [r for f, r in notice.pairs() if f in batch]
    rmap = RankMap.from_notice(n_workers, notice)
    assert rmap.size == n_workers
    for logical, physical in enumerate(rmap.physical_of):
        assert rmap.logical(physical) == logical
    assert sorted(rmap.physical_of) == sorted(current)
    assert working_members(layout, notice) == tuple(sorted(table.working()))
    assert rmap.version == notice.seqno + 1


# -- notice polling -------------------------------------------------------------------


def test_untouched_slot_has_no_notice():
    world = recovery_world(1)
    assert NoticeWatcher(world.eps[0]).check_failure_notice() is None


def test_notice_is_returned_once():
    world = recovery_world(1)
    notice = FailureNotice(1, (2,), (5,))
    deliver(world, notice, [0])
    watcher = NoticeWatcher(world.eps[0])
    assert watcher.pending()
    assert watcher.check_failure_notice() == notice
    assert watcher.check_failure_notice() is None and not watcher.pending()


def test_partially_written_notice_is_ignored():
    world = recovery_world(1)
    old, new = FailureNotice(1, (2,), (5,)).encode(), FailureNotice(2, (2, 3), (5, 6)).encode()
    watcher = NoticeWatcher(world.eps[0])
    for cut in range(1, len(new)):
        world.eps[0].write_local(NOTICE_SEGMENT, 0, bytes(NOTICE_SLOT_BYTES))
        world.eps[0].write_local(NOTICE_SEGMENT, 0, old)
        world.eps[0].write_local(NOTICE_SEGMENT, 0, new[:cut])
        seen = watcher.peek()
        assert seen is None or seen.seqno == 1 or world.eps[0].read(NOTICE_SEGMENT, 0, len(new)) == new


def test_guard_raises_at_communication_points():
    world = recovery_world(3)
    watcher = NoticeWatcher(world.eps[0])
    world.net.kill(2)

    def body(ep):
        try:
            put(ep, 2, 7, 0, b"data", watcher)
        except FailureAcknowledged as exc:
            return exc.notice, ep.now()

    world.spawn(0, body)
    world.kernel.at(0.9, deliver, world, FailureNotice(1, (2,), (1,)), [0])
    notice, when = world.run()[0]
    assert notice.failed == (2,) and 0.9 <= when < 0.9 + 0.2


# -- group rebuild ------------------------------------------------------------------------


def run_rebuild(world, layout, notice, participants, previous=None, watchers=None):
    def body(ep):
        old_map = RankMap.from_notice(layout.n_workers, previous)
        watcher = (watchers or {}).get(ep.rank) or NoticeWatcher(ep, last_seen=notice.seqno)
        return rebuild_worker_group(ep, notice, old_map, layout, watcher=watcher, killed=set())

    for r in participants:
        world.spawn(r, body)
    return world.run()


def test_rebuild_after_one_failure():
    layout = Layout(4, 2)
    world = recovery_world(layout.n_ranks)
    world.net.kill(2)
    notice = FailureNotice(1, (2,), (5,))
    res = run_rebuild(world, layout, notice, [0, 1, 3, 5])
    for r in (0, 1, 3, 5):
        out = res[r]
        assert out.group.members == (0, 1, 3, 5) and out.group.size == 4
        assert list(out.rank_map.physical_of) == [0, 1, 5, 3] and out.rank_map.version == 2
        assert out.group.version == 2 and out.attempts == 1
        assert (2 in {t for _, t in world.eps[r].kills_issued})
    assert resolve(res[0].rank_map, 2) == 5


def test_rebuild_without_failure_is_identity():
    world = recovery_world(2)
    group = WorkerGroup(Group((0, 1), 1), 2)
    rmap = RankMap.identity(2)
    out = rebuild_worker_group(world.eps[0], None, rmap, Layout(2, 1), current=group)
    assert out.group is group and out.rank_map is rmap and out.attempts == 0
    assert world.eps[0].kills_issued == []


def test_rebuild_after_three_simultaneous_failures():
    layout = Layout(6, 4)
    world = recovery_world(layout.n_ranks)
    for r in (1, 3, 5):
        world.net.kill(r)
    notice = FailureNotice(1, (1, 3, 5), (7, 8, 9))
    res = run_rebuild(world, layout, notice, [0, 2, 4, 7, 8, 9])
    maps = {res[r].rank_map.to_bytes() for r in res}
    assert len(maps) == 1
    assert list(res[0].rank_map.physical_of) == [0, 7, 2, 8, 4, 9]
    assert all(res[r].attempts == 1 for r in res)
    assert all(res[r].group.members == (0, 2, 4, 7, 8, 9) for r in res)


def test_rebuild_refuses_aborted_notice():
    world = recovery_world(6)
    notice = FailureNotice(1, (1,), (5,), FLAG_ABORT, (2,))
    with pytest.raises(RecoveryAborted):
        rebuild_worker_group(world.eps[0], notice, RankMap.identity(4), Layout(4, 2))


def test_rescue_dying_during_rebuild_leads_to_retry():
    layout = Layout(4, 3)
    world = recovery_world(layout.n_ranks, timeout_ms=100)
    world.net.kill(2)
    world.net.kill(5)
    first = FailureNotice(1, (2,), (5,))
    second = FailureNotice(2, (2, 5), (5, 6))
    watchers = {r: NoticeWatcher(world.eps[r], last_seen=1) for r in (0, 1, 3)}
    world.kernel.at(0.05, deliver, world, second, [0, 1, 3, 6])

    def body(ep):
        return rebuild_worker_group(ep, first, RankMap.identity(4), layout, watcher=watchers[ep.rank], killed=set())

    def rescue(ep):
        ep.sleep(0.05)
        return rebuild_worker_group(ep, second, RankMap.identity(4), layout, killed=set())

    for r in (0, 1, 3):
        world.spawn(r, body)
    world.spawn(6, rescue)
    res = world.run()
    for r in (0, 1, 3, 6):
        assert res[r].group.members == (0, 1, 3, 6)
        assert list(res[r].rank_map.physical_of) == [0, 1, 6, 3] and res[r].rank_map.version == 3
    assert all(res[r].attempts == 2 for r in (0, 1, 3))
    assert res[6].attempts == 1


def test_commit_retries_are_capped():
    layout = Layout(2, 2)
    world = recovery_world(layout.n_ranks, timeout_ms=20)
    world.net.kill(1)
    world.net.kill(3)  # the rescue never shows up
    notice = FailureNotice(1, (1,), (3,))

    def body(ep):
        try:
            rebuild_worker_group(ep, notice, RankMap.identity(2), layout,
                                 watcher=NoticeWatcher(ep, last_seen=1), killed=set())
        except RecoveryAborted as exc:
            return str(exc)

    world.spawn(0, body)
    assert "5 times" in world.run()[0]


@settings(max_examples=20, deadline=None)
@given(n_workers=st.integers(2, 8), data=st.data())
def test_rebuild_agreement(n_workers, data):
    failed = data.draw(st.lists(st.integers(0, n_workers - 1), unique=True, min_size=1, max_size=n_workers))
    layout = Layout(n_workers, len(failed) + 1)
    table = ProcessStatusTable.initial(layout)
    for r in failed:
        table.mark_failed(r)
    notice = assign_rescues(table, failed)
    world = recovery_world(layout.n_ranks)
    for r in failed:
        world.net.kill(r)
    participants = table.working()
    res = run_rebuild(world, layout, notice, participants)
    assert sorted(res) == sorted(participants)
    assert len({res[r].rank_map.to_bytes() for r in res}) == 1
    assert len({res[r].group.group.encode() for r in res}) == 1
    assert all(len(res[r].group.members) == n_workers for r in res)
    for r in participants:
        assert set(failed) <= {t for _, t in world.eps[r].kills_issued}
