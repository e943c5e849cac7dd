"""Deterministic in-process runtime: virtual clock, cooperative tasks, scripted network.

Every rank runs as one or more greenlet tasks scheduled by a :class:`SimKernel`.
Exactly one task runs at a time and virtual time only advances when all tasks
are blocked, so a run is a pure function of its inputs: two runs with the same
seed produce identical event sequences and timings.

The :class:`SimNetwork` models a latency/bandwidth link between every pair of
ranks, supports killing ranks (endpoint closed for good), dropping links,
isolating a rank and stalling a receiver.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from typing import Callable, Optional

import greenlet

from .base import (
    ACK_OK,
    CommResult,
    Endpoint,
    FrameKind,
    RankKilled,
    TransportError,
)

log = logging.getLogger(__name__)

TIMED_OUT = object()


class SimTask:
    __slots__ = ("kernel", "glet", "owner", "name", "token", "done", "killed", "_joiners")

    def __init__(self, kernel, glet, owner, name):
        self.kernel = kernel
        self.glet = glet
        self.owner = owner
        self.name = name
        self.token = 0
        self.done = False
        self.killed = False
        self._joiners = []

    def join(self, timeout: Optional[float] = None) -> bool:
        if self.done:
            return True
        waker = self.kernel.prepare()
        self._joiners.append(waker)
        self.kernel.suspend(waker, timeout)
        return self.done

    def __repr__(self):
        return f"SimTask({self.name!r}, owner={self.owner})"


class Waker:
    """Resumes one suspended task exactly once; later calls are ignored."""

    __slots__ = ("kernel", "task", "token")

    def __init__(self, kernel, task, token):
        self.kernel = kernel
        self.task = task
        self.token = token

    @property
    def pending(self) -> bool:
        return self.task.token == self.token and not self.task.done

    def __call__(self, value=True) -> None:
        if not self.pending:
            return
        self.task.token += 1
        self.kernel.schedule(0.0, self.kernel._run_task, self.task, value)


class SimKernel:
    def __init__(self):
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()
        self._hub = greenlet.getcurrent()
        self._current: Optional[SimTask] = None
        self.tasks: list = []
        self.errors: list = []

    # -- scheduling --------------------------------------------------------

    def schedule(self, delay: float, fn: Callable, *args) -> None:
        heapq.heappush(self._queue, (self.now + max(0.0, delay), next(self._seq), fn, args))

    def at(self, when: float, fn: Callable, *args) -> None:
        heapq.heappush(self._queue, (max(when, self.now), next(self._seq), fn, args))

    def spawn(self, fn: Callable, *args, owner=None, name: str = "") -> SimTask:
        def body(*_ignored):
            fn(*args)

        task = SimTask(self, greenlet.greenlet(body, parent=self._hub), owner, name or fn.__name__)
        self.tasks.append(task)
        self.schedule(0.0, self._run_task, task, None)
        return task

    @property
    def current(self) -> Optional[SimTask]:
        return self._current

    def prepare(self) -> Waker:
        task = self._current
        if task is None:
            raise RuntimeError("blocking call outside a simulation task")
        task.token += 1
        return Waker(self, task, task.token)

    def suspend(self, waker: Waker, timeout: Optional[float] = None):
        """Yield to the hub until ``waker`` fires or ``timeout`` elapses."""
        task = waker.task
        if task is not self._current:
            raise RuntimeError("suspend from a foreign task")
        if task.killed:
            raise RankKilled(task.owner)
        if timeout is not None:
            self.schedule(timeout, waker, TIMED_OUT)
        value = self._hub.switch()
        if task.killed:
            raise RankKilled(task.owner)
        return value

    def sleep(self, seconds: float) -> None:
        waker = self.prepare()
        self.suspend(waker, max(0.0, seconds))

    def _run_task(self, task: SimTask, value) -> None:
        if task.done:
            return
        self._current = task
        try:
            if task.killed:
                task.glet.throw(RankKilled(task.owner))
            else:
                task.glet.switch(value)
        except RankKilled:
            pass
        except BaseException as exc:  # noqa: BLE001 - reported by run()
            log.debug("task %s failed", task.name, exc_info=True)
            self.errors.append((task, exc))
        finally:
            self._current = None
        if task.glet.dead:
            self._finish(task)

    def _finish(self, task: SimTask) -> None:
        task.done = True
        joiners, task._joiners = task._joiners, []
        for w in joiners:
            w(True)

    def kill_owner(self, owner) -> None:
        """Terminate every task belonging to ``owner``."""
        for task in self.tasks:
            if task.owner == owner and not task.done and not task.killed:
                task.killed = True
                if task is self._current:
                    continue
                if not task.glet:
                    # never started: drop it without running
                    self._finish(task)
                    continue
                task.token += 1
                self.schedule(0.0, self._run_task, task, None)
        cur = self._current
        if cur is not None and cur.owner == owner:
            raise RankKilled(owner)

    def run(self, until: Optional[float] = None, stop: Optional[Callable[[], bool]] = None) -> None:
        if greenlet.getcurrent() is not self._hub:
            raise RuntimeError("SimKernel.run must be called from the thread/greenlet that created it")
        while self._queue:
            if stop is not None and stop():
                break
            t, _, fn, args = self._queue[0]
            if until is not None and t > until:
                self.now = until
                break
            heapq.heappop(self._queue)
            self.now = t
            fn(*args)
        if self.errors:
            task, exc = self.errors[0]
            raise RuntimeError(f"simulation task {task.name!r} failed: {exc!r}") from exc

    def shutdown(self) -> None:
        """Kill all remaining tasks and drain their unwinding."""
        owners = {t.owner for t in self.tasks if not t.done}
        for owner in owners:
            self.kill_owner(owner)
        self.run()
        self._queue.clear()


class SimEvent:
    def __init__(self, kernel: SimKernel):
        self.kernel = kernel
        self._flag = False
        self._waiters: list = []

    def set(self) -> None:
        self._flag = True
        waiters, self._waiters = self._waiters, []
        for w in waiters:
            w(True)

    def clear(self) -> None:
        self._flag = False

    def is_set(self) -> bool:
        return self._flag

    def wait(self, timeout: Optional[float] = None) -> bool:
        if self._flag:
            return True
        waker = self.kernel.prepare()
        self._waiters.append(waker)
        self.kernel.suspend(waker, timeout)
        return self._flag


class SimNetwork:
    """All-to-all link model between in-process ranks.

    ``latency`` is the one-way delay in seconds, ``bandwidth`` bytes/second.
    """

    def __init__(self, kernel: SimKernel, n_ranks: int, latency: float = 20e-6,
                 bandwidth: float = 1e9):
        self.kernel = kernel
        self.n_ranks = n_ranks
        self.latency = latency
        self.bandwidth = bandwidth
        self.endpoints: dict = {}
        self._open = [True] * n_ranks
        self._dropped: set = set()
        self._isolated: set = set()
        self._stall_until = [0.0] * n_ranks
        self._fifo: dict = {}
        self.kill_log: list = []
        self.deaths: dict = {}

    def endpoint(self, rank: int, timeout_ms: int = 1000) -> "SimEndpoint":
        if rank in self.endpoints:
            raise TransportError(f"endpoint {rank} already created")
        ep = SimEndpoint(self, rank, timeout_ms)
        self.endpoints[rank] = ep
        return ep

    # -- fault scripting ---------------------------------------------------

    def is_open(self, rank: int) -> bool:
        return self._open[rank]

    def kill(self, rank: int, issuer=None) -> None:
        """Close ``rank`` permanently and terminate its tasks (fail-stop)."""
        self.kill_log.append((self.kernel.now, issuer, rank))
        if self._open[rank]:
            self._open[rank] = False
            self.deaths[rank] = self.kernel.now
            ep = self.endpoints.get(rank)
            if ep is not None:
                ep._wake_all()
        self.kernel.kill_owner(rank)

    def drop_link(self, a: int, b: int) -> None:
        self._dropped.add(frozenset((a, b)))

    def isolate(self, rank: int) -> None:
        self._isolated.add(rank)

    def stall(self, rank: int, seconds: float) -> None:
        self._stall_until[rank] = max(self._stall_until[rank], self.kernel.now + seconds)

    def link_down(self, a: int, b: int) -> bool:
        return a in self._isolated or b in self._isolated or frozenset((a, b)) in self._dropped

    def transit(self, nbytes: int) -> float:
        return self.latency + nbytes / self.bandwidth


class SimEndpoint(Endpoint):
    mode = "sim"

    def __init__(self, net: SimNetwork, rank: int, timeout_ms: int):
        super().__init__(rank, net.n_ranks, timeout_ms)
        self.net = net
        self.kernel = net.kernel
        self._change_waiters: list = []

    @property
    def alive(self) -> bool:
        return self.net.is_open(self.rank)

    def _check_alive(self) -> None:
        if not self.alive:
            raise RankKilled(self.rank)

    def _wake_all(self) -> None:
        waiters, self._change_waiters = self._change_waiters, []
        for w in waiters:
            w(True)

    def _notify_change(self) -> None:
        self._wake_all()

    def _request(self, target: int, kind: FrameKind, body: bytes, timeout_ms: int):
        self._check_alive()
        net, k = self.net, self.kernel
        waker = k.prepare()
        transit = net.transit(len(body))
        src = self.rank

        def fail():
            waker((CommResult.ERROR, b""))

        def deliver():
            if not net.is_open(target) or net.link_down(src, target):
                k.schedule(net.latency, fail)
                return
            if net._stall_until[target] > k.now:
                k.at(net._stall_until[target], deliver)
                return
            reply_kind, reply = net.endpoints[target].handle_frame(kind, src, body)
            k.schedule(net.transit(len(reply)), waker, (CommResult.SUCCESS, reply))

        if not net.is_open(target) or net.link_down(src, target) or target not in net.endpoints:
            # refused at connection time
            k.schedule(2 * net.latency, fail)
        else:
            key = (src, target)
            arrive = max(k.now + transit, self.net._fifo.get(key, 0.0))
            self.net._fifo[key] = arrive
            k.at(arrive, deliver)
        value = k.suspend(waker, timeout_ms / 1000.0)
        if value is TIMED_OUT:
            return CommResult.TIMEOUT, b""
        return value

    def _on_kill_frame(self) -> None:
        self.net.kill(self.rank)

    def _terminate_remote(self, target: int, timeout_ms: int) -> CommResult:
        self._check_alive()
        # the runtime daemon tears the process down out of band
        self.kernel.sleep(2 * self.net.latency)
        self.net.kill(target, issuer=self.rank)
        return CommResult.SUCCESS

    def wait_local(self, predicate, timeout_ms) -> bool:
        k = self.kernel
        deadline = None if timeout_ms is None else k.now + timeout_ms / 1000.0
        while True:
            self._check_alive()
            if predicate():
                return True
            if deadline is not None and k.now >= deadline:
                return False
            waker = k.prepare()
            self._change_waiters.append(waker)
            k.suspend(waker, None if deadline is None else deadline - k.now)

    def now(self) -> float:
        return self.kernel.now

    def sleep(self, seconds: float) -> None:
        self._check_alive()
        self.kernel.sleep(seconds)

    def charge(self, seconds: float) -> None:
        if seconds > 0:
            self.sleep(seconds)

    def spawn(self, fn, *args, name: str = ""):
        return self.kernel.spawn(fn, *args, owner=self.rank, name=name or f"r{self.rank}")

    def event(self) -> SimEvent:
        return SimEvent(self.kernel)

    def exit_self(self) -> None:
        self.net.kill(self.rank, issuer=self.rank)


__all__ = ["SimKernel", "SimNetwork", "SimEndpoint", "SimEvent", "SimTask", "TIMED_OUT", "ACK_OK"]
