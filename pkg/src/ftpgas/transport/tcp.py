"""Process-mode endpoint: one OS process per rank, loopback stream sockets.

Rank ``r`` listens on ``base_port + r``. A receiver thread per accepted
connection applies incoming frames to local segments and replies, so no
application-level receive call is ever needed. Outgoing requests use one
connection per (calling thread, target) which keeps per-target ordering for a
thread without cross-thread locking.

Run ``python -m ftpgas.transport --rank R --ranks N --base-port P`` to
start a bare serving rank (used by the ping benchmark and by tests that need a
process to SIGKILL).
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import signal
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

from .base import (
    FRAME_HEADER,
    CommResult,
    Endpoint,
    FrameKind,
    RankKilled,
    TransportError,
    encode_frame,
)

log = logging.getLogger(__name__)

BASE_PORT_ENV = "FTPGAS_BASE_PORT"
DEFAULT_BASE_PORT = 47000


def base_port_from_env(default: int = DEFAULT_BASE_PORT) -> int:
    return int(os.environ.get(BASE_PORT_ENV, default))


def find_free_base_port(n_ports: int, start: int = 20000, stop: int = 60000, host: str = "127.0.0.1") -> int:
    """Find ``n_ports`` consecutive bindable ports (best effort, racy by nature)."""
    import random

    rng = random.Random(os.getpid() ^ int(time.time() * 1e6))
    for _ in range(200):
        base = rng.randrange(start, stop - n_ports)
        socks = []
        try:
            for p in range(base, base + n_ports):
                s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                socks.append(s)
                s.bind((host, p))
            return base
        except OSError:
            continue
        finally:
            for s in socks:
                s.close()
    raise TransportError("no free port range found")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket):
    head = _recv_exact(sock, FRAME_HEADER.size)
    length, kind, req_id, src = FRAME_HEADER.unpack(head)
    body = _recv_exact(sock, length - (FRAME_HEADER.size - 4))
    return kind, req_id, src, body


class TcpEndpoint(Endpoint):
    mode = "process"

    def __init__(self, rank: int, n_ranks: int, base_port: Optional[int] = None,
                 host: str = "127.0.0.1", timeout_ms: int = 1000,
                 pids: Optional[dict] = None, on_kill: Optional[Callable[[], None]] = None):
        self._cond = threading.Condition(threading.RLock())
        super().__init__(rank, n_ranks, timeout_ms, lock=self._cond)
        self.base_port = base_port_from_env() if base_port is None else base_port
        self.host = host
        self.pids = dict(pids or {})
        self._on_kill = on_kill if on_kill is not None else _die
        self._local = threading.local()
        self._req_ids = itertools.count(1)
        self._listener: Optional[socket.socket] = None
        self._accepted: list = []
        self._closed = False
        self._threads: list = []
        self._pool: Optional[ThreadPoolExecutor] = None
        self._pool_lanes = 0

    # -- lifecycle ---------------------------------------------------------

    def port_of(self, rank: int) -> int:
        return self.base_port + rank

    def start(self) -> "TcpEndpoint":
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((self.host, self.port_of(self.rank)))
        s.listen(128)
        self._listener = s
        t = threading.Thread(target=self._accept_loop, name=f"accept-{self.rank}", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def close(self) -> None:
        """Stop serving: later connects are refused and open channels break."""
        self._closed = True
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._listener.close()
        for c in list(self._accepted):
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()
        with self._cond:
            self._cond.notify_all()

    @property
    def alive(self) -> bool:
        return not self._closed

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._accepted.append(conn)
            t = threading.Thread(target=self._serve, args=(conn,), daemon=True)
            t.start()

    def _serve(self, conn: socket.socket) -> None:
        try:
            while not self._closed:
                kind, req_id, src, body = read_frame(conn)
                if kind == FrameKind.KILL:
                    conn.sendall(encode_frame(FrameKind.ACK, req_id, self.rank, b"\x00"))
                    self._on_kill_frame()
                    return
                reply_kind, reply = self.handle_frame(kind, src, body)
                conn.sendall(encode_frame(reply_kind, req_id, self.rank, reply))
        except (OSError, ConnectionError, TransportError):
            pass
        finally:
            try:
                self._accepted.remove(conn)
            except ValueError:
                pass
            conn.close()

    def _on_kill_frame(self) -> None:
        self._on_kill()

    # -- requests ----------------------------------------------------------

    def _conns(self) -> dict:
        conns = getattr(self._local, "conns", None)
        if conns is None:
            conns = self._local.conns = {}
        return conns

    def _drop(self, target: int) -> None:
        sock = self._conns().pop(target, None)
        if sock is not None:
            sock.close()

    def _request(self, target: int, kind: FrameKind, body: bytes, timeout_ms: int):
        if self._closed:
            raise RankKilled(self.rank)
        deadline = time.monotonic() + timeout_ms / 1000.0
        conns = self._conns()
        sock = conns.get(target)
        try:
            if sock is None:
                remaining = max(1e-4, deadline - time.monotonic())
                sock = socket.create_connection((self.host, self.port_of(target)), timeout=remaining)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                conns[target] = sock
            req_id = next(self._req_ids) & 0xFFFFFFFF
            sock.settimeout(max(1e-4, deadline - time.monotonic()))
            sock.sendall(encode_frame(kind, req_id, self.rank, body))
            while True:
                sock.settimeout(max(1e-4, deadline - time.monotonic()))
                rkind, rid, _, reply = read_frame(sock)
                if rid == req_id:
                    return CommResult.SUCCESS, reply
        except socket.timeout:
            self._drop(target)
            return CommResult.TIMEOUT, b""
        except (OSError, ConnectionError):
            self._drop(target)
            return CommResult.ERROR, b""

    def _terminate_remote(self, target: int, timeout_ms: int) -> CommResult:
        result, _ = self._request(target, FrameKind.KILL, b"", timeout_ms)
        self._drop(target)
        pid = self.pids.get(target)
        if pid is not None:
            try:
                os.kill(pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            except PermissionError:
                return CommResult.ERROR
            return CommResult.SUCCESS
        if result is CommResult.TIMEOUT:
            return CommResult.TIMEOUT
        if result is CommResult.SUCCESS:
            return CommResult.SUCCESS
        # nothing answers on the port: already gone, or a broken link we cannot verify
        probe, _ = self._request(target, FrameKind.PING, b"", timeout_ms)
        return CommResult.SUCCESS if probe is CommResult.ERROR else CommResult.ERROR

    # -- local waiting / runtime -------------------------------------------

    def _notify_change(self) -> None:
        with self._cond:
            self._cond.notify_all()

    def wait_local(self, predicate, timeout_ms) -> bool:
        deadline = None if timeout_ms is None else time.monotonic() + timeout_ms / 1000.0
        with self._cond:
            while True:
                if self._closed:
                    raise RankKilled(self.rank)
                if predicate():
                    return True
                if deadline is None:
                    self._cond.wait()
                    continue
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def spawn(self, fn, *args, name: str = ""):
        t = threading.Thread(target=fn, args=args, name=name or f"r{self.rank}", daemon=True)
        t.start()
        return t

    def event(self):
        return threading.Event()

    def parallel_map(self, fn: Callable, items, lanes: int) -> list:
        # long-lived lanes keep their per-thread connections across scans
        items = list(items)
        if lanes <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        if self._pool is None or self._pool_lanes < lanes:
            self._pool = ThreadPoolExecutor(max_workers=lanes, thread_name_prefix=f"lane-{self.rank}")
            self._pool_lanes = lanes
        return list(self._pool.map(fn, items))

    def exit_self(self) -> None:
        logging.shutdown()
        os._exit(255)


def _die() -> None:
    os.kill(os.getpid(), signal.SIGKILL)


def serve_forever(rank: int, n_ranks: int, base_port: int, segments=((0, 4096),)) -> None:
    ep = TcpEndpoint(rank, n_ranks, base_port)
    for sid, size in segments:
        ep.register_segment(sid, size)
    ep.start()
    print(f"ready {rank} {os.getpid()}", flush=True)
    while True:
        time.sleep(3600)


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description="serve one bare transport rank")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--ranks", type=int, required=True)
    p.add_argument("--base-port", type=int, default=None)
    args = p.parse_args(argv)
    serve_forever(args.rank, args.ranks, args.base_port if args.base_port is not None else base_port_from_env())


if __name__ == "__main__":
    main()
