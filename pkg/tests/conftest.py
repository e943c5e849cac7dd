from __future__ import annotations

import os
import socket
import subprocess
import sys
from pathlib import Path

import pytest

from ftpgas.transport import SimKernel, SimNetwork

SRC = str(Path(__file__).resolve().parents[1] / "src")


class SimWorld:
    """A kernel, a network and one endpoint per rank; bodies run as rank tasks."""

    def __init__(self, n_ranks: int, timeout_ms: int = 1000, latency: float = 20e-6):
        self.kernel = SimKernel()
        self.net = SimNetwork(self.kernel, n_ranks, latency)
        self.eps = [self.net.endpoint(r, timeout_ms) for r in range(n_ranks)]
        self.results: dict = {}

    def spawn(self, rank: int, fn, *args) -> None:
        def body():
            self.results[rank] = fn(self.eps[rank], *args)

        self.kernel.spawn(body, owner=rank, name=f"t{rank}")

    def run(self, until=None) -> dict:
        self.kernel.run(until=until)
        return self.results


@pytest.fixture
def world():
    return SimWorld


def spawn_bare_ranks(count: int, n_ranks: int, base_port: int, first: int = 0) -> list:
    """Start serving ranks ``first .. first+count-1`` as separate processes."""
    env = dict(os.environ)
    env["PYTHONPATH"] = SRC + os.pathsep + env.get("PYTHONPATH", "")
    procs = [subprocess.Popen([sys.executable, "-m", "ftpgas.transport", "--rank", str(r), "--ranks", str(n_ranks),
                               "--base-port", str(base_port)], stdout=subprocess.PIPE, text=True, env=env)
             for r in range(first, first + count)]
    for proc in procs:
        assert proc.stdout.readline().startswith("ready")
    return procs


def stop_procs(procs) -> None:
    for proc in procs:
        if proc.poll() is None:
            proc.kill()
        proc.wait()
        proc.stdout.close()


def port_is_free(port: int) -> bool:
    with socket.socket() as s:
        return s.connect_ex(("127.0.0.1", port)) != 0
