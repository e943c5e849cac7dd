"""Neighbor-level checkpoint/restart library.

Every rank writes its checkpoint to its own store directory (standing in for
a node-local disk) and hands the file to a background replicator, which copies
it into the store of the next logical rank on a ring. After a failure the
ring is recomputed over the new rank map, the ranks agree on the newest
generation that every logical rank can still reach, and rescue ranks fetch
the failed rank's record from that rank's old neighbor.

Store layout under ``root``::

    <physical>/own/cp_<iteration>.bin
    <physical>/own/comm.bin
    <physical>/guest/<logical>/cp_<iteration>.bin
    <physical>/guest/<logical>/comm.bin

Record format (little-endian): magic ``GCPR``, version u32, logical u32,
iteration u64, n_local u64, alpha count u64, then f64 arrays v_prev, v_curr,
alphas, betas, eigen snapshot, then CRC32 over everything before it.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .transport import CommResult, Endpoint

log = logging.getLogger(__name__)

MAGIC = b"GCPR"
COMM_MAGIC = b"GCPC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIQQQ")
_CRC = struct.Struct("<I")
_CP_NAME = re.compile(r"^cp_(\d+)\.bin$")
KEEP_GENERATIONS = 2


class CorruptCheckpoint(ValueError):
    pass


class CheckpointUnavailable(RuntimeError):
    """No valid copy of a required generation can be reached."""


@dataclass
class CheckpointRecord:
    logical_rank: int
    iteration: int
    v_prev: np.ndarray
    v_curr: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    eigen_snapshot: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("v_prev", "v_curr", "alphas", "betas", "eigen_snapshot"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype="<f8"))
        self.validate()

    def validate(self) -> None:
        if self.v_prev.shape != self.v_curr.shape or self.v_curr.ndim != 1:
            raise ValueError("v_prev and v_curr must be vectors of equal length")
        if len(self.betas) != len(self.alphas) + 1:
            raise ValueError("need exactly one more beta than alphas")
        if len(self.alphas) != self.iteration:
            raise ValueError("alpha count must equal the iteration number")

    @property
    def n_local(self) -> int:
        return len(self.v_curr)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, FORMAT_VERSION, self.logical_rank, self.iteration,
                            self.n_local, len(self.alphas))
        body = b"".join(a.tobytes() for a in (self.v_prev, self.v_curr, self.alphas,
                                               self.betas, self.eigen_snapshot))
        blob = head + body
        return blob + _CRC.pack(zlib.crc32(blob))

    @classmethod
    def from_bytes(cls, data: bytes) -> "CheckpointRecord":
        if len(data) < _HEADER.size + _CRC.size:
            raise CorruptCheckpoint("truncated checkpoint")
        (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
        if zlib.crc32(data[:-_CRC.size]) != crc:
            raise CorruptCheckpoint("checksum mismatch")
        magic, version, logical, iteration, n_local, n_alpha = _HEADER.unpack_from(data)
        if magic != MAGIC or version != FORMAT_VERSION:
            raise CorruptCheckpoint("bad magic or format version")
        body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size,
                             count=(len(data) - _HEADER.size - _CRC.size) // 8)
        if (len(data) - _HEADER.size - _CRC.size) % 8:
            raise CorruptCheckpoint("payload is not a whole number of reals")
        fixed = 2 * n_local + 2 * n_alpha + 1
        if len(body) < fixed:
            raise CorruptCheckpoint("payload shorter than header announces")
        parts = np.split(body.copy(), np.cumsum([n_local, n_local, n_alpha, n_alpha + 1]))
        try:
            return cls(logical, iteration, *parts)
        except ValueError as exc:
            raise CorruptCheckpoint(str(exc)) from exc

    def same_as(self, other: "CheckpointRecord") -> bool:
        return self.to_bytes() == other.to_bytes()


def encode_blob(logical: int, payload: bytes) -> bytes:
    blob = COMM_MAGIC + struct.pack("<IIQ", FORMAT_VERSION, logical, len(payload)) + payload
    return blob + _CRC.pack(zlib.crc32(blob))


def decode_blob(data: bytes) -> tuple:
    if len(data) < 24 or data[:4] != COMM_MAGIC:
        raise CorruptCheckpoint("bad communication checkpoint header")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[:-_CRC.size]) != crc:
        raise CorruptCheckpoint("checksum mismatch")
    version, logical, length = struct.unpack_from("<IIQ", data, 4)
    if version != FORMAT_VERSION or 20 + length + _CRC.size != len(data):
        raise CorruptCheckpoint("communication checkpoint length mismatch")
    return logical, bytes(data[20:20 + length])


def atomic_write(path: Path, data: bytes) -> Path:
    """Write ``data`` to ``path`` through a temp file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
    os.replace(tmp, path)
    return path


def load_record(path: Path) -> CheckpointRecord:
    return CheckpointRecord.from_bytes(Path(path).read_bytes())


def cp_name(iteration: int) -> str:
    return f"cp_{iteration}.bin"


def list_generations(directory: Path) -> list:
    """Iterations of all ``cp_*.bin`` files in ``directory`` (unvalidated), ascending."""
    try:
        names = os.listdir(directory)
    except FileNotFoundError:
        return []
    return sorted(int(m.group(1)) for m in map(_CP_NAME.match, names) if m)


def valid_generations(directory: Path, logical: int) -> list:
    good = []
    for it in list_generations(directory):
        try:
            rec = load_record(Path(directory) / cp_name(it))
        except (OSError, CorruptCheckpoint):
            continue
        if rec.logical_rank == logical and rec.iteration == it:
            good.append(it)
    return good


def prune(directory: Path, keep: int = KEEP_GENERATIONS) -> None:
    for it in list_generations(directory)[:-keep]:
        try:
            os.remove(Path(directory) / cp_name(it))
        except FileNotFoundError:
            pass


class StoreLayout:
    def __init__(self, root, durable_root=None):
        self.root = Path(root)
        self.durable_root = Path(durable_root) if durable_root is not None else None

    def own(self, physical: int) -> Path:
        return self.root / str(physical) / "own"

    def guest(self, physical: int, logical: int) -> Path:
        return self.root / str(physical) / "guest" / str(logical)

    def durable(self, logical: int) -> Optional[Path]:
        return None if self.durable_root is None else self.durable_root / str(logical)

    def wipe(self, physical: int) -> None:
        """Simulate loss of a node: its local disk content disappears."""
        shutil.rmtree(self.root / str(physical), ignore_errors=True)


@dataclass(frozen=True)
class NeighborMap:
    physical_of: tuple
    version: int

    @property
    def size(self) -> int:
        return len(self.physical_of)

    def neighbor_of(self, logical: int) -> int:
        return (logical + 1) % self.size

    def predecessor_of(self, logical: int) -> int:
        return (logical - 1) % self.size

    def physical_neighbor(self, logical: int) -> int:
        return self.physical_of[self.neighbor_of(logical)]


def neighbor_map_for(rank_map) -> NeighborMap:
    return NeighborMap(tuple(rank_map.physical_of), rank_map.version)


def select_restart_iteration(available: Sequence[Sequence[int]]) -> int:
    """Newest generation present in every rank's reachable set."""
    if not available:
        raise CheckpointUnavailable("no ranks reported checkpoint generations")
    common = set(available[0])
    for gens in available[1:]:
        common &= set(gens)
    if not common:
        raise CheckpointUnavailable("no checkpoint generation is reachable for every rank")
    return max(common)


def _quiet(kind: str, **fields) -> None:
    pass


class CheckpointLibrary:
    """Per-rank checkpoint writer with a background neighbor replicator."""

    def __init__(self, ep: Endpoint, layout: StoreLayout, logical: int, neighbors: NeighborMap, *,
                 durable_every: int = 0, write_cost_per_byte: float = 0.0,
                 copy_cost_per_byte: float = 0.0, emit: Callable = _quiet):
        self.ep = ep
        self.layout = layout
        self.logical = logical
        self.neighbors = neighbors
        self.durable_every = durable_every
        self.write_cost_per_byte = write_cost_per_byte
        self.copy_cost_per_byte = copy_cost_per_byte
        self.emit = emit
        self._pending: dict = {}
        self._mutex = threading.Lock()
        self._stop = False
        self._wake = ep.event()
        self._idle = ep.event()
        self._idle.set()
        self._task = None
        self._written = 0
        self.replicated: list = []
        self.failed_copies: list = []

    # -- paths -------------------------------------------------------------

    @property
    def own_dir(self) -> Path:
        return self.layout.own(self.ep.rank)

    def guest_dir_at(self, physical: int, logical: Optional[int] = None) -> Path:
        return self.layout.guest(physical, self.logical if logical is None else logical)

    # -- replicator thread -------------------------------------------------

    def start(self) -> None:
        if self._task is None:
            self._stop = False
            self._task = self.ep.spawn(self._replicator_loop, name=f"cp-repl-{self.ep.rank}")

    def stop(self) -> None:
        self._stop = True
        self._wake.set()

    def _signal(self, kind: str, path: Path) -> None:
        with self._mutex:
            self._pending[kind] = path  # depth 1 per kind: a newer file replaces an unstarted one
            self._idle.clear()
        self._wake.set()

    def _next(self):
        with self._mutex:
            if not self._pending:
                self._idle.set()
                return None
            kind = "comm" if "comm" in self._pending else next(iter(self._pending))
            return kind, self._pending.pop(kind)

    def _replicator_loop(self) -> None:
        while not self._stop:
            item = self._next()
            if item is None:
                self._wake.wait()
                self._wake.clear()
                continue
            kind, path = item
            try:
                if kind == "all":
                    for it in list_generations(self.own_dir)[-KEEP_GENERATIONS:]:
                        self.replicate_to_neighbor(self.own_dir / cp_name(it))
                    if (self.own_dir / "comm.bin").exists():
                        self.replicate_to_neighbor(self.own_dir / "comm.bin")
                else:
                    self.replicate_to_neighbor(path)
            except (OSError, CorruptCheckpoint) as exc:
                log.warning("rank %d: replication of %s failed: %s", self.ep.rank, path, exc)

    def quiesce(self, timeout_s: Optional[float] = None) -> bool:
        """Wait until every handed-off file has been processed."""
        if self._task is None:
            return True
        return self._idle.wait(timeout_s)

    # -- operations --------------------------------------------------------

    def write_local_checkpoint(self, record: CheckpointRecord) -> Path:
        record.validate()
        if record.logical_rank != self.logical:
            raise ValueError("record belongs to another logical rank")
        data = record.to_bytes()
        path = atomic_write(self.own_dir / cp_name(record.iteration), data)
        self.ep.charge(len(data) * self.write_cost_per_byte)
        self._written += 1
        return path

    def checkpoint(self, record: CheckpointRecord) -> Optional[Path]:
        """Write locally and hand the file to the replicator; failures skip the checkpoint."""
        try:
            path = self.write_local_checkpoint(record)
        except OSError as exc:
            log.error("rank %d: checkpoint %d skipped: %s", self.ep.rank, record.iteration, exc)
            return None
        self.emit("checkpoint", iteration=record.iteration)
        self._signal("cp", path)
        return path

    def write_comm_checkpoint(self, payload: bytes) -> Path:
        path = atomic_write(self.own_dir / "comm.bin", encode_blob(self.logical, payload))
        self._signal("comm", path)
        return path

    def read_comm_checkpoint(self, source_physical: Optional[int] = None) -> bytes:
        candidates = [self.own_dir / "comm.bin"]
        if source_physical is not None:
            candidates.append(self.guest_dir_at(source_physical) / "comm.bin")
        for path in candidates:
            try:
                logical, payload = decode_blob(path.read_bytes())
            except (OSError, CorruptCheckpoint):
                continue
            if logical == self.logical:
                if path != candidates[0]:
                    atomic_write(candidates[0], path.read_bytes())
                return payload
        raise CheckpointUnavailable(f"no communication checkpoint for logical rank {self.logical}")

    def replicate_to_neighbor(self, path: Path, neighbors: Optional[NeighborMap] = None) -> CommResult:
        """Copy one local file into the guest area of the neighbor's store."""
        neighbors = neighbors or self.neighbors
        if neighbors.size < 2:
            return CommResult.SUCCESS
        target = neighbors.physical_neighbor(self.logical)
        path = Path(path)
        data = path.read_bytes()
        if path.name != "comm.bin":
            load_record(path)  # refuse to replicate a damaged local file
        if self.ep.ping(target) is not CommResult.SUCCESS:
            self.failed_copies.append((path.name, target))
            return CommResult.ERROR
        dest_dir = self.guest_dir_at(target)
        dest_dir.mkdir(parents=True, exist_ok=True)
        tmp = dest_dir / f".{path.name}.part-{self.ep.rank}"
        tmp.write_bytes(data)
        self.ep.charge(len(data) * self.copy_cost_per_byte)
        # the transfer only counts once the receiving side is confirmed alive at the end
        if self.ep.ping(target) is not CommResult.SUCCESS:
            tmp.unlink(missing_ok=True)
            self.failed_copies.append((path.name, target))
            return CommResult.ERROR
        os.replace(tmp, dest_dir / path.name)
        if path.name != "comm.bin":
            prune(dest_dir)
            prune(self.own_dir)
            self.replicated.append((path.name, target))
            self._maybe_durable(path, data)
        return CommResult.SUCCESS

    def _maybe_durable(self, path: Path, data: bytes) -> None:
        durable = self.layout.durable(self.logical)
        if durable is None or self.durable_every <= 0:
            return
        m = _CP_NAME.match(path.name)
        if m is None:
            return
        if len(self.replicated) % self.durable_every == 0:
            atomic_write(durable / path.name, data)

    def refresh_neighbors(self, rank_map, logical: Optional[int] = None) -> NeighborMap:
        """Recompute the ring for a new rank map and re-replicate retained generations."""
        if logical is not None:
            self.logical = logical
        old = self.neighbors
        self.neighbors = neighbor_map_for(rank_map)
        if old.physical_neighbor(self.logical) != self.neighbors.physical_neighbor(self.logical) or \
                self.failed_copies:
            self.failed_copies.clear()
            self._signal("all", self.own_dir)
        return self.neighbors

    # -- restart -----------------------------------------------------------

    def reachable_generations(self, previous: Optional[NeighborMap] = None) -> list:
        """Generations of this logical rank that have a valid copy somewhere reachable."""
        gens = set(valid_generations(self.own_dir, self.logical))
        for nmap in filter(None, (previous, self.neighbors)):
            if nmap.size >= 2:
                gens |= set(valid_generations(self.guest_dir_at(nmap.physical_neighbor(self.logical)),
                                              self.logical))
        durable = self.layout.durable(self.logical)
        if durable is not None:
            gens |= set(valid_generations(durable, self.logical))
        return sorted(gens)

    def agree_restart_iteration(self, exchange, previous: Optional[NeighborMap] = None) -> int:
        """Exchange reachable generations with all workers and pick the common newest."""
        mine = self.reachable_generations(previous)[-4:]
        payload = struct.pack(f"<{len(mine)}Q", *mine)
        gathered = exchange.allgather(payload)
        per_rank = [struct.unpack(f"<{len(b) // 8}Q", b) for b in gathered]
        return select_restart_iteration(per_rank)

    def read_checkpoint(self, iteration: int, previous: Optional[NeighborMap] = None) -> CheckpointRecord:
        """Load generation ``iteration`` preferring the local copy; fetched copies are persisted."""
        candidates = [self.own_dir]
        for nmap in filter(None, (previous, self.neighbors)):
            if nmap.size >= 2:
                candidates.append(self.guest_dir_at(nmap.physical_neighbor(self.logical)))
        durable = self.layout.durable(self.logical)
        if durable is not None:
            candidates.append(durable)
        for i, directory in enumerate(candidates):
            path = directory / cp_name(iteration)
            try:
                data = path.read_bytes()
                record = CheckpointRecord.from_bytes(data)
            except (OSError, CorruptCheckpoint):
                continue
            if record.logical_rank != self.logical or record.iteration != iteration:
                continue
            if i > 0:
                self.ep.charge(len(data) * self.copy_cost_per_byte)
                atomic_write(self.own_dir / cp_name(iteration), data)
                self.emit("checkpoint_fetched", iteration=iteration, source=str(directory))
            return record
        raise CheckpointUnavailable(
            f"no valid copy of generation {iteration} for logical rank {self.logical}")
