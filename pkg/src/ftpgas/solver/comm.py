"""Communication preprocessing and halo-exchange sparse matrix-vector product.

Before the first product every rank works out which remote vector entries
its rows touch, tells the owners, and learns in return which of its own
entries it must push. Halo values travel as one-sided writes into a
per-source slot of the receiver's halo segment, tagged with the recovery
epoch and the product counter so stale data is never mistaken for fresh.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..transport import Endpoint, Exchange, NullGuard, frame_record, parse_record, put, wait_for
from ..transport.base import RECORD_OVERHEAD
from .matrix import SparseMatrixPart, owner_of

HALO_SEGMENT = 3


def tree_sum(x: np.ndarray) -> float:
    """Sum by repeated adjacent pairing; the order depends only on the length."""
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return 0.0
    while len(x) > 1:
        if len(x) % 2:
            x = np.append(x, 0.0)
        x = x[0::2] + x[1::2]
    return float(x[0])


def local_dot(a: np.ndarray, b: np.ndarray) -> float:
    return tree_sum(np.multiply(a, b))


@dataclass
class CommPlan:
    logical_rank: int
    n_parts: int
    row_range: tuple
    recv: dict
    send: dict
    halo_offset: dict
    remote_offset: dict

    @property
    def halo_bytes(self) -> int:
        return halo_bytes_for(self.recv)

    @property
    def partners(self) -> list:
        return sorted(set(self.recv) | set(self.send))

    def to_bytes(self) -> bytes:
        doc = {
            "logical_rank": self.logical_rank,
            "n_parts": self.n_parts,
            "row_range": list(self.row_range),
            "recv": {str(k): v.tolist() for k, v in sorted(self.recv.items())},
            "send": {str(k): v.tolist() for k, v in sorted(self.send.items())},
            "halo_offset": {str(k): v for k, v in sorted(self.halo_offset.items())},
            "remote_offset": {str(k): v for k, v in sorted(self.remote_offset.items())},
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CommPlan":
        doc = json.loads(data.decode())

        def arrays(d):
            return {int(k): np.asarray(v, dtype=np.int64) for k, v in d.items()}

        return cls(doc["logical_rank"], doc["n_parts"], tuple(doc["row_range"]), arrays(doc["recv"]),
                   arrays(doc["send"]), {int(k): v for k, v in doc["halo_offset"].items()},
                   {int(k): v for k, v in doc["remote_offset"].items()})


def slot_bytes(n_values: int) -> int:
    return RECORD_OVERHEAD + 8 * n_values


def compute_recv_lists(part: SparseMatrixPart, n_parts: int) -> dict:
    """Remote column indices of the local block grouped by owning logical rank."""
    r0, r1 = part.row_range
    remote = np.unique(part.col_idx[(part.col_idx < r0) | (part.col_idx >= r1)])
    owners = owner_of(part.n_global, n_parts, remote)
    return {int(o): remote[owners == o] for o in np.unique(owners)}


def halo_layout(recv: dict) -> dict:
    offsets, pos = {}, 0
    for src in sorted(recv):
        offsets[src] = pos
        pos += slot_bytes(len(recv[src]))
    return offsets


def _pack_request(indices: np.ndarray, offset: int) -> bytes:
    return struct.pack("<QQ", offset, len(indices)) + np.asarray(indices, dtype="<u8").tobytes()


def _unpack_request(blob: bytes) -> tuple:
    if not blob:
        return None, np.zeros(0, dtype=np.int64)
    offset, count = struct.unpack_from("<QQ", blob)
    return offset, np.frombuffer(blob, dtype="<u8", count=count, offset=16).astype(np.int64)


def preprocess_comm(part: SparseMatrixPart, exchange: Optional[Exchange], n_parts: int) -> CommPlan:
    """Build the plan; the recv lists are sent to their owners with one all-to-all."""
    recv = compute_recv_lists(part, n_parts)
    halo_offset = halo_layout(recv)
    send, remote_offset = {}, {}
    if n_parts > 1:
        payloads = [_pack_request(recv[dst], halo_offset[dst]) if dst in recv else b""
                    for dst in range(n_parts)]
        for src, blob in enumerate(exchange.alltoallv(payloads)):
            offset, indices = _unpack_request(blob)
            if offset is not None and len(indices):
                send[src] = indices
                remote_offset[src] = offset
    return CommPlan(part.logical_rank, n_parts, tuple(part.row_range), recv, send, halo_offset, remote_offset)


def halo_bytes_for(recv: dict) -> int:
    return sum(slot_bytes(len(v)) for v in recv.values())


def ensure_halo_segment(ep: Endpoint, nbytes: int, segment_id: int = HALO_SEGMENT) -> None:
    """Register the halo segment once; it must exist before peers learn our offsets."""
    size = max(8, nbytes)
    if ep.has_segment(segment_id):
        if ep.segment_size(segment_id) < size:
            raise ValueError("existing halo segment too small for the plan")
        return
    ep.register_segment(segment_id, size)


class LocalOperator:
    """Local block in padded row-major form over ``[x_local | halo]``.

    Row sums are accumulated entry by entry in ascending column order starting
    from 0.0, which reproduces a plain sequential CSR product bit for bit.
    """

    def __init__(self, part: SparseMatrixPart, plan: CommPlan):
        r0, r1 = part.row_range
        n_local = r1 - r0
        self.n_local = n_local
        halo_cols = np.concatenate([plan.recv[s] for s in sorted(plan.recv)]) if plan.recv else \
            np.zeros(0, dtype=np.int64)
        self.halo_sizes = [(s, len(plan.recv[s])) for s in sorted(plan.recv)]
        counts = np.diff(part.row_ptr)
        width = int(counts.max()) if n_local else 0
        self.width = width
        src = np.zeros((n_local, width), dtype=np.int64)
        val = np.zeros((n_local, width))
        filled = np.zeros((n_local, width), dtype=bool)
        rows = np.repeat(np.arange(n_local), counts)
        slot = np.arange(part.nnz) - np.repeat(part.row_ptr[:-1], counts)
        cols = part.col_idx
        local = (cols >= r0) & (cols < r1)
        pos = np.where(local, cols - r0, 0)
        if len(halo_cols):
            pos = np.where(local, pos, n_local + np.searchsorted(halo_cols, cols))
        src[rows, slot] = pos
        val[rows, slot] = part.values
        filled[rows, slot] = True
        self.val = val
        self.local_mask = filled & (src < n_local)
        self.remote_mask = filled & (src >= n_local)
        self.local_src = src[self.local_mask]
        self.remote_src = src[self.remote_mask] - n_local

    def products(self, x_local: np.ndarray, halo: Optional[np.ndarray]) -> np.ndarray:
        prod = np.zeros_like(self.val)
        self.fill_local(prod, x_local)
        self.fill_remote(prod, halo)
        return prod

    def fill_local(self, prod: np.ndarray, x_local: np.ndarray) -> None:
        prod[self.local_mask] = self.val[self.local_mask] * x_local[self.local_src]

    def fill_remote(self, prod: np.ndarray, halo: Optional[np.ndarray]) -> None:
        if len(self.remote_src):
            prod[self.remote_mask] = self.val[self.remote_mask] * halo[self.remote_src]

    @staticmethod
    def row_sums(prod: np.ndarray) -> np.ndarray:
        acc = np.zeros(prod.shape[0])
        for k in range(prod.shape[1]):
            acc = acc + prod[:, k]
        return acc


class HaloExchanger:
    """Pushes owned entries to consumers and collects tagged halo slots."""

    def __init__(self, ep: Endpoint, plan: CommPlan, resolve, guard=None, segment_id: int = HALO_SEGMENT):
        self.ep = ep
        self.plan = plan
        self.resolve = resolve
        self.guard = guard or NullGuard()
        self.segment_id = segment_id
        self.epoch = 0

    def push(self, x_local: np.ndarray, counter: int) -> None:
        tag = (self.epoch << 32) | counter
        r0 = self.plan.row_range[0]
        for dst in sorted(self.plan.send):
            values = np.ascontiguousarray(x_local[self.plan.send[dst] - r0], dtype="<f8")
            put(self.ep, self.resolve(dst), self.segment_id, self.plan.remote_offset[dst],
                frame_record(tag, values.tobytes()), self.guard)

    def collect(self, counter: int) -> np.ndarray:
        tag = (self.epoch << 32) | counter
        sources = sorted(self.plan.recv)
        got: dict = {}

        def complete():
            for src in sources:
                if src in got:
                    continue
                n = len(self.plan.recv[src])
                parsed = parse_record(self.ep.read(self.segment_id, self.plan.halo_offset[src], slot_bytes(n)))
                if parsed is None or parsed[0] != tag:
                    return False
                got[src] = np.frombuffer(parsed[1], dtype="<f8")
            return True

        if sources:
            wait_for(self.ep, complete, self.guard)
            return np.concatenate([got[s] for s in sources])
        return np.zeros(0)


def spmvm(op: LocalOperator, halo: Optional[HaloExchanger], x_local: np.ndarray, counter: int = 0) -> np.ndarray:
    """``A @ x`` restricted to the local rows, overlapping local work with the halo transfer."""
    if halo is not None:
        halo.push(x_local, counter)
    prod = np.zeros_like(op.val)
    op.fill_local(prod, x_local)
    if halo is not None and len(op.remote_src):
        op.fill_remote(prod, halo.collect(counter))
    return op.row_sums(prod)
