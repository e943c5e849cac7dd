"""On-the-fly generation of a row-partitioned symmetric stencil matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StencilParams:
    """Nearest-neighbor operator on a chain (``dim=1``) or an ``nx``-wide grid (``dim=2``).

    Row ``i`` carries ``diag + disorder * u_i`` on the diagonal, where ``u`` is
    drawn uniformly from [-0.5, 0.5) by a generator seeded with ``seed``, and
    ``coupling`` towards each existing grid neighbor (open boundaries).
    """

    nx: int = 0
    dim: int = 2
    diag: float = 4.0
    coupling: float = -1.0
    disorder: float = 0.0
    seed: int = 0

    @classmethod
    def grid(cls, nx: int, **kw) -> "StencilParams":
        return cls(nx=nx, dim=2, **kw)

    @classmethod
    def chain(cls, **kw) -> "StencilParams":
        kw.setdefault("diag", 2.0)
        return cls(nx=0, dim=1, **kw)

    def offsets(self, n_global: int) -> tuple:
        if self.dim == 1:
            return (-1, 0, 1)
        if self.dim == 2:
            if self.nx <= 0 or n_global % self.nx:
                raise ValueError(f"grid width {self.nx} does not divide n={n_global}")
            return (-self.nx, -1, 0, 1, self.nx)
        raise ValueError("dim must be 1 or 2")


def block_range(n_global: int, n_parts: int, part: int) -> tuple:
    """Contiguous row block of ``part``; block sizes differ by at most one."""
    if n_parts < 1 or not 0 <= part < n_parts:
        raise ValueError("invalid partition index")
    if n_global < n_parts:
        raise ValueError("fewer rows than partitions")
    base, extra = divmod(n_global, n_parts)
    r0 = part * base + min(part, extra)
    return r0, r0 + base + (1 if part < extra else 0)


def owner_of(n_global: int, n_parts: int, index: np.ndarray) -> np.ndarray:
    base, extra = divmod(n_global, n_parts)
    index = np.asarray(index)
    cut = extra * (base + 1)
    return np.where(index < cut, index // (base + 1), extra + (index - cut) // max(base, 1))


def diagonal_values(n_global: int, params: StencilParams) -> np.ndarray:
    d = np.full(n_global, float(params.diag))
    if params.disorder:
        d += params.disorder * np.random.default_rng(params.seed).uniform(-0.5, 0.5, n_global)
    return d


@dataclass
class SparseMatrixPart:
    logical_rank: int
    row_range: tuple
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    n_global: int

    @property
    def n_local(self) -> int:
        return self.row_range[1] - self.row_range[0]

    @property
    def nnz(self) -> int:
        return len(self.values)

    def to_scipy(self):
        import scipy.sparse as sp

        return sp.csr_matrix((self.values, self.col_idx, self.row_ptr), shape=(self.n_local, self.n_global))


def generate_matrix(n_global: int, params: StencilParams, logical_rank: int, n_parts: int) -> SparseMatrixPart:
    """Rows ``block_range(n_global, n_parts, logical_rank)`` of the stencil operator.

    Columns are sorted ascending within each row. Values depend only on the
    global row and column, never on the partitioning.
    """
    if n_global < 1:
        raise ValueError("matrix must have at least one row")
    offsets = params.offsets(n_global)
    r0, r1 = block_range(n_global, n_parts, logical_rank)
    rows = np.arange(r0, r1)
    diag = diagonal_values(n_global, params)[r0:r1]
    cols = np.empty((len(rows), len(offsets)), dtype=np.int64)
    vals = np.empty((len(rows), len(offsets)))
    mask = np.empty((len(rows), len(offsets)), dtype=bool)
    for k, off in enumerate(offsets):
        c = rows + off
        ok = (c >= 0) & (c < n_global)
        if params.dim == 2 and abs(off) == 1:
            ok &= (c // params.nx) == (rows // params.nx)
        cols[:, k] = c
        vals[:, k] = diag if off == 0 else params.coupling
        mask[:, k] = ok
    counts = mask.sum(axis=1)
    row_ptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    return SparseMatrixPart(logical_rank, (r0, r1), row_ptr, cols[mask], vals[mask], n_global)
