"""Plain three-term Lanczos recurrence on a row-distributed vector."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..checkpoint import CheckpointRecord
from .comm import local_dot

BREAKDOWN_TOL = 1e-12


@dataclass
class LanczosState:
    """After ``j`` steps: ``v_prev`` is v_j, ``v_curr`` is v_{j+1}.

    ``betas`` holds beta_1..beta_{j+1} with beta_1 = 0, so the next step uses
    ``betas[-1]`` as the coupling to ``v_prev``.
    """

    j: int
    v_prev: np.ndarray
    v_curr: np.ndarray
    alphas: list = field(default_factory=list)
    betas: list = field(default_factory=lambda: [0.0])
    eigen_estimates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    breakdown: bool = False

    def to_record(self, logical: int) -> CheckpointRecord:
        return CheckpointRecord(logical, self.j, self.v_prev, self.v_curr, np.array(self.alphas),
                                np.array(self.betas), np.asarray(self.eigen_estimates))

    @classmethod
    def from_record(cls, rec: CheckpointRecord) -> "LanczosState":
        return cls(rec.iteration, rec.v_prev.copy(), rec.v_curr.copy(), [float(a) for a in rec.alphas],
                   [float(b) for b in rec.betas], rec.eigen_snapshot.copy())


def start_vector(n_global: int, seed: int) -> np.ndarray:
    """Normalized random start vector; identical for every partitioning."""
    v = np.random.default_rng(seed).uniform(-1.0, 1.0, n_global)
    return v / math.sqrt(tree_norm_sq(v))


def tree_norm_sq(v: np.ndarray) -> float:
    return local_dot(v, v)


def initial_state(v1_local: np.ndarray) -> LanczosState:
    v1_local = np.asarray(v1_local, dtype=float)
    return LanczosState(0, np.zeros_like(v1_local), v1_local.copy())


def lanczos_step(state: LanczosState, matvec: Callable[[np.ndarray], np.ndarray],
                 reduce_sum: Callable[[float], float], breakdown_tol: float = BREAKDOWN_TOL) -> LanczosState:
    """Advance ``state`` by one iteration in place and return it.

    ``reduce_sum`` turns a local partial sum into the global sum.
    """
    v = state.v_curr
    beta_j = state.betas[-1]
    w = matvec(v)
    alpha = reduce_sum(local_dot(w, v))
    w = w - alpha * v - beta_j * state.v_prev
    beta_next = math.sqrt(max(0.0, reduce_sum(local_dot(w, w))))
    state.alphas.append(alpha)
    state.betas.append(beta_next)
    state.j += 1
    state.v_prev = v
    scale = abs(alpha) + beta_j
    if beta_next <= breakdown_tol * (scale if scale > 0 else 1.0):
        state.v_curr = np.zeros_like(v)
        state.breakdown = True
    else:
        state.v_curr = w / beta_next
    return state
