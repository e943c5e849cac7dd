"""Distributed Lanczos eigensolver over a generated stencil matrix."""

from .comm import CommPlan, HaloExchanger, LocalOperator, local_dot, preprocess_comm, spmvm, tree_sum
from .driver import EigenReport, SolverConfig, Worker, run_solver, serial_lanczos
from .lanczos import LanczosState, initial_state, lanczos_step, start_vector
from .matrix import SparseMatrixPart, StencilParams, block_range, generate_matrix
from .ql import QLNotConverged, TridiagonalSpectrum, ql_eigenvalues

__all__ = [
    "CommPlan",
    "EigenReport",
    "HaloExchanger",
    "LanczosState",
    "LocalOperator",
    "QLNotConverged",
    "SolverConfig",
    "SparseMatrixPart",
    "StencilParams",
    "TridiagonalSpectrum",
    "Worker",
    "block_range",
    "generate_matrix",
    "initial_state",
    "lanczos_step",
    "local_dot",
    "preprocess_comm",
    "ql_eigenvalues",
    "run_solver",
    "serial_lanczos",
    "spmvm",
    "start_vector",
    "tree_sum",
]
