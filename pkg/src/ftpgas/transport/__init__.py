"""Emulated PGAS communication substrate (segments, one-sided writes, ping, kill, groups)."""

from .base import (
    DEFAULT_TIMEOUT_MS,
    CommResult,
    DuplicateSegmentError,
    Endpoint,
    FrameKind,
    Group,
    RankKilled,
    RankState,
    Segment,
    StateVector,
    TransportError,
    frame_record,
    parse_record,
)
from .collectives import Exchange, NullGuard, pairwise_sum, put, wait_for
from .sim import SimEndpoint, SimKernel, SimNetwork
from .tcp import TcpEndpoint, find_free_base_port

__all__ = [
    "DEFAULT_TIMEOUT_MS",
    "CommResult",
    "DuplicateSegmentError",
    "Endpoint",
    "Exchange",
    "FrameKind",
    "Group",
    "NullGuard",
    "RankKilled",
    "RankState",
    "Segment",
    "SimEndpoint",
    "SimKernel",
    "SimNetwork",
    "StateVector",
    "TcpEndpoint",
    "TransportError",
    "find_free_base_port",
    "frame_record",
    "pairwise_sum",
    "parse_record",
    "put",
    "wait_for",
]
