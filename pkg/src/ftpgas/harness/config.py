"""Scenario and fault-injection configuration."""

from __future__ import annotations

import enum
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from ..solver.driver import SolverConfig
from ..solver.matrix import StencilParams


class ScenarioKind(enum.Enum):
    BASELINE_NO_HC_NO_CP = "BASELINE_NO_HC_NO_CP"
    CP_ONLY = "CP_ONLY"
    HC_CP = "HC_CP"
    FAIL_K_SEQ = "FAIL_K_SEQ"
    FAIL_K_SIM = "FAIL_K_SIM"


class KillMethod(enum.Enum):
    EXIT = "EXIT"
    SIGKILL = "SIGKILL"
    LINK_DROP = "LINK_DROP"


@dataclass(frozen=True)
class KillSpec:
    """One injected failure.

    ``target`` is a logical worker id or None for a random worker. Exactly one
    of ``at_iteration`` / ``at_time`` is set, unless ``random_time`` asks for
    a uniformly drawn instant inside the run's random window.
    """

    target: Optional[int]
    method: KillMethod
    at_iteration: Optional[int] = None
    at_time: Optional[float] = None
    random_time: bool = False

    def __post_init__(self):
        given = (self.at_iteration is not None) + (self.at_time is not None) + bool(self.random_time)
        if given != 1:
            raise ValueError("a kill needs exactly one of iteration, time or random instant")
        if self.method is KillMethod.EXIT and self.at_iteration is None:
            raise ValueError("EXIT kills happen at an iteration boundary")
        if self.method is not KillMethod.EXIT and self.at_iteration is not None:
            raise ValueError("only EXIT kills are triggered by iteration")

    @classmethod
    def parse(cls, text: str) -> "KillSpec":
        """Parse ``<target>@<when>:<method>``.

        ``target`` is a logical id or ``random``; ``when`` is an iteration
        number, a time such as ``t1.5`` or ``1.5s``, or ``random``.
        """
        m = re.fullmatch(r"\s*(\w+)\s*@\s*([\w.]+)\s*:\s*(\w+)\s*", text)
        if m is None:
            raise ValueError(f"cannot parse kill spec {text!r}")
        who, when, how = m.groups()
        target = None if who.lower() == "random" else int(who)
        method = KillMethod(how.upper())
        if when.lower() == "random":
            return cls(target, method, random_time=True)
        tm = re.fullmatch(r"t?([0-9.]+)s?", when)
        if when.startswith("t") or when.endswith("s"):
            if tm is None:
                raise ValueError(f"bad time in kill spec {text!r}")
            return cls(target, method, at_time=float(tm.group(1)))
        return cls(target, method, at_iteration=int(when))

    def __str__(self) -> str:
        who = "random" if self.target is None else str(self.target)
        if self.at_iteration is not None:
            when = str(self.at_iteration)
        elif self.at_time is not None:
            when = f"t{self.at_time:g}"
        else:
            when = "random"
        return f"{who}@{when}:{self.method.value}"


@dataclass
class TimingParams:
    scan_period_s: float = 0.5
    timeout_ms: int = 250
    parallelism: int = 8
    random_window: tuple = (0.5, 1.5)
    # simulated network and compute cost model
    sim_latency_s: float = 20e-6
    sim_bandwidth: float = 1e9
    sim_iteration_time: float = 0.01
    sim_write_cost_per_byte: float = 1e-9
    sim_copy_cost_per_byte: float = 2e-9
    max_virtual_s: float = 3600.0
    max_wall_s: float = 600.0


@dataclass
class ScenarioConfig:
    n_workers: int = 8
    n_spares: int = 2
    scenario: ScenarioKind = ScenarioKind.HC_CP
    k: int = 0
    kills: tuple = ()
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    timing: TimingParams = field(default_factory=TimingParams)
    mode: str = "sim"
    store_root: Optional[str] = None
    durable_root: Optional[str] = None
    durable_every: int = 0
    fd_may_join: bool = False

    def __post_init__(self):
        if self.n_workers < 1:
            raise ValueError("need at least one worker")
        if self.n_spares < 1:
            raise ValueError("at least one spare is required: it runs the fault detector")
        if self.mode not in ("sim", "process"):
            raise ValueError("mode must be 'sim' or 'process'")
        for kill in self.kills:
            if kill.target is not None and not 0 <= kill.target < self.n_workers:
                raise ValueError(f"kill target {kill.target} is not a worker")
            if kill.method is KillMethod.LINK_DROP and self.mode != "sim":
                raise ValueError("LINK_DROP is only available in simulation mode")
        if self.failure_scenario and len(self.kills) > self.n_spares - 1 and not self.fd_may_join:
            raise ValueError(f"{len(self.kills)} failures need at least {len(self.kills) + 1} spares")

    @property
    def n_ranks(self) -> int:
        return self.n_workers + self.n_spares

    @property
    def health_check(self) -> bool:
        return self.scenario is not ScenarioKind.BASELINE_NO_HC_NO_CP and self.scenario is not ScenarioKind.CP_ONLY

    @property
    def checkpointing(self) -> bool:
        return self.scenario is not ScenarioKind.BASELINE_NO_HC_NO_CP

    @property
    def failure_scenario(self) -> bool:
        return self.scenario in (ScenarioKind.FAIL_K_SEQ, ScenarioKind.FAIL_K_SIM)

    @property
    def name(self) -> str:
        if self.scenario is ScenarioKind.FAIL_K_SEQ:
            return f"FAIL_{self.k}" if self.k == 1 else f"FAIL_{self.k}_SEQ"
        if self.scenario is ScenarioKind.FAIL_K_SIM:
            return f"FAIL_{self.k}_SIM"
        return self.scenario.value

    def variant(self, scenario: ScenarioKind, kills: tuple = (), k: int = 0) -> "ScenarioConfig":
        """Same run parameters under another scenario (used for reference runs)."""
        return replace(self, scenario=scenario, kills=tuple(kills), k=k)

    def solver_config(self) -> SolverConfig:
        cfg = replace(self.solver, sim_iteration_time=self.timing.sim_iteration_time if self.mode == "sim" else 0.0)
        if not self.checkpointing:
            cfg = replace(cfg, cp_interval=0)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.value
        d["kills"] = [str(k) for k in self.kills]
        d["timing"]["random_window"] = list(self.timing.random_window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        solver = dict(d.pop("solver"))
        solver["stencil"] = StencilParams(**solver["stencil"])
        timing = dict(d.pop("timing"))
        timing["random_window"] = tuple(timing["random_window"])
        return cls(scenario=ScenarioKind(d.pop("scenario")), kills=tuple(KillSpec.parse(k) for k in d.pop("kills")),
                   solver=SolverConfig(**solver), timing=TimingParams(**timing), **d)


def default_kills(kind: ScenarioKind, k: int, n_workers: int, max_iterations: int, cp_interval: int,
                  method: KillMethod = KillMethod.EXIT) -> tuple:
    """Deterministic kill schedule for the FAIL scenario families.

    Sequential failures hit different workers at iterations spread over the
    run, each a fixed offset past a checkpoint. Simultaneous failures hit
    workers that are not ring neighbors at one iteration.
    """
    if k < 1:
        raise ValueError("failure scenarios need k >= 1")
    cp = max(1, cp_interval)
    offset = 20 if cp > 20 else cp // 2
    targets = [(1 + 2 * i) % n_workers for i in range(k)]
    if len(set(targets)) < k:
        raise ValueError(f"cannot place {k} failures on {n_workers} workers")
    if kind is ScenarioKind.FAIL_K_SIM:
        if 2 * k > n_workers and n_workers > 1:
            raise ValueError("simultaneous failures of ring neighbors would lose both checkpoint copies")
        it = cp * max(1, round(max_iterations / 2 / cp)) - cp + offset
        return tuple(KillSpec(t, method, at_iteration=it) for t in targets)
    spacing = cp * max(1, round(max_iterations / (k + 1) / cp))
    return tuple(KillSpec(t, method, at_iteration=spacing * (i + 1) - cp + offset) for i, t in enumerate(targets))


_SCENARIO_NAME = re.compile(r"FAIL_(\d+)(?:_(SEQ|SIM))?")


def parse_scenario(name: str) -> tuple:
    """Map a scenario name to ``(kind, k)``; ``FAIL_2`` means two sequential failures."""
    key = name.strip().upper()
    aliases = {"BASELINE": "BASELINE_NO_HC_NO_CP"}
    key = aliases.get(key, key)
    try:
        return ScenarioKind(key), 0
    except ValueError:
        pass
    m = _SCENARIO_NAME.fullmatch(key)
    if m is None:
        raise ValueError(f"unknown scenario {name!r}")
    k = int(m.group(1))
    kind = ScenarioKind.FAIL_K_SIM if m.group(2) == "SIM" else ScenarioKind.FAIL_K_SEQ
    return kind, k
