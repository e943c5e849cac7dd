"""Run a scenario together with its failure-free reference runs."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional

from .config import ScenarioConfig, ScenarioKind
from .launcher import RunResult, launch
from .metrics import OverheadReport, build_report

log = logging.getLogger(__name__)

REFERENCE_KINDS = (ScenarioKind.BASELINE_NO_HC_NO_CP, ScenarioKind.CP_ONLY, ScenarioKind.HC_CP)


def _subdir(workdir: Optional[Path], name: str) -> Optional[Path]:
    if workdir is None:
        return None
    path = Path(workdir) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_references(cfg: ScenarioConfig, workdir: Optional[Path] = None) -> dict:
    """Baseline, checkpoint-only and checkpoint-plus-detector runs with the same seed."""
    runs = {}
    for kind in REFERENCE_KINDS:
        ref_cfg = replace(cfg.variant(kind), store_root=None, durable_root=None)
        runs[kind] = launch(ref_cfg, _subdir(workdir, kind.value))
        log.info("reference %s finished in %.2fs wall", kind.value, runs[kind].wall_s)
    return runs


def run_scenario(cfg: ScenarioConfig, references: bool = True, workdir: Optional[Path] = None,
                 reference_runs: Optional[dict] = None) -> OverheadReport:
    """Execute ``cfg`` end to end and account its overheads.

    With ``references`` the three failure-free variants run first; the
    HC_CP one is the twin whose eigenvalues the scenario must reproduce bit
    for bit. Pre-computed ``reference_runs`` (keyed by kind) are reused.
    """
    refs: dict = dict(reference_runs or {})
    if references and not all(k in refs for k in REFERENCE_KINDS):
        refs.update({k: v for k, v in run_references(cfg, workdir).items() if k not in refs})
    if cfg.scenario in refs and not cfg.kills:
        run: RunResult = refs[cfg.scenario]
    else:
        run = launch(cfg, _subdir(workdir, cfg.name))
    return build_report(run, refs.get(ScenarioKind.BASELINE_NO_HC_NO_CP), refs.get(ScenarioKind.CP_ONLY),
                        refs.get(ScenarioKind.HC_CP))
