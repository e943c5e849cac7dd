from __future__ import annotations

import csv
import math
from dataclasses import replace

import pytest

from ftpgas.cli import main
from ftpgas.detector import Layout, ProcStatus
from ftpgas.harness.bench import fit_through_origin
from ftpgas.harness.config import (
    KillMethod,
    KillSpec,
    ScenarioConfig,
    ScenarioKind,
    TimingParams,
    default_kills,
    parse_scenario,
)
from ftpgas.harness.launcher import launch
from ftpgas.harness.metrics import emit_metrics, load_metrics, report_row
from ftpgas.harness.scenario import run_references, run_scenario
from ftpgas.solver.driver import SolverConfig
from ftpgas.solver.matrix import StencilParams

ITERATIONS = 300
CP = 50


def small_config(kind=ScenarioKind.HC_CP, k=0, kills=None, workers=4, spares=2, seed=0, mode="sim", nx=32,
                 **timing) -> ScenarioConfig:
    solver = SolverConfig(n_global=nx * nx, stencil=StencilParams.grid(nx), max_iterations=ITERATIONS,
                          cp_interval=CP, eig_interval=50, seed=seed)
    if kills is None:
        kills = default_kills(kind, k, workers, ITERATIONS, CP) if k else ()
    return ScenarioConfig(n_workers=workers, n_spares=spares, scenario=kind, k=k, kills=tuple(kills), seed=seed,
                          solver=solver, timing=replace(TimingParams(), **timing), mode=mode)


@pytest.fixture(scope="module")
def fail1():
    cfg = small_config(ScenarioKind.FAIL_K_SEQ, 1)
    refs = run_references(cfg)
    return cfg, refs, run_scenario(cfg, reference_runs=refs)


# -- configuration ------------------------------------------------------------------


@pytest.mark.parametrize("text", ["1@120:EXIT", "3@t1.5:SIGKILL", "random@random:SIGKILL", "0@t0.25:LINK_DROP"])
def test_kill_spec_round_trip(text):
    assert str(KillSpec.parse(text)) == text
    assert KillSpec.parse(str(KillSpec.parse(text))) == KillSpec.parse(text)


def test_kill_spec_forms():
    assert KillSpec.parse("2@1.5s:SIGKILL").at_time == 1.5
    assert KillSpec.parse("random@40:exit") == KillSpec(None, KillMethod.EXIT, at_iteration=40)
    for bad in ("1@t1:EXIT", "x:EXIT", "1@120:SHOOT", "1@40:SIGKILL"):
        with pytest.raises(ValueError):
            KillSpec.parse(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(spares=0)
    with pytest.raises(ValueError):
        small_config(ScenarioKind.FAIL_K_SEQ, 2, spares=2)
    with pytest.raises(ValueError):
        small_config(ScenarioKind.FAIL_K_SEQ, 1, kills=[KillSpec.parse("4@100:EXIT")])
    with pytest.raises(ValueError):
        small_config(ScenarioKind.FAIL_K_SEQ, 1, kills=[KillSpec.parse("1@t1:LINK_DROP")], mode="process")
    small_config(ScenarioKind.FAIL_K_SEQ, 1, kills=[KillSpec.parse("1@t1:LINK_DROP")])


def test_config_dict_round_trip():
    cfg = small_config(ScenarioKind.FAIL_K_SIM, 2, spares=3)
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


def test_scenario_names():
    assert parse_scenario("baseline") == (ScenarioKind.BASELINE_NO_HC_NO_CP, 0)
    assert parse_scenario("HC_CP") == (ScenarioKind.HC_CP, 0)
    assert parse_scenario("FAIL_1") == (ScenarioKind.FAIL_K_SEQ, 1)
    assert parse_scenario("FAIL_3_SEQ") == (ScenarioKind.FAIL_K_SEQ, 3)
    assert parse_scenario("fail_3_sim") == (ScenarioKind.FAIL_K_SIM, 3)
    with pytest.raises(ValueError):
        parse_scenario("FAIL")
    assert small_config(ScenarioKind.FAIL_K_SEQ, 1).name == "FAIL_1"
    assert small_config(ScenarioKind.FAIL_K_SEQ, 2, spares=3).name == "FAIL_2_SEQ"


def test_default_kill_schedules():
    one = default_kills(ScenarioKind.FAIL_K_SEQ, 1, 8, 300, 50)
    assert [str(k) for k in one] == ["1@120:EXIT"]
    seq = default_kills(ScenarioKind.FAIL_K_SEQ, 3, 8, 300, 50)
    its = [k.at_iteration for k in seq]
    assert its == sorted(its) and len({k.target for k in seq}) == 3
    assert all(it % 50 == 20 for it in its)
    sim = default_kills(ScenarioKind.FAIL_K_SIM, 3, 8, 300, 50)
    assert len({k.at_iteration for k in sim}) == 1
    targets = sorted(k.target for k in sim)
    assert all((b - a) % 8 not in (1, 7) for a in targets for b in targets if a != b)
    with pytest.raises(ValueError):
        default_kills(ScenarioKind.FAIL_K_SIM, 3, 4, 300, 50)


def test_status_table_of_a_layout():
    cfg = small_config()
    table = launch(replace(cfg, solver=replace(cfg.solver, max_iterations=1))).status_table()
    assert table.as_tuple() == (ProcStatus.WORKING,) * 4 + (ProcStatus.FD, ProcStatus.IDLE)
    assert Layout(4, 2).fd_rank == 4


def test_fit_through_origin():
    assert fit_through_origin([1, 2, 4], [3, 6, 12]) == pytest.approx(3.0)
    with pytest.raises(ValueError):
        fit_through_origin([0], [1])


# -- runs ---------------------------------------------------------------------------------


def test_failure_free_run_roles_and_report():
    run = launch(small_config())
    roles = {e["rank"]: e["role"] for e in run.of_kind("role")}
    assert roles == {0: "WORKING", 1: "WORKING", 2: "WORKING", 3: "WORKING", 4: "FD", 5: "IDLE"}
    assert len(run.of_kind("solve_end")) == 4 and not run.of_kind("notice_accept")


def test_single_failure_recovers_bitwise(fail1):
    cfg, refs, report = fail1
    assert report.completed and report.integrity is True
    assert len(report.failures) == 1 and report.notices == 1
    f = report.failures[0]
    assert f.failed == (1,) and f.fail_iteration == 120 and f.restart_iteration == 100
    assert f.redo_iterations == 120 % CP
    assert 0 < f.oh_f1 <= 2 * cfg.timing.scan_period_s + cfg.timing.timeout_ms / 1000 + 0.05
    assert f.oh_f2 >= 0 and f.oh_f3 >= 0
    assert math.isclose(f.redo_work, 20 * report.iteration_time)


def test_overhead_accounting_is_complete(fail1):
    _, _, report = fail1
    assert report.t_baseline_ref is not None and report.oh_cp is not None and report.oh_hc is not None
    assert report.accounting_holds()
    assert report.t_total >= report.t_baseline_ref


def test_simulation_is_deterministic(fail1):
    cfg, refs, report = fail1
    again = run_scenario(cfg, reference_runs=refs)
    assert report_row(again) == report_row(report)
    assert [(e["t"], e["rank"], e["kind"]) for e in again.runs["scenario"].events] == \
        [(e["t"], e["rank"], e["kind"]) for e in report.runs["scenario"].events]


def test_rebuild_agreement_and_kill_audit(fail1):
    _, _, report = fail1
    run = report.runs["scenario"]
    reinit = run.of_kind("reinit_start")
    assert {e["rank"] for e in reinit} == {0, 2, 3, 5}
    assert len({(tuple(e["rank_map"]), e["version"], tuple(e["members"])) for e in reinit}) == 1
    assert reinit[0]["rank_map"] == [0, 5, 2, 3]
    for rank in (0, 2, 3, 5):
        assert 1 in {e["target"] for e in run.of_kind("proc_kill") if e["rank"] == rank}


def test_link_drop_is_recovered():
    cfg = small_config(ScenarioKind.FAIL_K_SEQ, 1, kills=[KillSpec.parse("2@t1.3:LINK_DROP")])
    report = run_scenario(cfg, references=False)
    assert report.completed and report.consistent and len(report.failures) == 1
    assert report.failures[0].failed == (2,)


def test_random_sigkill_in_simulation(fail1):
    _, refs, _ = fail1
    cfg = small_config(ScenarioKind.FAIL_K_SEQ, 1, kills=[KillSpec.parse("random@random:SIGKILL")])
    report = run_scenario(cfg, reference_runs=refs)
    assert report.completed and report.integrity is True
    f = report.failures[0]
    assert f.restart_iteration % CP == 0 and f.fail_iteration >= f.restart_iteration


def test_overhead_per_failure_adds_up():
    totals = {}
    for k in (1, 2, 3):
        cfg = small_config(ScenarioKind.FAIL_K_SEQ, k, workers=8, spares=4)
        report = run_scenario(cfg, references=False)
        assert report.completed and report.consistent and len(report.failures) == k
        totals[k] = report.t_total
    ratio = (totals[3] - totals[1]) / (totals[2] - totals[1])
    assert abs(ratio - 2) <= 0.25 * 2


# -- metrics file ------------------------------------------------------------------------


def test_metrics_csv_round_trip(tmp_path, fail1):
    _, refs, report = fail1
    path = tmp_path / "metrics.csv"
    clean = run_scenario(small_config(), reference_runs=refs)
    emit_metrics(report, path)
    emit_metrics(clean, path)
    with open(path, newline="") as fh:
        lines = list(csv.reader(fh))
    assert len(lines) == 3 and lines[0][0] == "scenario"
    rows = load_metrics(path)
    assert rows[0]["scenario"] == "FAIL_1" and rows[0]["kills"] == ["1@120:EXIT"]
    assert rows[0]["t_total"] == report.t_total and rows[0]["oh_f1"] == [report.failures[0].oh_f1]
    assert rows[0]["fail_iteration"] == [120] and rows[0]["integrity"] is True
    assert rows[1]["n_failures"] == 0 and rows[1]["oh_f1"] == [] and rows[1]["kills"] == []


# -- command line -----------------------------------------------------------------------


def test_cli_run_writes_metrics(tmp_path, capsys):
    out = tmp_path / "m.csv"
    rc = main(["run", "--scenario", "FAIL_1", "--workers", "4", "--spares", "2", "--grid", "16",
               "--iterations", "100", "--cp-interval", "25", "--eig-interval", "25", "--out", str(out)])
    text = capsys.readouterr().out
    assert rc == 0 and "bitwise identical" in text
    rows = load_metrics(out)
    assert len(rows) == 1 and rows[0]["integrity"] is True and rows[0]["n_failures"] == 1


def test_cli_rejects_bad_arguments(capsys):
    assert main(["run", "--scenario", "FAIL_2", "--spares", "2", "--no-references"]) == 2
    assert "spares" in capsys.readouterr().err


@pytest.mark.process
def test_process_mode_single_failure():
    cfg = small_config(ScenarioKind.FAIL_K_SEQ, 1, nx=16, mode="process")
    report = run_scenario(cfg, references=False)
    assert report.completed and report.consistent
    assert len(report.failures) == 1 and report.failures[0].redo_iterations == 20
    run = report.runs["scenario"]
    assert run.of_kind("inject")[0]["physical"] == 1
