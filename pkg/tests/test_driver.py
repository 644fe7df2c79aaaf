"""Continuation schedule and optimization-loop contract tests."""

import os

import numpy as np
import pytest

from multitop import driver, fem
from multitop.driver import (
    CaseConfig,
    ContinuationState,
    StudyMatrix,
    continuation_step,
    run_case,
    run_study,
)
from multitop.material import TargetSet


def ramp_count(state, stage):
    """Number of continuation calls spent inside the given ramp stage."""
    count = 0
    while state.stage == stage:
        state = continuation_step(state, 1.0)
        count += 1
        assert count < 1000
    return count, state


def test_p_ramp_takes_exactly_38_multiplications():
    state = ContinuationState(stage="p-ramp")
    count, state = ramp_count(state, "p-ramp")
    assert count == 38
    assert state.p == 3.0
    assert state.stage == "beta-ramp"
    assert state.beta == 0.1


def test_beta_ramp_takes_exactly_35_multiplications():
    state = ContinuationState(stage="beta-ramp", p=3.0)
    count, state = ramp_count(state, "beta-ramp")
    assert count == 35
    assert state.beta == 50.0
    assert state.stage == "fine-tune"


def test_trigger_gates_the_warmup_stage():
    state = ContinuationState()
    unchanged = continuation_step(state, 0.5)
    assert unchanged == state
    fired = continuation_step(state, 0.5e-3)
    assert fired.stage == "p-ramp"
    assert fired.p == 1.0 and fired.beta == 0.1


def test_fine_tune_is_terminal():
    state = ContinuationState(stage="fine-tune", p=3.0, beta=50.0)
    assert continuation_step(state, 1.0) == state
    assert continuation_step(state, 1e-9) == state


def test_schedule_ordering_full_run():
    state = ContinuationState()
    seen = []
    for it in range(300):
        seen.append((state.stage, state.p, state.beta))
        drm = 0.5 if it < 5 else 1e-4
        state = continuation_step(state, drm)
    order = {s: i for i, s in enumerate(driver.STAGES)}
    ranks = [order[s] for s, _, _ in seen]
    assert ranks == sorted(ranks)
    for (s, p, b), (s2, p2, b2) in zip(seen, seen[1:]):
        assert p2 >= p and b2 >= b
        if s in ("unpenalized", "p-ramp"):
            assert b2 == 0.1
    assert state.stage == "fine-tune"


def tiny_case(**kw):
    """4x2 cantilever, 8 cells: cheap full-loop exercise."""
    cfg = CaseConfig(uniform_refines=0, base_nx=4, base_ny=2,
                     extents=(4.0, 2.0), adapt_enabled=False, **kw)
    return fem.cantilever_bvp(4.0, 2.0), cfg


def test_free_mode_stops_early_in_fine_tune():
    bvp, cfg = tiny_case()
    res = run_case(bvp, 0.4, TargetSet.free(), cfg)
    assert res.stage == "fine-tune"
    assert len(res.history) < cfg.i_max
    assert res.history[-1].delta_rho_mean <= 1e-4
    for rec in res.history:
        assert rec.stage == "fine-tune"
        assert rec.p == 1.0 and rec.beta == 0.1
        assert abs(rec.vol_frac - 0.4) <= 1e-6


def test_volume_feasible_at_every_iterate():
    bvp, cfg = tiny_case(i_max=60)
    res = run_case(bvp, 0.35, TargetSet.uniform(2), cfg)
    for rec in res.history:
        assert abs(rec.vol_frac - 0.35) <= 1e-6
    assert np.all(res.design >= 0.0) and np.all(res.design <= 1.0)


def test_history_records_are_well_formed():
    bvp, cfg = tiny_case(i_max=50)
    res = run_case(bvp, 0.4, TargetSet.uniform(1), cfg)
    its = [r.iteration for r in res.history]
    assert its == list(range(1, len(its) + 1))
    for rec in res.history:
        assert rec.stage in driver.STAGES
        assert rec.compliance > 0
        assert rec.delta_rho_mean >= 0
        assert rec.cells == 8


def test_run_case_rejects_bad_volume_fraction():
    bvp, cfg = tiny_case()
    with pytest.raises(ValueError, match="volume fraction"):
        run_case(bvp, 1.2, TargetSet.free(), cfg)


def test_custom_bvp_requires_grid():
    with pytest.raises(ValueError, match="base_nx"):
        run_case(fem.cantilever_bvp(4.0, 2.0), 0.4, TargetSet.free(),
                 CaseConfig())


def test_csv_log_deterministic(tmp_path):
    outputs = []
    for sub in ("a", "b"):
        bvp, cfg = tiny_case(i_max=25, out_dir=str(tmp_path / sub))
        run_case(bvp, 0.4, TargetSet.uniform(2), cfg)
        outputs.append((tmp_path / sub / "run.csv").read_bytes())
    assert outputs[0] == outputs[1]
    header = outputs[0].decode().splitlines()[0]
    assert header == "I,stage,p,beta,compliance,vol_frac,delta_rho_mean,cells"


def test_artifacts_written_and_reloadable(tmp_path):
    out = tmp_path / "case"
    bvp, cfg = tiny_case(i_max=30, out_dir=str(out))
    res = run_case(bvp, 0.4, TargetSet.uniform(1), cfg)
    assert (out / "run.csv").exists()
    vtks = sorted(p.name for p in out.glob("*.vtk"))
    assert any(name.startswith("stage_final") for name in vtks)
    mesh, design, physical, targets, meta = driver.load_final(out / "final.npz")
    assert mesh.cells == res.mesh.cells
    assert np.array_equal(design, res.design)
    assert np.array_equal(physical, res.physical)
    assert targets == TargetSet.uniform(1)
    assert meta["compliance"] == res.compliance


def test_full_chain_gradient_matches_fd():
    m = __import__("multitop.mesh", fromlist=["build_initial"]).build_initial(
        4, 2, (4.0, 2.0))
    bvp = fem.cantilever_bvp(4.0, 2.0)
    targets = TargetSet.uniform(2)
    fcfg = driver.FilterConfig()
    rng = np.random.default_rng(5)
    rho = rng.uniform(0.15, 0.85, m.n_cells)
    ev = driver.evaluate_design(m, rho, bvp, targets, 2.0, 6.0, fcfg)
    h = 1e-6
    for e in [0, 3, 5]:
        dp = rho.copy()
        dm = rho.copy()
        dp[e] += h
        dm[e] -= h
        cp = driver.evaluate_design(m, dp, bvp, targets, 2.0, 6.0, fcfg).compliance
        cm = driver.evaluate_design(m, dm, bvp, targets, 2.0, 6.0, fcfg).compliance
        fd = (cp - cm) / (2 * h)
        assert abs(ev.obj_grad[e] - fd) <= 1e-4 * max(1.0, abs(fd))


def study_config():
    return CaseConfig(uniform_refines=0, adapt_enabled=False, i_max=3)


def test_study_records_failures_and_gaps(tmp_path):
    matrix = StudyMatrix(benchmarks=("cantilever",), vfracs=(0.4,),
                         thickness_counts=(1, 0, "free"))
    report = run_study(matrix, study_config(), out_root=str(tmp_path))
    by_nt = {r.nt: r for r in report.rows}
    assert by_nt["0"].status == "failed"
    assert "ValueError" in by_nt["0"].error
    assert by_nt["1"].status == "ok"
    assert by_nt["free"].status == "ok"
    gap = report.gap("cantilever", 0.4, 1)
    assert gap is not None
    expected = (by_nt["1"].compliance - by_nt["free"].compliance) \
        / by_nt["free"].compliance * 100.0
    assert abs(gap - expected) < 1e-12
    assert report.gap("cantilever", 0.4, "free") is None
    text = (tmp_path / "study.csv").read_text().splitlines()
    assert text[0].startswith("benchmark,vbar,nt,status")
    assert len(text) == 4


def test_study_parallel_matches_serial():
    matrix = StudyMatrix(benchmarks=("cantilever",), vfracs=(0.4,),
                         thickness_counts=(1, "free"))
    serial = run_study(matrix, study_config(), jobs=1)
    parallel = run_study(matrix, study_config(), jobs=2)
    for a, b in zip(serial.rows, parallel.rows):
        assert (a.benchmark, a.vbar, a.nt, a.status) == \
            (b.benchmark, b.vbar, b.nt, b.status)
        assert a.compliance == b.compliance
