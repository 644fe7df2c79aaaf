"""Optimization driver: continuation schedule, main loop, study runner.

A run alternates filter -> projection -> interpolation -> solve ->
chained sensitivities -> OC update. The continuation advances one stage
machine per iteration: an unpenalized warm-up until the design settles,
a geometric p-ramp, a geometric beta-ramp, then fine-tuning until the
mean design change drops below the stopping threshold. The mesh adapts
to density jumps every fifth iteration.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem, material, vtkio
from . import mesh as mesh_mod
from . import regularization as reg
from .material import TargetSet
from .optimizer import OptimizerConfig, oc_update
from .regularization import FilterConfig, ProjectionConfig

STAGES = ("unpenalized", "p-ramp", "beta-ramp", "fine-tune")


@dataclass(frozen=True)
class ContinuationState:
    stage: str = "unpenalized"
    p: float = 1.0
    beta: float = 0.1
    p_init: float = 1.0
    beta_init: float = 0.1
    c_p: float = 1.03
    c_beta: float = 1.2
    p_max: float = 3.0
    beta_max: float = 50.0
    trigger: float = 1e-3


def continuation_step(state: ContinuationState, delta_rho_mean: float) -> ContinuationState:
    """Advance the continuation by one iteration's worth of schedule.

    The warm-up stage waits for the mean design change to drop below the
    trigger; each ramp stage applies one multiplication per call and
    hands over when its cap is reached. Transitions are one-way.
    """
    if state.stage == "unpenalized":
        if delta_rho_mean < state.trigger:
            return replace(state, stage="p-ramp")
        return state
    if state.stage == "p-ramp":
        p = min(state.c_p * state.p, state.p_max)
        stage = "beta-ramp" if p >= state.p_max else "p-ramp"
        return replace(state, p=p, stage=stage)
    if state.stage == "beta-ramp":
        beta = min(state.c_beta * state.beta, state.beta_max)
        stage = "fine-tune" if beta >= state.beta_max else "beta-ramp"
        return replace(state, beta=beta, stage=stage)
    return state


@dataclass
class IterationRecord:
    iteration: int
    stage: str
    p: float
    beta: float
    compliance: float
    vol_frac: float
    delta_rho_mean: float
    cells: int


CSV_HEADER = "I,stage,p,beta,compliance,vol_frac,delta_rho_mean,cells"


def write_history_csv(path, history) -> None:
    rows = [CSV_HEADER]
    for r in history:
        rows.append(
            f"{r.iteration},{r.stage},{r.p!r},{r.beta!r},{r.compliance!r},"
            f"{r.vol_frac!r},{r.delta_rho_mean!r},{r.cells}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


@dataclass
class CaseConfig:
    filter: FilterConfig = field(default_factory=FilterConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    continuation: ContinuationState = field(default_factory=ContinuationState)
    c_r: float = 0.2
    c_c: float = 1e-3
    adapt_period: int = 5
    adapt_enabled: bool = True
    uniform_refines: int = 2
    max_level: int = 5
    min_level: int = 0
    eps_stop: float = 1e-4
    i_max: int = 200
    base_nx: int | None = None
    base_ny: int | None = None
    extents: tuple[float, float] | None = None
    out_dir: str | None = None


@dataclass
class ChainEval:
    """Forward solve plus full-chain gradients for one design iterate."""

    filtered: np.ndarray
    physical: np.ndarray
    compliance: float
    obj_grad: np.ndarray
    con_grad: np.ndarray
    result: fem.SolveResult


def evaluate_design(mesh, design, bvp, targets: TargetSet, p: float,
                    beta: float, filter_cfg: FilterConfig) -> ChainEval:
    """Filter, project, solve, and pull sensitivities back to design space.

    Free-thickness targets skip the projection entirely, so the physical
    field equals the filtered one and the exponent is inert.
    """
    rho_t = reg.pde_filter(mesh, design, filter_cfg)
    if targets.is_free:
        rho_bar = rho_t
        proj_d = np.ones_like(rho_t)
        p_eff = 1.0
    else:
        pcfg = ProjectionConfig(beta=beta, n=targets.n)
        rho_bar = reg.project_multilevel(rho_t, pcfg)
        proj_d = reg.project_derivative(rho_t, pcfg)
        p_eff = p
    e_field = material.effective_modulus(rho_bar, p_eff, targets, bvp.e0)
    result = fem.assemble_solve(mesh, e_field, bvp)
    de = material.modulus_derivative(rho_bar, p_eff, targets, bvp.e0)
    sens = fem.compliance_sensitivity(result, de)
    # fp wiggle guards: compliance gradients are nonpositive, volume
    # gradients strictly positive, by the sign structure of the chain
    obj_grad = np.minimum(reg.filter_adjoint(mesh, sens * proj_d, filter_cfg), 0.0)
    vgrad = reg.filter_adjoint(
        mesh, (mesh.areas / mesh.domain_area) * proj_d, filter_cfg)
    con_grad = np.maximum(vgrad, 1e-250)
    return ChainEval(filtered=rho_t, physical=rho_bar,
                     compliance=result.compliance, obj_grad=obj_grad,
                     con_grad=con_grad, result=result)


def chain_volume_fraction(mesh, design, targets: TargetSet, beta: float,
                          filter_cfg: FilterConfig) -> float:
    """Volume fraction of the projected physical field for a design."""
    rho_t = reg.pde_filter(mesh, design, filter_cfg)
    if not targets.is_free:
        rho_t = reg.project_multilevel(rho_t, ProjectionConfig(beta=beta, n=targets.n))
    return float(np.dot(rho_t, mesh.areas) / mesh.domain_area)


@dataclass
class CaseResult:
    design: np.ndarray
    physical: np.ndarray
    mesh: mesh_mod.AdaptiveMesh
    history: list[IterationRecord]
    compliance: float
    stage: str


def _resolve_problem(preset, cfg: CaseConfig):
    if isinstance(preset, str):
        bvp = fem.PRESETS[preset]()
        nx, ny, extents = fem.PRESET_MESH[preset]
    else:
        bvp = preset
        if cfg.base_nx is None or cfg.base_ny is None or cfg.extents is None:
            raise ValueError("custom BvpSpec requires base_nx, base_ny, extents")
        nx, ny, extents = cfg.base_nx, cfg.base_ny, cfg.extents
    return bvp, nx, ny, extents


def _save_final(out_dir, preset, vbar, targets, mesh, design, physical,
                compliance) -> None:
    np.savez(
        os.path.join(out_dir, "final.npz"),
        cells=np.asarray(mesh.cells, dtype=np.int64),
        design=design,
        physical=physical,
        nx=mesh.nx, ny=mesh.ny,
        width=mesh.width, height=mesh.height,
        max_level=mesh.max_level, min_level=mesh.min_level,
        nt="free" if targets.is_free else str(targets.n),
        vbar=float(vbar),
        preset=preset if isinstance(preset, str) else "custom",
        compliance=float(compliance),
    )


def load_final(path):
    """Rebuild (mesh, design, physical, targets, meta) from a final.npz."""
    data = np.load(path)
    cells = [tuple(int(v) for v in row) for row in data["cells"]]
    mesh = mesh_mod.AdaptiveMesh(
        int(data["nx"]), int(data["ny"]),
        float(data["width"]), float(data["height"]), cells,
        max_level=int(data["max_level"]), min_level=int(data["min_level"]))
    nt = str(data["nt"])
    targets = TargetSet.free() if nt == "free" else TargetSet.uniform(int(nt))
    meta = {"vbar": float(data["vbar"]), "preset": str(data["preset"]),
            "compliance": float(data["compliance"])}
    return mesh, data["design"], data["physical"], targets, meta


def run_case(preset, vbar: float, targets: TargetSet,
             config: CaseConfig | None = None) -> CaseResult:
    """Optimize one benchmark case and return the converged fields.

    preset is a registered name ("cantilever", "mbb") or a BvpSpec with
    the base grid supplied through the config.
    """
    cfg = config or CaseConfig()
    if not 0.0 < vbar < 1.0:
        raise ValueError("volume fraction must lie in (0, 1)")
    bvp, nx, ny, extents = _resolve_problem(preset, cfg)
    mesh = mesh_mod.build_initial(nx, ny, extents, cfg.uniform_refines,
                                  cfg.max_level, cfg.min_level)
    rho = np.full(mesh.n_cells, float(vbar))
    if targets.is_free:
        state = replace(cfg.continuation, stage="fine-tune")
        delta_hat = 1.0
    else:
        state = cfg.continuation
        delta_hat = targets.spacing

    out = cfg.out_dir
    if out:
        os.makedirs(out, exist_ok=True)
    history: list[IterationRecord] = []
    lam_hint = None
    ev = None
    it = 0
    try:
        for it in range(1, cfg.i_max + 1):
            ev = evaluate_design(mesh, rho, bvp, targets, state.p, state.beta,
                                 cfg.filter)

            def volume_of(cand, _m=mesh, _b=state.beta):
                return chain_volume_fraction(_m, cand, targets, _b, cfg.filter)

            rho_new, lam_hint = oc_update(
                rho, ev.obj_grad, ev.con_grad, vbar, cfg.optimizer,
                volume_of=volume_of, lam_hint=lam_hint, with_multiplier=True)
            drm = float(np.mean(np.abs(rho_new - rho)))
            rho = rho_new

            rho_t = reg.pde_filter(mesh, rho, cfg.filter)
            if targets.is_free:
                rho_bar = rho_t
            else:
                rho_bar = reg.project_multilevel(
                    rho_t, ProjectionConfig(beta=state.beta, n=targets.n))
            vf = float(np.dot(rho_bar, mesh.areas) / mesh.domain_area)
            history.append(IterationRecord(
                iteration=it, stage=state.stage, p=state.p, beta=state.beta,
                compliance=ev.compliance, vol_frac=vf, delta_rho_mean=drm,
                cells=mesh.n_cells))

            prev_stage = state.stage
            state = continuation_step(state, drm)
            if out and state.stage != prev_stage:
                vtkio.write_vtk(
                    os.path.join(out, f"stage_{prev_stage}_i{it:03d}.vtk"),
                    mesh,
                    cell_data={"design": rho, "physical": rho_bar},
                    point_data={"displacement": ev.result.u})

            if state.stage == "fine-tune" and drm <= cfg.eps_stop:
                break
            if cfg.adapt_enabled and it % cfg.adapt_period == 0 and it < cfg.i_max:
                mesh2, rho2 = mesh_mod.adapt(mesh, rho, delta_hat, cfg.c_r,
                                             cfg.c_c, marker_densities=rho_bar)
                if mesh2.cells != mesh.cells:
                    mesh, rho = mesh2, np.asarray(rho2)
    except Exception:
        if out and history:
            write_history_csv(os.path.join(out, "run.csv"), history)
        raise

    final = evaluate_design(mesh, rho, bvp, targets, state.p, state.beta,
                            cfg.filter)
    if out:
        write_history_csv(os.path.join(out, "run.csv"), history)
        vtkio.write_vtk(
            os.path.join(out, f"stage_final_i{it:03d}.vtk"), mesh,
            cell_data={"design": rho, "physical": final.physical},
            point_data={"displacement": final.result.u})
        _save_final(out, preset, vbar, targets, mesh, rho, final.physical,
                    final.compliance)
    return CaseResult(design=rho, physical=final.physical, mesh=mesh,
                      history=history, compliance=final.compliance,
                      stage=state.stage)


@dataclass
class StudyMatrix:
    benchmarks: tuple = ("cantilever", "mbb")
    vfracs: tuple = (0.2, 0.3, 0.5)
    thickness_counts: tuple = (1, 2, 3, 4, 8, "free")


@dataclass
class StudyRow:
    benchmark: str
    vbar: float
    nt: str
    status: str
    iterations: int
    cells: int
    compliance: float
    gap_pct: float | None = None
    error: str = ""


@dataclass
class StudyReport:
    rows: list

    def gap(self, benchmark: str, vbar: float, nt) -> float | None:
        for r in self.rows:
            if (r.benchmark, r.nt) == (benchmark, str(nt)) and abs(r.vbar - vbar) < 1e-12:
                return r.gap_pct
        return None

    def write_csv(self, path) -> None:
        lines = ["benchmark,vbar,nt,status,iterations,cells,compliance,gap_pct,error"]
        for r in self.rows:
            gap = "" if r.gap_pct is None else repr(r.gap_pct)
            comp = "" if not np.isfinite(r.compliance) else repr(r.compliance)
            lines.append(
                f"{r.benchmark},{r.vbar!r},{r.nt},{r.status},{r.iterations},"
                f"{r.cells},{comp},{gap},{r.error}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _case_dir(out_root, benchmark, vbar, nt) -> str | None:
    if not out_root:
        return None
    return os.path.join(out_root, f"case_{benchmark}_v{vbar:g}_nt{nt}")


def _study_worker(args) -> StudyRow:
    benchmark, vbar, nt, cfg, out_root = args
    case_cfg = replace(cfg, out_dir=_case_dir(out_root, benchmark, vbar, nt))
    try:
        targets = TargetSet.free() if nt == "free" else TargetSet.uniform(int(nt))
        res = run_case(benchmark, vbar, targets, case_cfg)
    except Exception as exc:
        return StudyRow(benchmark=benchmark, vbar=vbar, nt=str(nt),
                        status="failed", iterations=0, cells=0,
                        compliance=float("nan"),
                        error=f"{type(exc).__name__}: {exc}")
    return StudyRow(benchmark=benchmark, vbar=vbar, nt=str(nt), status="ok",
                    iterations=len(res.history), cells=res.mesh.n_cells,
                    compliance=res.compliance)


def run_study(matrix: StudyMatrix | None = None,
              config: CaseConfig | None = None, jobs: int = 1,
              out_root: str | None = None) -> StudyReport:
    """Run the benchmark matrix and tabulate compliance gaps to free mode.

    Case failures are recorded in the report and do not stop the study.
    """
    matrix = matrix or StudyMatrix()
    cfg = config or CaseConfig()
    if out_root:
        os.makedirs(out_root, exist_ok=True)
    tasks = [(b, v, nt, cfg, out_root)
             for b in matrix.benchmarks
             for v in matrix.vfracs
             for nt in matrix.thickness_counts]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_study_worker, tasks))
    else:
        rows = [_study_worker(t) for t in tasks]

    free_compliance = {(r.benchmark, round(r.vbar, 12)): r.compliance
                       for r in rows if r.nt == "free" and r.status == "ok"}
    for r in rows:
        ref = free_compliance.get((r.benchmark, round(r.vbar, 12)))
        if r.status == "ok" and r.nt != "free" and ref:
            r.gap_pct = (r.compliance - ref) / ref * 100.0
    report = StudyReport(rows=rows)
    if out_root:
        report.write_csv(os.path.join(out_root, "study.csv"))
    return report
