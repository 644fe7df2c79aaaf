"""Command-line entry point: run, study, export, verify.

Configuration comes from an INI file (any section layout; keys are field
names of RunConfig) with command-line flags taking precedence. The
pipeline is deterministic, so identical configs give byte-identical CSV
logs; the seed field is reserved for future stochastic features.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys

import numpy as np

from . import driver, export, fem
from . import mesh as mesh_mod
from . import regularization as reg
from .material import TargetSet
from .optimizer import OptimizerConfig

OUT_ENV = "MULTITOP_OUT"


@dataclasses.dataclass
class RunConfig:
    """One case: problem selection plus every tunable constant."""

    preset: object = "cantilever"
    vfrac: float | None = None
    nt: object = 1
    c_p: float = 1.03
    c_beta: float = 1.2
    p_max: float = 3.0
    beta_max: float = 50.0
    radius: float = 0.375
    c_r: float = 0.2
    c_c: float = 1e-3
    move: float = 0.2
    eps_stop: float = 1e-4
    i_max: int = 200
    max_level: int = 5
    min_level: int = 0
    uniform_refines: int = 2
    adapt: bool = True
    adapt_period: int = 5
    base_nx: int | None = None
    base_ny: int | None = None
    extents: tuple | None = None
    out: str | None = None
    jobs: int = 1
    seed: int = 0


def _parse_nt(text):
    if isinstance(text, int):
        if text < 1:
            raise ValueError("nt must be a positive integer or 'free'")
        return text
    if str(text).lower() == "free":
        return "free"
    try:
        nt = int(text)
    except ValueError:
        raise ValueError("nt must be a positive integer or 'free'") from None
    if nt < 1:
        raise ValueError("nt must be a positive integer or 'free'")
    return nt


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_extents(text):
    parts = [float(tok) for tok in str(text).replace("x", ",").split(",")]
    if len(parts) != 2:
        raise ValueError("extents must be two numbers, e.g. '20,10'")
    return tuple(parts)


_COERCE = {
    "nt": _parse_nt,
    "adapt": _parse_bool,
    "extents": _parse_extents,
    "preset": str,
    "out": str,
    "vfrac": float,
    "base_nx": int,
    "base_ny": int,
}


def load_config(path) -> RunConfig:
    """INI file to RunConfig; unknown keys and bad values are errors."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ValueError(f"config file not readable: {path}")
    flat = {}
    for sec in cp.sections():
        flat.update(cp.items(sec))
    return apply_overrides(RunConfig(), flat)


def apply_overrides(rc: RunConfig, overrides: dict) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    defaults = RunConfig()
    values = {}
    for key, raw in overrides.items():
        if raw is None:
            continue
        if key not in names:
            raise ValueError(f"unknown config key: {key}")
        if isinstance(raw, str):
            conv = _COERCE.get(key, type(getattr(defaults, key)))
            try:
                values[key] = conv(raw)
            except ValueError as exc:
                raise ValueError(f"invalid value for {key}: {exc}") from None
        else:
            values[key] = raw
    return dataclasses.replace(rc, **values)


def validate(rc: RunConfig) -> RunConfig:
    if rc.vfrac is None:
        raise ValueError("missing required field vfrac (--vfrac)")
    rc = dataclasses.replace(rc, vfrac=float(rc.vfrac), nt=_parse_nt(rc.nt))
    if not 0.0 < rc.vfrac < 1.0:
        raise ValueError("vfrac must lie in (0, 1)")
    return rc


def targets_of(nt) -> TargetSet:
    return TargetSet.free() if nt == "free" else TargetSet.uniform(int(nt))


def case_config(rc: RunConfig, out_dir=None) -> driver.CaseConfig:
    cont = driver.ContinuationState(c_p=rc.c_p, c_beta=rc.c_beta,
                                    p_max=rc.p_max, beta_max=rc.beta_max)
    return driver.CaseConfig(
        filter=reg.FilterConfig(r=rc.radius),
        optimizer=OptimizerConfig(move=rc.move),
        continuation=cont,
        c_r=rc.c_r, c_c=rc.c_c,
        adapt_period=rc.adapt_period, adapt_enabled=rc.adapt,
        uniform_refines=rc.uniform_refines,
        max_level=rc.max_level, min_level=rc.min_level,
        eps_stop=rc.eps_stop, i_max=rc.i_max,
        base_nx=rc.base_nx, base_ny=rc.base_ny, extents=rc.extents,
        out_dir=out_dir)


def resolve_out(rc: RunConfig, default_name: str) -> str:
    if rc.out:
        return rc.out
    return os.path.join(os.environ.get(OUT_ENV, "."), default_name)


def print_header(rc: RunConfig, file=None) -> None:
    file = file or sys.stdout
    nt = rc.nt
    print(f"case: preset={rc.preset} vfrac={rc.vfrac:g} nt={nt}", file=file)
    print(f"constants: c_p={rc.c_p:g} c_beta={rc.c_beta:g} "
          f"p_max={rc.p_max:g} beta_max={rc.beta_max:g} "
          f"c_r={rc.c_r:g} c_c={rc.c_c:g} r={rc.radius:g} "
          f"eps={rc.eps_stop:g} I_max={rc.i_max}", file=file)


def cmd_run(rc: RunConfig) -> int:
    rc = validate(rc)
    out_dir = resolve_out(rc, f"run_{rc.preset}_v{rc.vfrac:g}_nt{rc.nt}")
    os.makedirs(out_dir, exist_ok=True)
    print_header(rc)
    result = driver.run_case(rc.preset, rc.vfrac, targets_of(rc.nt),
                             case_config(rc, out_dir))
    last = result.history[-1]
    print(f"final: compliance={result.compliance:.6e} "
          f"vol_frac={last.vol_frac:.6f} cells={result.mesh.n_cells} "
          f"iterations={len(result.history)} stage={result.stage}")
    print(f"artifacts: {out_dir}")
    return 0


def cmd_study(rc: RunConfig, benchmarks=None, vfracs=None, nts=None) -> int:
    matrix = driver.StudyMatrix()
    if benchmarks:
        matrix = dataclasses.replace(matrix, benchmarks=tuple(benchmarks))
    if vfracs:
        matrix = dataclasses.replace(matrix, vfracs=tuple(vfracs))
    if nts:
        matrix = dataclasses.replace(
            matrix, thickness_counts=tuple(_parse_nt(v) for v in nts))
    out_root = resolve_out(rc, "study")
    os.makedirs(out_root, exist_ok=True)
    report = driver.run_study(matrix, case_config(rc), jobs=rc.jobs,
                              out_root=out_root)
    failed = 0
    for row in report.rows:
        if row.status == "ok":
            print(f"ok {row.benchmark} vfrac={row.vbar:g} nt={row.nt}: "
                  f"compliance={row.compliance:.6e} cells={row.cells} "
                  f"iterations={row.iterations}")
        else:
            failed += 1
            print(f"FAILED {row.benchmark} vfrac={row.vbar:g} "
                  f"nt={row.nt}: {row.error}")
    print(f"study: {len(report.rows) - failed} ok, {failed} failed; "
          f"report in {out_root}")
    return 0


def cmd_export(snapshot, nt=None, t_total=20.0, scale=1.0, out=None,
               layers_only=False) -> int:
    mesh, _, physical, targets, meta = driver.load_final(snapshot)
    if targets.is_free:
        print("error: free-thickness snapshot has no discrete levels",
              file=sys.stderr)
        return 1
    if nt is not None and _parse_nt(nt) != targets.n:
        print(f"error: snapshot has nt={targets.n}, requested nt={nt}",
              file=sys.stderr)
        return 1
    out_dir = out or os.path.join(os.path.dirname(snapshot) or ".", "layers")
    os.makedirs(out_dir, exist_ok=True)
    stack = export.extract_contours(mesh, physical, targets, t_total=t_total)
    paths = export.write_layers(stack, out_dir, scale=scale)
    if not layers_only:
        stl = os.path.join(out_dir, "stack.stl")
        scaled = dataclasses.replace(stack, cell=stack.cell * scale,
                                     width=stack.width * scale,
                                     height=stack.height * scale)
        paths.append(export.extrude_stack(scaled, t_total, stl))
    print(f"sheet thickness per side: {stack.sheet_thickness:.2f}mm")
    for p in paths:
        print(f"wrote {p}")
    return 0


def _check_solver():
    from scipy.sparse.linalg import splu
    import scipy.sparse as sp
    lu = splu(sp.eye(3, format="csc"))
    assert np.allclose(lu.solve(np.ones(3)), 1.0)


def _check_continuation(c_p, c_beta):
    state = driver.ContinuationState(c_p=c_p, c_beta=c_beta)
    state = driver.continuation_step(state, 0.0)
    counts = {"p-ramp": 0, "beta-ramp": 0}
    guard = 0
    while state.stage != "fine-tune":
        stage = state.stage
        state = driver.continuation_step(state, 0.0)
        counts[stage] += 1
        guard += 1
        if guard > 1000:
            raise AssertionError(
                f"continuation did not terminate (c_p={c_p}, c_beta={c_beta})")
    if counts["p-ramp"] != 38 or counts["beta-ramp"] != 35:
        raise AssertionError(
            f"ramp lengths {counts['p-ramp']}/{counts['beta-ramp']}, "
            "expected 38/35")


def _check_filter():
    m = mesh_mod.build_initial(8, 4, (8.0, 4.0), uniform_refines=0)
    cfg = reg.FilterConfig()
    rng = np.random.default_rng(7)
    x = rng.random(m.n_cells)
    fx = reg.pde_filter(m, x, cfg)
    assert abs(np.dot(fx, m.areas) - np.dot(x, m.areas)) <= 1e-10
    assert np.max(np.abs(reg.pde_filter(m, np.full(m.n_cells, 0.37), cfg)
                         - 0.37)) <= 1e-10
    y = rng.random(m.n_cells)
    lhs = np.dot(reg.filter_adjoint(m, y, cfg), x)
    rhs = np.dot(y, reg.pde_filter(m, x, cfg))
    assert abs(lhs - rhs) <= 1e-10


def _check_projection():
    cfg = reg.ProjectionConfig(beta=8.0, n=3)
    ends = reg.project_multilevel(np.array([0.0, 1.0]), cfg)
    assert ends[0] == 0.0 and ends[1] == 1.0
    grid = np.linspace(0.0, 1.0, 2001)
    vals = reg.project_multilevel(grid, cfg)
    assert np.all(np.diff(vals) > 0)
    one = reg.ProjectionConfig(beta=6.0, n=1)
    got = reg.project_multilevel(grid, one)
    t = np.tanh(3.0)
    want = (t + np.tanh(6.0 * (grid - 0.5))) / (t + np.tanh(3.0))
    assert np.max(np.abs(got - want)) <= 1e-12


def _check_gradient():
    bvp = fem.cantilever_bvp(4.0, 2.0)
    m = mesh_mod.build_initial(4, 2, (4.0, 2.0), uniform_refines=0)
    ts = TargetSet.uniform(2)
    fcfg = reg.FilterConfig()
    rng = np.random.default_rng(3)
    rho = np.clip(rng.random(m.n_cells), 0.1, 0.9)
    rho[np.abs(rho - 0.5) < 0.05] = 0.3
    ev = driver.evaluate_design(m, rho, bvp, ts, p=2.0, beta=4.0,
                                filter_cfg=fcfg)
    h = 1e-6
    for cell in (0, 3, 5):
        dp = rho.copy()
        dm = rho.copy()
        dp[cell] += h
        dm[cell] -= h
        cp = driver.evaluate_design(m, dp, bvp, ts, 2.0, 4.0, fcfg).compliance
        cm = driver.evaluate_design(m, dm, bvp, ts, 2.0, 4.0, fcfg).compliance
        fd = (cp - cm) / (2 * h)
        assert abs(fd - ev.obj_grad[cell]) <= 1e-4 * max(abs(fd), 1e-30)


def _check_mesh_balance():
    m = mesh_mod.build_initial(4, 2, (4.0, 2.0), uniform_refines=1)
    rho = (m.centroids[:, 0] < 1.0).astype(float)
    for _ in range(3):
        m, rho = mesh_mod.adapt(m, rho, 1.0, 0.2, 1e-3)
    assert m.levels.max() > 2
    assert m.validate_balance()


def cmd_verify(c_p: float = 1.03, c_beta: float = 1.2) -> int:
    checks = [
        ("sparse direct solver", _check_solver),
        ("continuation schedule", lambda: _check_continuation(c_p, c_beta)),
        ("filter conservation and adjoint", _check_filter),
        ("projection fixed points", _check_projection),
        ("adjoint gradient vs finite differences", _check_gradient),
        ("mesh 2:1 balance", _check_mesh_balance),
    ]
    failures = 0
    for name, fn in checks:
        try:
            fn()
        except ImportError as exc:
            failures += 1
            print(f"FAIL {name}: missing dependency: {exc}")
        except Exception as exc:
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"ok {name}")
    if failures:
        print(f"verify: {failures} of {len(checks)} checks failed")
        return 1
    print(f"verify: all {len(checks)} checks passed")
    return 0


def _add_common(sub):
    sub.add_argument("--config", help="INI config file")
    sub.add_argument("--preset", choices=sorted(fem.PRESETS))
    sub.add_argument("--vfrac", type=float)
    sub.add_argument("--nt", help="thickness count (integer or 'free')")
    sub.add_argument("--max-level", dest="max_level", type=int)
    sub.add_argument("--no-adapt", dest="adapt", action="store_const",
                     const=False)
    sub.add_argument("--uniform-refines", dest="uniform_refines", type=int)
    sub.add_argument("--i-max", dest="i_max", type=int)
    sub.add_argument("--out")
    sub.add_argument("--jobs", type=int)
    sub.add_argument("--seed", type=int)


def _gather(args) -> RunConfig:
    rc = load_config(args.config) if args.config else RunConfig()
    names = {f.name for f in dataclasses.fields(RunConfig)}
    flags = {k: v for k, v in vars(args).items() if k in names}
    return apply_overrides(rc, flags)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multitop",
        description="Multi-thickness topology optimization of sheet parts")
    subs = parser.add_subparsers(dest="command", required=True)

    p_run = subs.add_parser("run", help="optimize a single case")
    _add_common(p_run)

    p_study = subs.add_parser("study", help="run the benchmark matrix")
    _add_common(p_study)
    p_study.add_argument("--benchmarks", help="comma list of presets")
    p_study.add_argument("--vfracs", help="comma list of volume fractions")
    p_study.add_argument("--nts", help="comma list of thickness counts")

    p_exp = subs.add_parser("export", help="cut profiles and STL from a run")
    p_exp.add_argument("snapshot", help="final.npz written by run")
    p_exp.add_argument("--nt", help="expected thickness count (cross-check)")
    p_exp.add_argument("--t-total", dest="t_total", type=float, default=20.0)
    p_exp.add_argument("--scale", type=float, default=1.0)
    p_exp.add_argument("--out")
    p_exp.add_argument("--layers-only", action="store_true")

    subs.add_parser("verify", help="fast self-check of core properties")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(_gather(args))
        if args.command == "study":
            rc = _gather(args)
            split = lambda s: s.split(",") if s else None
            vf = [float(v) for v in args.vfracs.split(",")] \
                if args.vfracs else None
            return cmd_study(rc, benchmarks=split(args.benchmarks),
                             vfracs=vf, nts=split(args.nts))
        if args.command == "export":
            return cmd_export(args.snapshot, nt=args.nt,
                              t_total=args.t_total, scale=args.scale,
                              out=args.out, layers_only=args.layers_only)
        return cmd_verify()
    except ValueError as exc:
        parser.exit(2, f"{parser.prog}: error: {exc}\n")


if __name__ == "__main__":
    sys.exit(main())
