"""Optimality-criteria design update under a single volume-fraction constraint.

The multiplicative update rho* = clamp(rho * B^damping) with
B = -dC/drho / (lambda dV/drho) is driven by a bisection on lambda until
the (possibly nonlinearly recomputed) volume fraction of the candidate
design hits the bound. Bisection runs on a log scale; the bracket can be
warm-started from the previous iteration's multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import AdaptiveMesh


@dataclass(frozen=True)
class OptimizerConfig:
    move: float = 0.2
    damping: float = 0.5
    lam_lo: float = 1e-9
    lam_hi: float = 1e9
    lam_rtol: float = 1e-10
    vol_tol: float = 1e-6
    b_floor: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.move <= 1.0:
            raise ValueError("move limit must be in (0, 1]")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must be in (0, 1]")


@dataclass
class ConstraintEval:
    value: float
    gradient: np.ndarray


class BisectionError(RuntimeError):
    """Volume bound unreachable inside the multiplier range."""

    def __init__(self, lam_lo, lam_hi, g_lo, g_hi):
        self.bracket = (lam_lo, lam_hi, g_lo, g_hi)
        super().__init__(
            f"volume constraint unreachable: G({lam_lo:.3e}) = {g_lo:.3e}, "
            f"G({lam_hi:.3e}) = {g_hi:.3e}"
        )


def volume_fraction(mesh: AdaptiveMesh, physical, vbar: float) -> ConstraintEval:
    """Area-weighted volume-fraction constraint value and its density gradient."""
    rho = np.asarray(physical, dtype=float)
    v0 = mesh.domain_area
    value = float(np.dot(rho, mesh.areas) / v0 - vbar)
    return ConstraintEval(value=value, gradient=mesh.areas / v0)


def oc_update(
    design,
    obj_grad,
    con_grad,
    vbar: float,
    cfg: OptimizerConfig | None = None,
    volume_of=None,
    lam_hint: float | None = None,
    with_multiplier: bool = False,
):
    """One OC step; the returned design hits the volume bound within vol_tol.

    volume_of maps a candidate design to its volume fraction; the default
    linearizes with con_grad, which is exact when con_grad is the plain
    area gradient. Callers with a filter/projection chain pass the full
    recompute instead.
    """
    cfg = cfg or OptimizerConfig()
    rho = np.asarray(design, dtype=float)
    og = np.asarray(obj_grad, dtype=float)
    cg = np.asarray(con_grad, dtype=float)
    if np.any(og > 0.0):
        raise ValueError("objective gradient must be nonpositive")
    if np.any(cg <= 0.0):
        raise ValueError("constraint gradient must be strictly positive")
    if volume_of is None:
        volume_of = lambda r: float(np.dot(r, cg))

    lo_box = np.maximum(0.0, rho - cfg.move)
    hi_box = np.minimum(1.0, rho + cfg.move)
    ratio = -og / cg

    def candidate(lam: float) -> np.ndarray:
        b = np.maximum(ratio / lam, cfg.b_floor)
        return np.clip(rho * b**cfg.damping, lo_box, hi_box)

    def g(lam: float) -> float:
        return volume_of(candidate(lam)) - vbar

    if lam_hint is not None and np.isfinite(lam_hint) and lam_hint > 0:
        lo = max(cfg.lam_lo, lam_hint / 16.0)
        hi = min(cfg.lam_hi, lam_hint * 16.0)
    else:
        lo, hi = cfg.lam_lo, cfg.lam_hi
    g_lo, g_hi = g(lo), g(hi)
    while g_lo < 0.0 and lo > cfg.lam_lo:
        lo = max(cfg.lam_lo, lo / 4096.0)
        g_lo = g(lo)
    while g_hi > 0.0 and hi < cfg.lam_hi:
        hi = min(cfg.lam_hi, hi * 4096.0)
        g_hi = g(hi)
    if g_lo < 0.0 or g_hi > 0.0:
        # accept a boundary multiplier that already meets the tolerance
        for lam, gv in ((lo, g_lo), (hi, g_hi)):
            if abs(gv) <= cfg.vol_tol:
                out = candidate(lam)
                return (out, lam) if with_multiplier else out
        raise BisectionError(lo, hi, g_lo, g_hi)

    while hi - lo > cfg.lam_rtol * hi:
        mid = np.sqrt(lo * hi)
        if g(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
    lam = np.sqrt(lo * hi)
    out = candidate(lam)
    g_final = volume_of(out) - vbar
    if abs(g_final) > cfg.vol_tol:
        raise BisectionError(lo, hi, g(lo), g(hi))
    return (out, lam) if with_multiplier else out
