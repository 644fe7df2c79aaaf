"""Q1 plane-stress linear elasticity on the adaptive mesh.

Element stiffness is size-independent for square cells, so one unit-modulus
matrix serves every refinement level; hanging-node constraints are condensed
with the mesh's interpolation matrix before the sparse direct solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import AdaptiveMesh

_GAUSS = (-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0))
_CORNERS = np.array([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)])


def element_stiffness(nu: float) -> np.ndarray:
    """Unit-modulus Q1 plane-stress stiffness of a square, 2x2 Gauss points.

    Evaluated on the side-2 reference square; the result is valid for any
    square size since the 1/h of the gradients cancels the h^2 of the area.
    """
    d_mat = np.array(
        [[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, (1.0 - nu) / 2.0]]
    ) / (1.0 - nu**2)
    k0 = np.zeros((8, 8))
    for xi in _GAUSS:
        for eta in _GAUSS:
            dn_dxi = 0.25 * _CORNERS[:, 0] * (1.0 + eta * _CORNERS[:, 1])
            dn_deta = 0.25 * _CORNERS[:, 1] * (1.0 + xi * _CORNERS[:, 0])
            b = np.zeros((3, 8))
            b[0, 0::2] = dn_dxi
            b[1, 1::2] = dn_deta
            b[2, 0::2] = dn_deta
            b[2, 1::2] = dn_dxi
            k0 += b.T @ d_mat @ b
    return k0


_K0_CACHE: dict[float, np.ndarray] = {}


def _k0(nu: float) -> np.ndarray:
    got = _K0_CACHE.get(nu)
    if got is None:
        got = element_stiffness(nu)
        _K0_CACHE[nu] = got
    return got


@dataclass(frozen=True)
class BvpSpec:
    """Boundary value problem: extents, supports, tractions, material.

    dirichlet entries are (side, lo, hi, fix_x, fix_y) with [lo, hi] the
    span along the edge; tractions are (side, lo, hi, tx, ty) with (tx, ty)
    a force per unit length; point_supports are (x, y, fix_x, fix_y).
    """

    width: float
    height: float
    e0: float = 1.0
    nu: float = 0.3
    dirichlet: tuple = ()
    tractions: tuple = ()
    point_supports: tuple = ()
    preset: str = "custom"

    def __post_init__(self):
        if not (-1.0 < self.nu < 0.5):
            raise ValueError(f"Poisson ratio {self.nu} outside (-1, 0.5)")


def cantilever_bvp(width: float = 20.0, height: float = 10.0) -> BvpSpec:
    """Left edge clamped; unit downward force spread over the central 10% of the right edge."""
    seg = 0.1 * height
    return BvpSpec(
        width,
        height,
        dirichlet=(("left", 0.0, height, True, True),),
        tractions=(("right", 0.5 * (height - seg), 0.5 * (height + seg), 0.0, -1.0 / seg),),
        preset="cantilever",
    )


def mbb_half_bvp(width: float = 30.0, height: float = 10.0) -> BvpSpec:
    """Symmetric half of the MBB beam.

    Symmetry plane at x=0 (u_x = 0), roller at the bottom-right corner,
    unit downward force over the first 10% of the top edge.
    """
    seg = 0.1 * width
    return BvpSpec(
        width,
        height,
        dirichlet=(("left", 0.0, height, True, False),),
        point_supports=((width, 0.0, False, True),),
        tractions=(("top", 0.0, seg, 0.0, -1.0 / seg),),
        preset="mbb",
    )


PRESETS = {"cantilever": cantilever_bvp, "mbb": mbb_half_bvp}
# level-0 grid and extents used by the benchmark presets
PRESET_MESH = {"cantilever": (20, 10, (20.0, 10.0)), "mbb": (30, 10, (30.0, 10.0))}


@dataclass
class SolveResult:
    u: np.ndarray
    compliance: float
    kernel: np.ndarray  # per-cell u_e^T k0 u_e with unit-modulus k0
    residual: float


def _side_vertices(mesh: AdaptiveMesh, side: str, lo: float, hi: float, tol: float):
    coords = mesh.vertex_coords
    if side == "left":
        on = np.abs(coords[:, 0]) <= tol
        along = coords[:, 1]
    elif side == "right":
        on = np.abs(coords[:, 0] - mesh.width) <= tol
        along = coords[:, 1]
    elif side == "bottom":
        on = np.abs(coords[:, 1]) <= tol
        along = coords[:, 0]
    elif side == "top":
        on = np.abs(coords[:, 1] - mesh.height) <= tol
        along = coords[:, 0]
    else:
        raise ValueError(f"unknown side {side!r}")
    return np.where(on & (along >= lo - tol) & (along <= hi + tol))[0]


def assemble_solve(mesh: AdaptiveMesh, modulus_field, bvp: BvpSpec) -> SolveResult:
    """Assemble K u = f with condensed hanging nodes and solve directly."""
    e_field = np.asarray(modulus_field, dtype=float)
    if e_field.shape != (mesh.n_cells,):
        raise ValueError("modulus field length does not match the cell count")
    if np.any(e_field <= 0.0) or not np.all(np.isfinite(e_field)):
        raise ValueError("modulus field must be strictly positive and finite")

    k0 = _k0(bvp.nu)
    nv = mesh.n_vertices
    edof = np.repeat(2 * mesh.conn, 2, axis=1)
    edof[:, 1::2] += 1
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    data = (e_field[:, None, None] * k0).ravel()
    k_full = sp.csr_matrix((data, (rows, cols)), shape=(2 * nv, 2 * nv))

    f_full = np.zeros(2 * nv)
    for side, lo, hi, tx, ty in bvp.tractions:
        for _, va, vb, a, b in mesh.edge_faces(side):
            o1, o2 = max(a, lo), min(b, hi)
            if o2 - o1 <= 1e-14 * mesh.base_h:
                continue
            seg = o2 - o1
            mid = 0.5 * (o1 + o2)
            wa = seg * (b - mid) / (b - a)
            wb = seg * (mid - a) / (b - a)
            f_full[2 * va] += tx * wa
            f_full[2 * va + 1] += ty * wa
            f_full[2 * vb] += tx * wb
            f_full[2 * vb + 1] += ty * wb

    c_s, free = mesh.constraint_matrix()
    c2 = sp.kron(c_s, sp.eye(2), format="csr")
    free_col = {int(v): k for k, v in enumerate(free)}
    tol = 1e-9 * mesh.base_h

    fixed_x: set[int] = set()
    fixed_y: set[int] = set()

    def fix_vertex(v: int, fx: bool, fy: bool, where: str):
        col = free_col.get(int(v))
        if col is None:
            raise RuntimeError(f"Dirichlet constraint at {where} hits a hanging vertex")
        if fx:
            fixed_x.add(col)
        if fy:
            fixed_y.add(col)

    for side, lo, hi, fx, fy in bvp.dirichlet:
        for v in _side_vertices(mesh, side, lo, hi, tol):
            fix_vertex(v, fx, fy, side)
    for x, y, fx, fy in bvp.point_supports:
        v = mesh.nearest_vertex(x, y)
        cx, cy = mesh.vertex_coords[v]
        if abs(cx - x) > tol or abs(cy - y) > tol:
            raise ValueError(f"no mesh vertex at support point ({x}, {y})")
        fix_vertex(v, fx, fy, f"({x}, {y})")

    missing = []
    if not fixed_x:
        missing.append("x translation")
    if not fixed_y:
        missing.append("y translation")
    if len(fixed_x) + len(fixed_y) < 3:
        missing.append("rotation")
    if missing:
        raise ValueError(
            "singular system, unconstrained rigid-body directions: " + ", ".join(missing)
        )

    fixed = np.array(
        sorted({2 * c for c in fixed_x} | {2 * c + 1 for c in fixed_y}), dtype=np.int64
    )
    k_red = (c2.T @ k_full @ c2).tocsr()
    f_red = c2.T @ f_full
    keep = np.setdiff1d(np.arange(2 * len(free), dtype=np.int64), fixed)
    a_mat = k_red[keep][:, keep].tocsc()
    b_vec = f_red[keep]

    b_norm = float(np.linalg.norm(b_vec))
    if b_norm == 0.0:
        u_keep = np.zeros(len(keep))
        residual = 0.0
    else:
        try:
            lu = spla.splu(a_mat)
        except RuntimeError as exc:
            raise RuntimeError(f"stiffness factorization failed: {exc}") from exc
        u_keep = lu.solve(b_vec)
        u_keep += lu.solve(b_vec - a_mat @ u_keep)
        residual = float(np.linalg.norm(b_vec - a_mat @ u_keep)) / b_norm
        if not np.isfinite(residual) or residual > 1e-10:
            raise RuntimeError(f"elastic solve residual {residual:.3e} exceeds 1e-10")

    u_red = np.zeros(2 * len(free))
    u_red[keep] = u_keep
    u = c2 @ u_red
    compliance = float(f_full @ u)
    ue = u[edof]
    kernel = np.einsum("ij,jk,ik->i", ue, k0, ue)
    return SolveResult(u=u, compliance=compliance, kernel=kernel, residual=residual)


def compliance_sensitivity(result: SolveResult, modulus_derivative_field) -> np.ndarray:
    """d(compliance)/d(physical density) per cell: -dE/drho * u_e^T k0 u_e."""
    de = np.asarray(modulus_derivative_field, dtype=float)
    if de.shape != result.kernel.shape:
        raise ValueError("derivative field length does not match the solve")
    return -de * result.kernel
