import numpy as np
import pytest

from multitop.fem import (
    BvpSpec,
    assemble_solve,
    cantilever_bvp,
    compliance_sensitivity,
    element_stiffness,
    mbb_half_bvp,
)
from multitop.material import RHO_MIN, TargetSet, effective_modulus, modulus_derivative
from multitop.mesh import AdaptiveMesh, build_initial

RNG = np.random.default_rng(20260403)

# Dense reference for the 8x4 cantilever at rho=0.3, p=1 (independent assembly
# from the closed-form element matrix below, full numpy solve). Frozen value.
ORACLE_COMPLIANCE_8X4 = 122.35493434387101


def closed_form_ke(nu: float) -> np.ndarray:
    """Classic closed-form Q1 plane-stress element matrix, unit modulus."""
    kv = np.array(
        [
            0.5 - nu / 6,
            0.125 + nu / 8,
            -0.25 - nu / 12,
            -0.125 + 3 * nu / 8,
            -0.25 + nu / 12,
            -0.125 - nu / 8,
            nu / 6,
            0.125 - 3 * nu / 8,
        ]
    )
    idx = np.array(
        [
            [0, 1, 2, 3, 4, 5, 6, 7],
            [1, 0, 7, 6, 5, 4, 3, 2],
            [2, 7, 0, 5, 6, 3, 4, 1],
            [3, 6, 5, 0, 7, 2, 1, 4],
            [4, 5, 6, 7, 0, 1, 2, 3],
            [5, 4, 3, 2, 1, 0, 7, 6],
            [6, 3, 4, 1, 2, 7, 0, 5],
            [7, 2, 1, 4, 3, 6, 5, 0],
        ]
    )
    return kv[idx] / (1 - nu**2)


def dense_cantilever_compliance(nx, ny, width, height, rho, p):
    nu = 0.3
    ke = closed_form_ke(nu)
    e_mod = (1 - RHO_MIN) * rho**p + RHO_MIN
    nid = lambda ix, iy: ix * (ny + 1) + iy
    ndof = 2 * (nx + 1) * (ny + 1)
    k_mat = np.zeros((ndof, ndof))
    for ex in range(nx):
        for ey in range(ny):
            corners = [nid(ex, ey), nid(ex + 1, ey), nid(ex + 1, ey + 1), nid(ex, ey + 1)]
            dofs = np.array([d for c in corners for d in (2 * c, 2 * c + 1)])
            k_mat[np.ix_(dofs, dofs)] += e_mod * ke
    f_vec = np.zeros(ndof)
    h = height / ny
    seg_lo, seg_hi = 0.45 * height, 0.55 * height
    t = -1.0 / (seg_hi - seg_lo)
    for iy in range(ny):
        a, b = iy * h, (iy + 1) * h
        o1, o2 = max(a, seg_lo), min(b, seg_hi)
        if o2 <= o1:
            continue
        seg, mid = o2 - o1, 0.5 * (o1 + o2)
        f_vec[2 * nid(nx, iy) + 1] += t * seg * (b - mid) / h
        f_vec[2 * nid(nx, iy + 1) + 1] += t * seg * (mid - a) / h
    fixed = [d for iy in range(ny + 1) for d in (2 * nid(0, iy), 2 * nid(0, iy) + 1)]
    keep = np.setdiff1d(np.arange(ndof), fixed)
    u = np.zeros(ndof)
    u[keep] = np.linalg.solve(k_mat[np.ix_(keep, keep)], f_vec[keep])
    return float(f_vec @ u)


def hanging_mesh():
    cells = [
        (0, 0, 1),
        (0, 1, 0),
        (0, 1, 1),
        (1, 1, 0),
        (1, 0, 1),
        (1, 1, 1),
        (2, 0, 0),
        (2, 1, 0),
        (2, 0, 1),
        (2, 1, 1),
    ]
    return AdaptiveMesh(2, 2, 2.0, 2.0, cells, max_level=3)


def test_element_stiffness_matches_closed_form():
    for nu in (0.0, 0.25, 0.3):
        np.testing.assert_allclose(element_stiffness(nu), closed_form_ke(nu), atol=1e-12)


def test_cantilever_matches_dense_oracle():
    assert dense_cantilever_compliance(8, 4, 20.0, 10.0, 0.3, 1.0) == pytest.approx(
        ORACLE_COMPLIANCE_8X4, rel=1e-12
    )
    m = build_initial(8, 4, (20.0, 10.0), 0)
    e = effective_modulus(np.full(m.n_cells, 0.3), 1.0, TargetSet.uniform(1))
    res = assemble_solve(m, e, cantilever_bvp())
    assert res.compliance == pytest.approx(ORACLE_COMPLIANCE_8X4, rel=1e-9)
    assert res.residual <= 1e-10


def test_patch_test_with_hanging_nodes():
    m = hanging_mesh()
    bvp = BvpSpec(
        2.0,
        2.0,
        dirichlet=(("left", 0.0, 2.0, True, False),),
        point_supports=((0.0, 0.0, False, True),),
        tractions=(("right", 0.0, 2.0, 1.0, 0.0),),
    )
    res = assemble_solve(m, np.ones(m.n_cells), bvp)
    x, y = m.vertex_coords[:, 0], m.vertex_coords[:, 1]
    np.testing.assert_allclose(res.u[0::2], x, atol=1e-12)
    np.testing.assert_allclose(res.u[1::2], -0.3 * y, atol=1e-12)


def test_doubling_modulus_halves_compliance():
    m = build_initial(4, 2, (20.0, 10.0), 0)
    e = RNG.uniform(0.2, 1.0, m.n_cells)
    c1 = assemble_solve(m, e, cantilever_bvp()).compliance
    c2 = assemble_solve(m, 2.0 * e, cantilever_bvp()).compliance
    assert c2 == pytest.approx(0.5 * c1, rel=1e-12)


def test_work_identity():
    m = hanging_mesh()
    bvp = BvpSpec(
        2.0,
        2.0,
        dirichlet=(("left", 0.0, 2.0, True, True),),
        tractions=(("right", 0.5, 1.5, 0.3, -1.0),),
    )
    e = RNG.uniform(0.3, 1.0, m.n_cells)
    res = assemble_solve(m, e, bvp)
    strain_energy = float(np.dot(e, res.kernel))
    assert res.compliance == pytest.approx(strain_energy, rel=1e-10)
    assert res.compliance > 0.0


def test_compliance_monotone_in_modulus():
    m = build_initial(3, 2, (3.0, 2.0), 0)
    bvp = BvpSpec(
        3.0,
        2.0,
        dirichlet=(("left", 0.0, 2.0, True, True),),
        tractions=(("right", 0.0, 2.0, 0.0, -0.5),),
    )
    for _ in range(10):
        e = RNG.uniform(0.2, 0.8, m.n_cells)
        bump = RNG.uniform(0.0, 0.3, m.n_cells)
        c1 = assemble_solve(m, e, bvp).compliance
        c2 = assemble_solve(m, e + bump, bvp).compliance
        assert c2 <= c1 * (1 + 1e-12)


def test_sensitivity_zero_and_linear_cases():
    m = build_initial(4, 2, (20.0, 10.0), 0)
    rho = RNG.uniform(0.2, 0.9, m.n_cells)
    free = TargetSet.free()
    res = assemble_solve(m, effective_modulus(rho, 1.0, free), cantilever_bvp())
    np.testing.assert_array_equal(
        compliance_sensitivity(res, np.zeros(m.n_cells)), np.zeros(m.n_cells)
    )
    grad = compliance_sensitivity(res, modulus_derivative(rho, 1.0, free))
    np.testing.assert_allclose(grad, -(1 - RHO_MIN) * res.kernel, rtol=1e-12)
    assert np.all(grad <= 0.0)


def test_sensitivity_matches_finite_differences():
    m = build_initial(4, 2, (20.0, 10.0), 0)
    ts = TargetSet.uniform(1)
    p = 3.0
    rho = RNG.uniform(0.15, 0.85, m.n_cells)
    bvp = cantilever_bvp()
    res = assemble_solve(m, effective_modulus(rho, p, ts), bvp)
    grad = compliance_sensitivity(res, modulus_derivative(rho, p, ts))
    h = 1e-6
    for e in range(m.n_cells):
        up, dn = rho.copy(), rho.copy()
        up[e] += h
        dn[e] -= h
        fd = (
            assemble_solve(m, effective_modulus(up, p, ts), bvp).compliance
            - assemble_solve(m, effective_modulus(dn, p, ts), bvp).compliance
        ) / (2 * h)
        assert grad[e] == pytest.approx(fd, rel=1e-5)


def test_singular_system_names_missing_directions():
    m = build_initial(2, 2, (2.0, 2.0), 0)
    bvp = BvpSpec(2.0, 2.0, tractions=(("right", 0.0, 2.0, 1.0, 0.0),))
    with pytest.raises(ValueError, match="x translation.*y translation.*rotation"):
        assemble_solve(m, np.ones(m.n_cells), bvp)


def test_mbb_preset_smoke():
    m = build_initial(6, 2, (30.0, 10.0), 0)
    res = assemble_solve(m, np.full(m.n_cells, 0.5), mbb_half_bvp())
    assert res.compliance > 0.0
    # symmetry plane: u_x vanishes on the left edge
    left = np.where(np.abs(m.vertex_coords[:, 0]) < 1e-12)[0]
    np.testing.assert_allclose(res.u[2 * left], 0.0, atol=1e-14)


def test_rejects_nonpositive_modulus():
    m = build_initial(2, 1, (2.0, 1.0), 0)
    e = np.array([1.0, 0.0])
    with pytest.raises(ValueError, match="positive"):
        assemble_solve(m, e, cantilever_bvp())
