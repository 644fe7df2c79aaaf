import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multitop.mesh import adapt, build_initial
from multitop.regularization import (
    FilterConfig,
    ProjectionConfig,
    filter_adjoint,
    filter_operator,
    pde_filter,
    project_derivative,
    project_multilevel,
)

RNG = np.random.default_rng(20260404)
CFG = FilterConfig()


def adapted_mesh():
    m = build_initial(4, 2, (4.0, 2.0), 1, max_level=4)
    rho = (m.centroids[:, 0] > 1.9).astype(float)
    for _ in range(3):
        m, rho = adapt(m, rho, 1.0, 0.2, 1e-3)
    assert len(m.constraints) > 0
    return m


def test_default_radius_and_length_scale():
    assert CFG.r == 0.375
    assert CFG.r_helmholtz == pytest.approx(0.375 / (2 * np.sqrt(3.0)))


def test_constant_field_is_fixed_point():
    for m in (build_initial(8, 4, (8.0, 4.0), 0), adapted_mesh()):
        rho = np.full(m.n_cells, 0.37)
        np.testing.assert_allclose(pde_filter(m, rho, CFG), 0.37, atol=1e-13)


def test_mass_conservation():
    for m in (build_initial(8, 4, (8.0, 4.0), 0), adapted_mesh()):
        for _ in range(5):
            rho = RNG.random(m.n_cells)
            out = pde_filter(m, rho, CFG)
            assert abs(np.dot(out, m.areas) - np.dot(rho, m.areas)) < 1e-10


def test_single_solid_cell_smoothed_bump():
    m = build_initial(16, 16, (16.0, 16.0), 0)
    rho = np.zeros(m.n_cells)
    hot = m.n_cells // 2 + 8
    rho[hot] = 1.0
    out = pde_filter(m, rho, CFG)
    assert abs(np.dot(out, m.areas) - np.dot(rho, m.areas)) < 1e-10
    assert out[hot] < 1.0
    assert out.max() == out[hot]
    assert np.count_nonzero(out > 1e-6) > 1


def test_maximum_principle():
    for m in (build_initial(8, 4, (8.0, 4.0), 0), adapted_mesh()):
        op = filter_operator(m, CFG)
        for _ in range(10):
            rho = (RNG.random(m.n_cells) > 0.5).astype(float)
            out = op.apply(rho)
            assert out.min() >= -1e-10 and out.max() <= 1.0 + 1e-10
            mid = RNG.uniform(0.3, 0.7, m.n_cells)
            out = op.apply(mid)
            assert out.min() >= mid.min() - 1e-10 and out.max() <= mid.max() + 1e-10


def test_filter_linearity():
    m = adapted_mesh()
    op = filter_operator(m, CFG)
    a = RNG.standard_normal(m.n_cells)
    b = RNG.standard_normal(m.n_cells)
    np.testing.assert_allclose(
        op.apply(2.0 * a - 0.5 * b), 2.0 * op.apply(a) - 0.5 * op.apply(b), atol=1e-12
    )


def test_vanishing_radius_approaches_identity():
    m = build_initial(32, 32, (1.0, 1.0), 0)
    rho = 0.4 + 0.05 * m.centroids[:, 0]
    out = pde_filter(m, rho, FilterConfig(r=1e-4 / 32))
    assert np.abs(out - rho).max() < 1e-3


def test_adjoint_trivial_fields():
    m = build_initial(8, 4, (8.0, 4.0), 0)
    np.testing.assert_array_equal(filter_adjoint(m, np.zeros(m.n_cells), CFG), 0.0)
    np.testing.assert_allclose(filter_adjoint(m, np.full(m.n_cells, 2.5), CFG), 2.5, atol=1e-12)
    # on a mixed-size mesh the adjoint fixes the area vector instead
    ma = adapted_mesh()
    np.testing.assert_allclose(filter_adjoint(ma, ma.areas, CFG), ma.areas, atol=1e-12)


def test_adjoint_inner_product_identity():
    for m in (build_initial(8, 4, (8.0, 4.0), 0), adapted_mesh()):
        for _ in range(10):
            a = RNG.random(m.n_cells)
            b = RNG.standard_normal(m.n_cells)
            lhs = float(a @ filter_adjoint(m, b, CFG))
            rhs = float(pde_filter(m, a, CFG) @ b)
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs), abs(rhs))


def test_forward_self_adjoint_in_area_inner_product():
    m = adapted_mesh()
    op = filter_operator(m, CFG)
    w = m.areas
    for _ in range(5):
        x = RNG.standard_normal(m.n_cells)
        y = RNG.standard_normal(m.n_cells)
        lhs = float(x @ (w * op.apply(y)))
        rhs = float(op.apply(x) @ (w * y))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs), abs(rhs))


def test_projection_endpoints_exact():
    for n in (1, 2, 3, 8):
        for beta in (0.1, 5.0, 50.0):
            cfg = ProjectionConfig(beta=beta, n=n)
            out = project_multilevel(np.array([0.0, 1.0]), cfg)
            assert out[0] == 0.0
            assert out[1] == 1.0


def test_projection_midpoint_symmetry_n1():
    for beta in (0.5, 8.0, 100.0):
        cfg = ProjectionConfig(beta=beta, n=1)
        assert project_multilevel(np.array([0.5]), cfg)[0] == pytest.approx(0.5, abs=1e-15)


def test_projection_two_level_sharp():
    cfg = ProjectionConfig(beta=100.0, n=2)
    val = project_multilevel(np.array([0.5, 0.2, 0.8]), cfg)
    assert val[0] == pytest.approx(0.5, abs=1e-6)
    assert val[1] < 0.01
    assert val[2] > 0.99


def test_projection_reduces_to_single_tanh_step():
    beta = 7.3
    cfg = ProjectionConfig(beta=beta, n=1)
    rho = np.linspace(0.0, 1.0, 1001)
    expected = (np.tanh(beta * 0.5) + np.tanh(beta * (rho - 0.5))) / (
        np.tanh(beta * 0.5) + np.tanh(beta * 0.5)
    )
    np.testing.assert_allclose(project_multilevel(rho, cfg), expected, atol=1e-15)


def test_projection_plateaus_at_targets():
    cfg = ProjectionConfig(beta=50.0, n=3)
    for i in range(4):
        for s in (-1.0, 1.0):
            rho = i / 3 + s / 12
            if 0.0 <= rho <= 1.0:
                assert abs(project_multilevel(np.array([rho]), cfg)[0] - i / 3) <= 10 / 50.0


def test_projection_strictly_monotone_moderate_beta():
    rho = np.linspace(0.0, 1.0, 2001)
    for n in (1, 3, 8):
        out = project_multilevel(rho, ProjectionConfig(beta=2.0, n=n))
        assert np.all(np.diff(out) > 0.0)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(min_value=1, max_value=8),
    st.floats(min_value=0.05, max_value=60.0),
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=1e-6, max_value=1.0),
)
def test_projection_monotone_property(n, beta, x, step):
    y = min(1.0, x + step)
    cfg = ProjectionConfig(beta=beta, n=n)
    hx, hy = project_multilevel(np.array([x, y]), cfg)
    assert hy >= hx


def test_projection_derivative_positive_and_matches_fd():
    cfg = ProjectionConfig(beta=8.0, n=3)
    rho = RNG.uniform(0.02, 0.98, 100)
    d = project_derivative(rho, cfg)
    assert np.all(d > 0.0)
    h = 1e-5
    fd = (project_multilevel(rho + h, cfg) - project_multilevel(rho - h, cfg)) / (2 * h)
    np.testing.assert_allclose(d, fd, rtol=1e-7)
    # stays strictly positive deep inside the beta_max plateaus
    hard = ProjectionConfig(beta=50.0, n=8)
    assert np.all(project_derivative(np.array([1e-3, 0.5, 1 - 1e-3]), hard) > 0.0)


def test_projection_derivative_limits():
    soft = ProjectionConfig(beta=1e-8, n=2)
    d = project_derivative(np.linspace(0.01, 0.99, 21), soft)
    np.testing.assert_allclose(d, 1.0, atol=1e-6)
    peak = ProjectionConfig(beta=50.0, n=1)
    rho = np.linspace(0.0, 1.0, 401)
    d = project_derivative(rho, peak)
    assert np.argmax(d) == 200
