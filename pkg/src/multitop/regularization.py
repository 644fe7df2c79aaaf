"""Helmholtz density filter and multilevel Heaviside projection.

The filter solves -r_f^2 lap(rho_t) + rho_t = rho with natural boundary
conditions on the nodal Q1 space of the current mesh, element-wise sources,
and a lumped mass matrix; the result is sampled back at cell centroids.
Lumping makes the operator an M-matrix, so the discrete solution respects
the input bounds, and the constant-test-function argument makes the
centroid-resampled mass exactly equal to the input mass.
"""

from __future__ import annotations

from dataclasses import dataclass
from weakref import WeakKeyDictionary

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import AdaptiveMesh


@dataclass(frozen=True)
class FilterConfig:
    r: float = 0.375

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("filter radius must be positive")

    @property
    def r_helmholtz(self) -> float:
        """Helmholtz length scale equivalent to a convolution filter of radius r."""
        return self.r / (2.0 * np.sqrt(3.0))


@dataclass(frozen=True)
class ProjectionConfig:
    beta: float
    n: int

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.n < 1:
            raise ValueError("level count must be >= 1")

    @property
    def beta_n(self) -> float:
        return self.beta * self.n

    @property
    def thresholds(self) -> np.ndarray:
        return (np.arange(1, self.n + 1) - 0.5) / self.n


# Q1 Laplacian of a square cell; like the elastic block it is size-independent
_K_LAP = np.array(
    [
        [4.0, -1.0, -2.0, -1.0],
        [-1.0, 4.0, -1.0, -2.0],
        [-2.0, -1.0, 4.0, -1.0],
        [-1.0, -2.0, -1.0, 4.0],
    ]
) / 6.0


class FilterOperator:
    """Factorized filter bound to one mesh; apply() is linear and unclamped."""

    def __init__(self, mesh: AdaptiveMesh, cfg: FilterConfig):
        self.mesh = mesh
        self.cfg = cfg
        n, nv = mesh.n_cells, mesh.n_vertices
        conn = mesh.conn
        cell_of = np.repeat(np.arange(n), 4)
        quarter_area = np.repeat(mesh.areas / 4.0, 4)
        # cell source -> nodal load, and nodal field -> centroid samples
        self._scatter = sp.csr_matrix(
            (quarter_area, (conn.ravel(), cell_of)), shape=(nv, n)
        )
        self._sample = sp.csr_matrix(
            (np.full(4 * n, 0.25), (cell_of, conn.ravel())), shape=(n, nv)
        )
        rows = np.repeat(conn, 4, axis=1).ravel()
        cols = np.tile(conn, (1, 4)).ravel()
        k_lap = sp.csr_matrix(
            (np.tile(_K_LAP.ravel(), n), (rows, cols)), shape=(nv, nv)
        )
        m_lump = sp.diags(np.asarray(self._scatter.sum(axis=1)).ravel())
        a_full = cfg.r_helmholtz**2 * k_lap + m_lump
        c_s, _ = mesh.constraint_matrix()
        self._c = c_s
        self._lu = spla.splu((c_s.T @ a_full @ c_s).tocsc())

    def apply(self, cell_values: np.ndarray) -> np.ndarray:
        b = self._c.T @ (self._scatter @ cell_values)
        nodal = self._c @ self._lu.solve(b)
        return self._sample @ nodal

    def nodal(self, cell_values: np.ndarray) -> np.ndarray:
        """Filtered field on vertices (for field export)."""
        b = self._c.T @ (self._scatter @ cell_values)
        return self._c @ self._lu.solve(b)


_OPERATORS: WeakKeyDictionary = WeakKeyDictionary()


def filter_operator(mesh: AdaptiveMesh, cfg: FilterConfig) -> FilterOperator:
    per_mesh = _OPERATORS.setdefault(mesh, {})
    op = per_mesh.get(cfg.r)
    if op is None:
        op = FilterOperator(mesh, cfg)
        per_mesh[cfg.r] = op
    return op


def pde_filter(mesh: AdaptiveMesh, design, cfg: FilterConfig) -> np.ndarray:
    """Filtered density field, clamped against numerical over/undershoot."""
    out = filter_operator(mesh, cfg).apply(np.asarray(design, dtype=float))
    return np.clip(out, 0.0, 1.0)


def filter_adjoint(mesh: AdaptiveMesh, cell_sensitivities, cfg: FilterConfig) -> np.ndarray:
    """Back-propagate d(f)/d(filtered) to d(f)/d(design).

    The filter matrix is self-adjoint in the area-weighted inner product,
    so the adjoint is the same solve conjugated by the cell areas; on a
    uniform mesh this reduces to the forward filter.
    """
    g = np.asarray(cell_sensitivities, dtype=float)
    a = mesh.areas
    return a * filter_operator(mesh, cfg).apply(g / a)


def _h_tanh(rho, beta, eta):
    num = np.tanh(beta * eta) + np.tanh(beta * (rho - eta))
    den = np.tanh(beta * eta) + np.tanh(beta * (1.0 - eta))
    return num / den


def _sech2(x):
    e = np.exp(-2.0 * np.abs(x))
    return 4.0 * e / (1.0 + e) ** 2


def project_multilevel(rho_tilde, cfg: ProjectionConfig):
    """Mean of n smoothed Heaviside steps at thresholds (i-0.5)/n.

    The per-step sharpness beta*n keeps the transition width proportional
    to the interval size; endpoints 0 and 1 are fixed exactly.
    """
    rho = np.asarray(rho_tilde, dtype=float)
    bn = cfg.beta_n
    acc = np.zeros_like(rho)
    for eta in cfg.thresholds:
        acc += _h_tanh(rho, bn, eta)
    return acc / cfg.n


def project_derivative(rho_tilde, cfg: ProjectionConfig):
    """d(project_multilevel)/d(rho_tilde), strictly positive on (0, 1)."""
    rho = np.asarray(rho_tilde, dtype=float)
    bn = cfg.beta_n
    acc = np.zeros_like(rho)
    for eta in cfg.thresholds:
        den = np.tanh(bn * eta) + np.tanh(bn * (1.0 - eta))
        acc += bn * _sech2(bn * (rho - eta)) / den
    return acc / cfg.n
