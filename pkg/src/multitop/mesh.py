"""Adaptive quadtree mesh with hanging-node constraints.

Cells are identified by (level, i, j) over a structured nx x ny grid of
level-0 squares. Vertex keys live on the integer lattice of the finest
admissible level, so coincident corners of differently sized cells share
keys exactly and no floating-point snapping is needed.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

# direction order: +x, -x, +y, -y
_DIRS = ((1, 0), (-1, 0), (0, 1), (0, -1))
# local corner order: (i,j), (i+1,j), (i+1,j+1), (i,j+1); edge endpoints per direction
_EDGE_CORNERS = {0: (1, 2), 1: (0, 3), 2: (3, 2), 3: (0, 1)}


def _facing_children(cell, d):
    """Children of `cell` adjacent to the edge it shares with a cell in direction -d."""
    level, i, j = cell
    if d == 0:
        return (level + 1, 2 * i, 2 * j), (level + 1, 2 * i, 2 * j + 1)
    if d == 1:
        return (level + 1, 2 * i + 1, 2 * j), (level + 1, 2 * i + 1, 2 * j + 1)
    if d == 2:
        return (level + 1, 2 * i, 2 * j), (level + 1, 2 * i + 1, 2 * j)
    return (level + 1, 2 * i, 2 * j + 1), (level + 1, 2 * i + 1, 2 * j + 1)


def _neighbor_leaves(leafset, nx, ny, max_level, cell, d):
    """Active cells sharing (part of) the d-edge of `cell`. Empty on the boundary."""
    level, i, j = cell
    di, dj = _DIRS[d]
    ni, nj = i + di, j + dj
    if not (0 <= ni < (nx << level) and 0 <= nj < (ny << level)):
        return ()
    cand = (level, ni, nj)
    if cand in leafset:
        return (cand,)
    cl, ci, cj = cand
    while cl > 0:
        cl -= 1
        ci >>= 1
        cj >>= 1
        if (cl, ci, cj) in leafset:
            return ((cl, ci, cj),)
    out = []
    stack = [cand]
    while stack:
        c = stack.pop()
        if c in leafset:
            out.append(c)
        elif c[0] < max_level:
            stack.extend(_facing_children(c, d))
        else:
            raise RuntimeError(f"leaf cover is inconsistent near cell {cell}")
    return tuple(out)


class AdaptiveMesh:
    """Immutable set of active quadtree cells plus derived geometry.

    Parameters
    ----------
    nx, ny : int
        Level-0 grid dimensions.
    width, height : float
        Domain extents; base cells must be square.
    cells : iterable of (level, i, j)
        Active cells. They must tile the domain exactly; this is trusted,
        not re-verified (the area-sum invariant catches gross errors).
    max_level, min_level : int
        Refinement bounds. max_level also fixes the vertex key lattice.
    """

    def __init__(self, nx, ny, width, height, cells, max_level=5, min_level=0):
        self.nx = int(nx)
        self.ny = int(ny)
        self.width = float(width)
        self.height = float(height)
        self.max_level = int(max_level)
        self.min_level = int(min_level)
        self.base_h = self.width / self.nx
        self.cells = tuple(sorted(cells))
        self._pos = {c: k for k, c in enumerate(self.cells)}
        if len(self._pos) != len(self.cells):
            raise ValueError("duplicate cells")
        self._leafset = frozenset(self.cells)
        self._cmat = None
        self._build_geometry()
        self._build_constraints()

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_coords)

    @property
    def domain_area(self) -> float:
        return self.width * self.height

    def _build_geometry(self):
        n = len(self.cells)
        lv = np.fromiter((c[0] for c in self.cells), dtype=np.int64, count=n)
        ii = np.fromiter((c[1] for c in self.cells), dtype=np.int64, count=n)
        jj = np.fromiter((c[2] for c in self.cells), dtype=np.int64, count=n)
        self.levels = lv
        self.sizes = self.base_h / np.exp2(lv)
        self.areas = self.sizes**2
        scale = np.int64(1) << (self.max_level - lv)
        x0 = ii * scale
        y0 = jj * scale
        h_min = self.base_h / (1 << self.max_level)
        self.centroids = np.column_stack(((x0 + 0.5 * scale) * h_min, (y0 + 0.5 * scale) * h_min))
        # corner keys, counterclockwise, encoded on one integer axis
        stride = np.int64((self.ny << self.max_level) + 1)
        kx = np.column_stack((x0, x0 + scale, x0 + scale, x0))
        ky = np.column_stack((y0, y0, y0 + scale, y0 + scale))
        enc = kx * stride + ky
        keys, conn = np.unique(enc, return_inverse=True)
        self.conn = conn.reshape(n, 4).astype(np.int64)
        self.vertex_coords = np.column_stack((keys // stride * h_min, keys % stride * h_min))
        self._stride = stride
        self._vid = {int(k): idx for idx, k in enumerate(keys)}
        self._keys = keys

    def _build_constraints(self):
        cons = {}
        for c in self.cells:
            level = c[0]
            k = self._pos[c]
            for d in range(4):
                nbs = self.neighbors(c, d)
                if not nbs or not any(nb[0] > level for nb in nbs):
                    continue
                ea, eb = _EDGE_CORNERS[d]
                va, vb = int(self.conn[k, ea]), int(self.conn[k, eb])
                mid = (int(self._keys[va]) + int(self._keys[vb])) // 2
                cons[self._vid[mid]] = ((va, 0.5), (vb, 0.5))
        self.constraints = cons

    def neighbors(self, cell, direction=None):
        """Edge-adjacent active cells, for one direction or all four."""
        if direction is not None:
            return _neighbor_leaves(self._leafset, self.nx, self.ny, self.max_level, cell, direction)
        out = []
        for d in range(4):
            out.extend(_neighbor_leaves(self._leafset, self.nx, self.ny, self.max_level, cell, d))
        return tuple(out)

    def cell_index(self, cell) -> int:
        return self._pos[cell]

    def validate_balance(self) -> bool:
        """True iff edge-adjacent cells differ by at most one level."""
        for c in self.cells:
            for nb in self.neighbors(c):
                if abs(nb[0] - c[0]) > 1:
                    return False
        return True

    def constraint_matrix(self):
        """(C, free_vertices): sparse map from free-vertex values to all vertices.

        Free vertices get identity rows; hanging rows carry the resolved
        interpolation weights (masters of hanging vertices are themselves
        free on 2:1 balanced meshes, but chains are resolved regardless).
        """
        if self._cmat is not None:
            return self._cmat
        cons = self.constraints
        free = np.array([v for v in range(self.n_vertices) if v not in cons], dtype=np.int64)
        col = {int(v): k for k, v in enumerate(free)}
        memo: dict[int, dict[int, float]] = {}

        def resolve(v):
            if v not in cons:
                return {v: 1.0}
            got = memo.get(v)
            if got is None:
                got = {}
                for m, w in cons[v]:
                    for fv, fw in resolve(m).items():
                        got[fv] = got.get(fv, 0.0) + w * fw
                memo[v] = got
            return got

        rows, cols, data = [], [], []
        for v in range(self.n_vertices):
            for fv, w in resolve(v).items():
                rows.append(v)
                cols.append(col[fv])
                data.append(w)
        c_mat = sp.csr_matrix(
            (data, (rows, cols)), shape=(self.n_vertices, len(free))
        )
        self._cmat = (c_mat, free)
        return self._cmat

    def edge_faces(self, side: str):
        """Boundary faces on one domain side.

        Returns a list of (cell index, vertex id a, vertex id b, lo, hi)
        where [lo, hi] is the face span along the edge coordinate
        (y for left/right, x for bottom/top) and a/b order matches lo/hi.
        """
        if side not in ("left", "right", "bottom", "top"):
            raise ValueError(f"unknown side {side!r}")
        out = []
        for k, (level, i, j) in enumerate(self.cells):
            if side == "left" and i == 0:
                ca, cb = 0, 3
            elif side == "right" and i == (self.nx << level) - 1:
                ca, cb = 1, 2
            elif side == "bottom" and j == 0:
                ca, cb = 0, 1
            elif side == "top" and j == (self.ny << level) - 1:
                ca, cb = 3, 2
            else:
                continue
            va, vb = int(self.conn[k, ca]), int(self.conn[k, cb])
            axis = 1 if side in ("left", "right") else 0
            out.append((k, va, vb, self.vertex_coords[va, axis], self.vertex_coords[vb, axis]))
        return out

    def nearest_vertex(self, x: float, y: float) -> int:
        d2 = (self.vertex_coords[:, 0] - x) ** 2 + (self.vertex_coords[:, 1] - y) ** 2
        return int(np.argmin(d2))

    def __repr__(self) -> str:
        return (
            f"AdaptiveMesh({self.nx}x{self.ny} base, {self.n_cells} cells, "
            f"levels {self.levels.min()}..{self.levels.max()})"
        )


def build_initial(nx, ny, extents, uniform_refines=0, max_level=5, min_level=0) -> AdaptiveMesh:
    """Structured starting mesh: nx*2^r x ny*2^r equal squares at level r."""
    width, height = extents
    nx, ny = int(nx), int(ny)
    r = int(uniform_refines)
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    if r < 0:
        raise ValueError("uniform_refines must be >= 0")
    if r > max_level:
        raise ValueError("uniform_refines exceeds max_level")
    hx, hy = width / nx, height / ny
    if abs(hx - hy) > 1e-12 * abs(hx):
        raise ValueError(
            f"cells must be square: extents {extents} with {nx}x{ny} base give {hx} x {hy}"
        )
    cells = [(r, i, j) for i in range(nx << r) for j in range(ny << r)]
    return AdaptiveMesh(nx, ny, width, height, cells, max_level=max_level, min_level=min_level)


def max_density_jump(mesh: AdaptiveMesh, densities, cell) -> float:
    """Max absolute density difference to any edge-sharing cell (0 on boundary-only edges)."""
    k = mesh.cell_index(cell)
    rho = densities[k]
    best = 0.0
    for nb in mesh.neighbors(cell):
        best = max(best, abs(rho - densities[mesh.cell_index(nb)]))
    return best


def _all_jumps(leafset, nx, ny, max_level, values):
    jumps = {}
    for c in leafset:
        v = values[c]
        m = 0.0
        for d in range(4):
            for nb in _neighbor_leaves(leafset, nx, ny, max_level, c, d):
                diff = abs(v - values[nb])
                if diff > m:
                    m = diff
        jumps[c] = m
    return jumps


def adapt(mesh: AdaptiveMesh, densities, delta_rho_hat, c_r, c_c, marker_densities=None):
    """Density-jump driven refinement and coarsening.

    Cells whose jump in the marker field reaches c_r*delta_rho_hat are
    split until the criterion saturates at max_level (children inherit
    values, so an interface keeps triggering on its own children); 2:1
    balance is maintained by forced splits that ignore the criterion.
    Sibling quadruples whose jumps all stay below c_c*delta_rho_hat merge
    cascade-style, skipping merges that would break balance. Returns the
    new mesh and the transferred density field.
    """
    if delta_rho_hat <= 0:
        raise ValueError("delta_rho_hat must be positive")
    if not c_c < c_r:
        raise ValueError("c_c must be smaller than c_r")
    nx, ny, max_l, min_l = mesh.nx, mesh.ny, mesh.max_level, mesh.min_level
    dens = {c: float(densities[k]) for k, c in enumerate(mesh.cells)}
    src = densities if marker_densities is None else marker_densities
    mark = {c: float(src[k]) for k, c in enumerate(mesh.cells)}
    leafset = set(mesh.cells)

    def split(cell):
        level, i, j = cell
        leafset.remove(cell)
        dv = dens.pop(cell)
        mv = mark.pop(cell)
        for u in (0, 1):
            for v in (0, 1):
                ch = (level + 1, 2 * i + u, 2 * j + v)
                leafset.add(ch)
                dens[ch] = dv
                mark[ch] = mv

    r_thresh = c_r * delta_rho_hat
    c_thresh = c_c * delta_rho_hat
    while True:
        jumps = _all_jumps(leafset, nx, ny, max_l, mark)
        queue = [c for c in leafset if c[0] < max_l and jumps[c] >= r_thresh]
        if not queue:
            break
        while queue:
            c = queue.pop()
            if c not in leafset or c[0] >= max_l:
                continue
            ripple = [
                nb
                for d in range(4)
                for nb in _neighbor_leaves(leafset, nx, ny, max_l, c, d)
                if nb[0] < c[0]
            ]
            split(c)
            queue.extend(ripple)

    while True:
        jumps = _all_jumps(leafset, nx, ny, max_l, mark)
        groups: dict[tuple, list] = {}
        for c in leafset:
            if c[0] > min_l:
                groups.setdefault((c[0] - 1, c[1] >> 1, c[2] >> 1), []).append(c)
        todo = []
        for parent, kids in groups.items():
            if len(kids) != 4:
                continue
            if any(jumps[k] > c_thresh for k in kids):
                continue
            # conservative balance guard against the pre-merge leaves
            feasible = True
            for k in kids:
                for d in range(4):
                    for nb in _neighbor_leaves(leafset, nx, ny, max_l, k, d):
                        if nb[0] > parent[0] + 1:
                            feasible = False
            if feasible:
                todo.append((parent, kids))
        if not todo:
            break
        for parent, kids in todo:
            dv = sum(dens.pop(k) for k in kids) / 4.0
            mv = sum(mark.pop(k) for k in kids) / 4.0
            for k in kids:
                leafset.remove(k)
            leafset.add(parent)
            dens[parent] = dv
            mark[parent] = mv

    new_mesh = AdaptiveMesh(
        nx, ny, mesh.width, mesh.height, leafset, max_level=max_l, min_level=min_l
    )
    new_density = np.array([dens[c] for c in new_mesh.cells])
    return new_mesh, new_density
