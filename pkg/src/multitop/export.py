"""Manufacturing export: per-level contours, 2D layer files, extruded STL.

The physical density field is resampled onto the finest active raster and
quantized to thickness levels at the projection thresholds. Contours
follow the raster cell edges exactly, so level areas are exact and the
levels nest by construction. The 3D stack extrudes level k symmetrically
to z in [-k*t1/2, +k*t1/2] as voxel columns with unit-slab side walls,
which keeps the triangulation watertight on a shared lattice.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import shapely
from shapely.geometry import MultiPolygon, Point, Polygon

from .material import TargetSet


@dataclass
class SheetStack:
    """Nested per-level regions plus the raster they came from.

    levels[i-1] holds the level-i region {rho_bar >= (i-0.5)/n} as a
    MultiPolygon in domain length units. raster stores the per-fine-cell
    level count (0..n) on a (nx_fine, ny_fine) grid of pitch cell.
    """

    levels: tuple
    width: float
    height: float
    t_total: float
    raster: np.ndarray
    cell: float

    @property
    def n(self) -> int:
        return len(self.levels)

    @property
    def t1(self) -> float:
        return self.t_total / self.n

    @property
    def sheet_thickness(self) -> float:
        return 0.5 * self.t1


def _fix_pinches(k: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Remove diagonal 2x2 patterns from every level slab of the k-field.

    A diagonal pair touching only at a corner is ambiguous for contouring
    and breaks watertightness of the extrusion. The void cell with the
    larger underlying density is promoted; promotions can cascade to
    lower slabs, so the scan repeats until clean.
    """
    k = k.copy()
    top = int(k.max(initial=0))
    dirty = True
    while dirty:
        dirty = False
        for lvl in range(1, top + 1):
            while True:
                b = k >= lvl
                a = b[:-1, :-1]
                c = b[1:, 1:]
                d = b[1:, :-1]
                e = b[:-1, 1:]
                diag1 = a & c & ~d & ~e
                diag2 = d & e & ~a & ~c
                if not diag1.any() and not diag2.any():
                    break
                dirty = True
                for i, j in np.argwhere(diag1):
                    lo = (i + 1, j) if weight[i + 1, j] >= weight[i, j + 1] \
                        else (i, j + 1)
                    k[lo] = lvl
                for i, j in np.argwhere(diag2):
                    lo = (i, j) if weight[i, j] >= weight[i + 1, j + 1] \
                        else (i + 1, j + 1)
                    k[lo] = lvl
    return k


def _simplify_ring(ring):
    out = []
    n = len(ring)
    for t in range(n):
        a, b, c = ring[t - 1], ring[t], ring[(t + 1) % n]
        if (b[0] - a[0], b[1] - a[1]) != (c[0] - b[0], c[1] - b[1]):
            out.append(b)
    return out


def _boundary_rings(solid: np.ndarray):
    """Closed lattice rings of a binary raster, material on the left.

    Outer boundaries come out counterclockwise, holes clockwise. Requires
    a pinch-free raster so every lattice point has at most one outgoing
    boundary edge.
    """
    pad = np.zeros((solid.shape[0] + 2, solid.shape[1] + 2), dtype=bool)
    pad[1:-1, 1:-1] = solid
    core = pad[1:-1, 1:-1]
    nxt = {}
    for i, j in np.argwhere(core & ~pad[1:-1, :-2]):
        nxt[(i, j)] = (i + 1, j)
    for i, j in np.argwhere(core & ~pad[1:-1, 2:]):
        nxt[(i + 1, j + 1)] = (i, j + 1)
    for i, j in np.argwhere(core & ~pad[:-2, 1:-1]):
        nxt[(i, j + 1)] = (i, j)
    for i, j in np.argwhere(core & ~pad[2:, 1:-1]):
        nxt[(i + 1, j)] = (i + 1, j + 1)
    rings = []
    while nxt:
        start = next(iter(nxt))
        ring = [start]
        cur = nxt.pop(start)
        while cur != start:
            ring.append(cur)
            cur = nxt.pop(cur)
        rings.append(_simplify_ring(ring))
    return rings


def _signed_area(coords) -> float:
    x = np.array([p[0] for p in coords], dtype=float)
    y = np.array([p[1] for p in coords], dtype=float)
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _assemble_polygons(rings, cell: float) -> MultiPolygon:
    shells = []
    holes = []
    for ring in rings:
        coords = [(p[0] * cell, p[1] * cell) for p in ring]
        area = _signed_area(coords)
        if area > 0:
            shells.append((area, coords))
        else:
            holes.append(coords)
    if not shells:
        return MultiPolygon([])
    shells.sort(key=lambda t: t[0])
    shell_polys = [Polygon(c) for _, c in shells]
    shell_holes = [[] for _ in shells]
    for hole in holes:
        probe = Point(hole[0])
        for idx, sp in enumerate(shell_polys):
            if sp.contains(probe):
                shell_holes[idx].append(hole)
                break
        else:
            raise RuntimeError("hole ring without a containing shell")
    return MultiPolygon(
        [Polygon(c, holes=h) for (_, c), h in zip(shells, shell_holes)])


def level_raster(mesh, physical, targets: TargetSet) -> tuple[np.ndarray, float]:
    """Quantized thickness-level field on the finest active raster."""
    if targets.is_free:
        raise ValueError("free-thickness fields have no discrete levels")
    lf = int(mesh.levels.max())
    nxf, nyf = mesh.nx << lf, mesh.ny << lf
    raster = np.empty((nxf, nyf))
    for idx, (level, i, j) in enumerate(mesh.cells):
        s = 1 << (lf - level)
        raster[i * s:(i + 1) * s, j * s:(j + 1) * s] = physical[idx]
    thresholds = (np.arange(1, targets.n + 1) - 0.5) / targets.n
    k = (raster[:, :, None] >= thresholds).sum(axis=2).astype(np.int16)
    k = _fix_pinches(k, raster)
    return k, mesh.base_h / (1 << lf)


def extract_contours(mesh, physical, targets: TargetSet,
                     t_total: float = 1.0) -> SheetStack:
    """Nested level contours of a converged physical density field."""
    k, cell = level_raster(mesh, physical, targets)
    levels = []
    for lvl in range(1, targets.n + 1):
        rings = _boundary_rings(k >= lvl)
        levels.append(_assemble_polygons(rings, cell))
    return SheetStack(levels=tuple(levels), width=mesh.width,
                      height=mesh.height, t_total=float(t_total),
                      raster=k, cell=cell)


def stack_from_polygons(levels, width: float, height: float, t_total: float,
                        resolution: tuple[int, int]) -> SheetStack:
    """Build a stack from explicit polygons by rasterizing cell centroids."""
    _validate_levels(levels)
    nxf, nyf = resolution
    cell_x = width / nxf
    cell_y = height / nyf
    if abs(cell_x - cell_y) > 1e-12 * cell_x:
        raise ValueError("resolution must give square raster cells")
    xs = (np.arange(nxf) + 0.5) * cell_x
    ys = (np.arange(nyf) + 0.5) * cell_y
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    k = np.zeros((nxf, nyf), dtype=np.int16)
    mps = [MultiPolygon([g]) if isinstance(g, Polygon) else g for g in levels]
    for mp in mps:
        if not mp.is_empty:
            k += shapely.contains_xy(mp, gx, gy).astype(np.int16)
    k = _fix_pinches(k, k.astype(float))
    return SheetStack(levels=tuple(mps), width=width, height=height,
                      t_total=float(t_total), raster=k, cell=cell_x)


def _validate_levels(levels) -> None:
    for i, geom in enumerate(levels, start=1):
        polys = [geom] if isinstance(geom, Polygon) else list(geom.geoms)
        for j, poly in enumerate(polys):
            if not poly.is_valid:
                raise ValueError(
                    f"level {i} polygon {j} is self-intersecting")


def _svg_path(poly: Polygon, height_mm: float, scale: float) -> str:
    parts = []
    for ring in [poly.exterior, *poly.interiors]:
        pts = [(x * scale, height_mm - y * scale) for x, y in ring.coords]
        head = f"M {pts[0][0]:.6g} {pts[0][1]:.6g}"
        body = " ".join(f"L {x:.6g} {y:.6g}" for x, y in pts[1:-1])
        parts.append(f"{head} {body} Z")
    return " ".join(parts)


def _write_svg(path, mp: MultiPolygon, width: float, height: float,
               scale: float) -> None:
    w_mm, h_mm = width * scale, height * scale
    body = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_mm:.6g}mm" '
        f'height="{h_mm:.6g}mm" viewBox="0 0 {w_mm:.6g} {h_mm:.6g}">'
    ]
    for poly in mp.geoms:
        body.append(
            f'  <path d="{_svg_path(poly, h_mm, scale)}" fill="black" '
            f'fill-rule="evenodd" stroke="none"/>')
    body.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(body) + "\n")


def _dxf_rings(mp: MultiPolygon):
    for poly in mp.geoms:
        yield from [poly.exterior, *poly.interiors]


def _write_dxf(path, mp: MultiPolygon, layer: str, scale: float) -> None:
    lines = ["0", "SECTION", "2", "HEADER",
             "9", "$ACADVER", "1", "AC1014",
             "9", "$INSUNITS", "70", "4",
             "0", "ENDSEC",
             "0", "SECTION", "2", "ENTITIES"]
    for ring in _dxf_rings(mp):
        pts = list(ring.coords)[:-1]
        lines += ["0", "LWPOLYLINE", "8", layer,
                  "90", str(len(pts)), "70", "1"]
        for x, y in pts:
            lines += ["10", f"{x * scale:.9g}", "20", f"{y * scale:.9g}"]
    lines += ["0", "ENDSEC", "0", "EOF"]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_layers(stack: SheetStack, out_dir=".", scale: float = 1.0) -> list:
    """One SVG and one DXF per level; coordinates in mm after scaling.

    Filenames carry the level index and the per-side sheet thickness
    0.5*t1. Empty levels still produce files, with a warning.
    """
    os.makedirs(out_dir, exist_ok=True)
    label = f"{stack.sheet_thickness:.2f}"
    paths = []
    for idx, mp in enumerate(stack.levels, start=1):
        if mp.is_empty:
            warnings.warn(f"level {idx} region is empty", stacklevel=2)
        base = f"level_{idx}_sheet_{label}mm"
        svg = os.path.join(out_dir, base + ".svg")
        _write_svg(svg, mp, stack.width, stack.height, scale)
        dxf = os.path.join(out_dir, base + ".dxf")
        _write_dxf(dxf, mp, f"level_{idx}", scale)
        paths += [svg, dxf]
    return paths


def _quad(v0, v1, v2, v3):
    return (v0, v1, v2), (v0, v2, v3)


def _mirror_quad(quad):
    # reflection in z flips handedness; reversing restores consistent
    # orientation, and keeping the start vertex keeps the split diagonal
    # the mirror image of the original's
    m = [(x, y, -z) for x, y, z in quad]
    return m[0], m[3], m[2], m[1]


def _column_triangles(k: np.ndarray, cell: float, a: float):
    """Triangles of the symmetric voxel-column solid for level counts k.

    Top and bottom caps sit at z = +-k*a per column; side walls are split
    into unit slabs of height a so that all faces live on one lattice and
    every positional edge is shared by exactly two triangles.
    """
    tris = []
    nxf, nyf = k.shape
    for i, j in np.argwhere(k > 0):
        x0, x1 = i * cell, (i + 1) * cell
        y0, y1 = j * cell, (j + 1) * cell
        z = float(k[i, j]) * a
        q = ((x0, y0, z), (x1, y0, z), (x1, y1, z), (x0, y1, z))
        tris += _quad(*q)
        tris += _quad(*_mirror_quad(q))
    kp = np.pad(k, 1)
    for i in range(nxf + 1):
        for j in range(nyf):
            kl, kr = int(kp[i, j + 1]), int(kp[i + 1, j + 1])
            if kl == kr:
                continue
            x = i * cell
            y0, y1 = j * cell, (j + 1) * cell
            for s in range(min(kl, kr), max(kl, kr)):
                z0, z1 = s * a, (s + 1) * a
                if kl > kr:
                    q = ((x, y0, z0), (x, y1, z0), (x, y1, z1), (x, y0, z1))
                else:
                    q = ((x, y0, z0), (x, y0, z1), (x, y1, z1), (x, y1, z0))
                tris += _quad(*q)
                tris += _quad(*_mirror_quad(q))
    for i in range(nxf):
        for j in range(nyf + 1):
            kd, ku = int(kp[i + 1, j]), int(kp[i + 1, j + 1])
            if kd == ku:
                continue
            y = j * cell
            x0, x1 = i * cell, (i + 1) * cell
            for s in range(min(kd, ku), max(kd, ku)):
                z0, z1 = s * a, (s + 1) * a
                if kd > ku:
                    q = ((x0, y, z0), (x0, y, z1), (x1, y, z1), (x1, y, z0))
                else:
                    q = ((x0, y, z0), (x1, y, z0), (x1, y, z1), (x0, y, z1))
                tris += _quad(*q)
                tris += _quad(*_mirror_quad(q))
    return tris


def extrude_stack(stack: SheetStack, t_total: float,
                  path="stack.stl") -> str:
    """Write the symmetric extruded stack as a binary STL solid."""
    _validate_levels(stack.levels)
    if t_total <= 0:
        raise ValueError("total thickness must be positive")
    a = 0.5 * t_total / stack.n
    tris = _column_triangles(stack.raster, stack.cell, a)
    rec = np.zeros(len(tris), dtype=[("normal", "<f4", 3),
                                     ("verts", "<f4", (3, 3)),
                                     ("attr", "<u2")])
    verts = np.array(tris, dtype=np.float64)
    rec["verts"] = verts.astype(np.float32)
    e1 = verts[:, 1] - verts[:, 0]
    e2 = verts[:, 2] - verts[:, 0]
    nrm = np.cross(e1, e2)
    length = np.linalg.norm(nrm, axis=1, keepdims=True)
    length[length == 0.0] = 1.0
    rec["normal"] = (nrm / length).astype(np.float32)
    with open(path, "wb") as fh:
        fh.write(b"multitop sheet stack".ljust(80, b"\0"))
        fh.write(struct.pack("<I", len(tris)))
        fh.write(rec.tobytes())
    return str(path)


def read_stl(path):
    """Binary STL reader returning the (n, 3, 3) float32 vertex array."""
    with open(path, "rb") as fh:
        fh.read(80)
        (count,) = struct.unpack("<I", fh.read(4))
        rec = np.frombuffer(fh.read(count * 50),
                            dtype=[("normal", "<f4", 3),
                                   ("verts", "<f4", (3, 3)),
                                   ("attr", "<u2")])
    return rec["verts"].copy()


def stl_volume(verts: np.ndarray) -> float:
    """Signed volume of a closed triangle surface via divergence theorem."""
    v = verts.astype(np.float64)
    return float(np.einsum("ij,ij->i", v[:, 0],
                           np.cross(v[:, 1], v[:, 2])).sum() / 6.0)
