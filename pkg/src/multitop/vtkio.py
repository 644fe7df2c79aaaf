"""Legacy ASCII VTK output for quadrilateral meshes with cell/point fields."""

from __future__ import annotations

import numpy as np

from .mesh import AdaptiveMesh


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def write_vtk(path, mesh: AdaptiveMesh, cell_data=None, point_data=None) -> str:
    """Write the mesh as an unstructured grid of VTK_QUAD cells.

    cell_data maps names to per-cell scalar arrays; point_data maps names
    to per-vertex arrays, shape (n_vertices,) for scalars or
    (n_vertices, 2) for in-plane vectors (padded with z = 0).
    """
    pts = mesh.vertex_coords
    conn = mesh.conn
    lines = [
        "# vtk DataFile Version 3.0",
        "multitop fields",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {len(pts)} double",
    ]
    for x, y in pts:
        lines.append(f"{_fmt(x)} {_fmt(y)} 0")
    lines.append(f"CELLS {len(conn)} {5 * len(conn)}")
    for quad in conn:
        lines.append("4 " + " ".join(str(int(v)) for v in quad))
    lines.append(f"CELL_TYPES {len(conn)}")
    lines.extend("9" for _ in range(len(conn)))
    if cell_data:
        lines.append(f"CELL_DATA {len(conn)}")
        for name, values in cell_data.items():
            values = np.asarray(values, dtype=float)
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(_fmt(v) for v in values)
    if point_data:
        lines.append(f"POINT_DATA {len(pts)}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(_fmt(v) for v in values)
            else:
                lines.append(f"VECTORS {name} double")
                lines.extend(f"{_fmt(vx)} {_fmt(vy)} 0" for vx, vy in values)
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return str(path)
