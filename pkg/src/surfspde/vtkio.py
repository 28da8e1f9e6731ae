"""Legacy ASCII VTK writers for meshes and nodal fields.

PolyData with LINES (curve meshes) or POLYGONS (triangulated surfaces),
plus optional per-vertex scalar arrays.  Deterministic formatting so
identical inputs produce identical files.
"""

import numpy as np

from .errors import ValidationError

_FMT = "%.12g"


def _fmt_row(values):
    return " ".join(_FMT % v for v in values)


def write_vtk(path, mesh, point_data=None, title="surfspde mesh"):
    """Write a mesh (and optional nodal scalars) as legacy VTK PolyData."""
    points = mesh.vertices
    if points.shape[1] == 2:
        points = np.column_stack([points, np.zeros(points.shape[0])])
    elif points.shape[1] != 3:
        raise ValidationError("VTK export supports 2-D or 3-D vertex coordinates")

    cells = mesh.simplices
    n_cells, cell_size = cells.shape
    keyword = "LINES" if cell_size == 2 else "POLYGONS"

    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {points.shape[0]} double",
    ]
    lines.extend(_fmt_row(p) for p in points)
    lines.append(f"{keyword} {n_cells} {n_cells * (cell_size + 1)}")
    lines.extend(f"{cell_size} " + " ".join(str(i) for i in cell) for cell in cells)

    if point_data:
        lines.append(f"POINT_DATA {points.shape[0]}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=float)
            if values.shape != (points.shape[0],):
                raise ValidationError(
                    f"point data {name!r} has shape {values.shape}, expected "
                    f"({points.shape[0]},)")
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(_FMT % v for v in values)

    with open(path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
