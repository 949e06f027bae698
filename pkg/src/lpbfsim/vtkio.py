"""Legacy ASCII VTK export and CSV writing helpers."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .mesh import Mesh

_CELL_TYPE = {2: 5, 3: 10}   # VTK_TRIANGLE, VTK_TETRA


def write_vtk(path, mesh: Mesh, point_data: dict | None = None, title: str = "lpbfsim"):
    """Write the mesh (and nodal scalar fields) as a legacy VTK unstructured grid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = mesh.coords
    if mesh.dim == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    nv = mesh.dim + 1
    with path.open("w") as f:
        f.write("# vtk DataFile Version 2.0\n")
        f.write(f"{title}\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_nodes} double\n")
        for p in pts:
            f.write(f"{p[0]:.10g} {p[1]:.10g} {p[2]:.10g}\n")
        f.write(f"\nCELLS {mesh.n_elems} {mesh.n_elems * (nv + 1)}\n")
        for e in mesh.elems:
            f.write(f"{nv} " + " ".join(str(int(v)) for v in e) + "\n")
        f.write(f"\nCELL_TYPES {mesh.n_elems}\n")
        ct = _CELL_TYPE[mesh.dim]
        for _ in range(mesh.n_elems):
            f.write(f"{ct}\n")
        if point_data:
            f.write(f"\nPOINT_DATA {mesh.n_nodes}\n")
            for name, values in point_data.items():
                f.write(f"SCALARS {name} double\n")
                f.write("LOOKUP_TABLE default\n")
                for v in np.asarray(values):
                    f.write(f"{v:.10g}\n")


def write_csv(path, header: list, rows):
    """Write rows of numbers/strings with a fixed header; deterministic format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.12g}"
    if isinstance(v, (np.floating,)):
        return f"{float(v):.12g}"
    return v


def read_csv(path):
    """Read a CSV written by write_csv back into (header, rows of strings)."""
    with Path(path).open() as f:
        r = csv.reader(f)
        header = next(r)
        return header, [row for row in r]
