"""Structured simplicial meshes and the immersed local/global interface.

Meshes are uniform subdivisions of an axis-aligned box: two triangles per
grid cell in 2D, six tetrahedra (Kuhn subdivision) per cell in 3D.  The
subdivision pattern is translation invariant, so two meshes built with the
same spacing restrict to identical simplices wherever their lattices
coincide.  Meshes are immutable after construction and safe to share
across threads; point location uses the structured-grid lookup and is
reentrant.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

# Boundary facet tags.  The last coordinate axis is "up".
BOTTOM = 0
TOP = 1
LATERAL = 2
TAG_NAMES = {BOTTOM: "bottom", TOP: "top", LATERAL: "lateral"}


class MeshError(ValueError):
    pass


class PointOutsideMesh(MeshError):
    """Raised when a query point cannot be located in any element."""

    def __init__(self, point):
        self.point = np.asarray(point, dtype=float)
        super().__init__(f"point {self.point.tolist()} lies outside the mesh")


class DomainEscape(MeshError):
    """Raised when a translated local domain would leave its global box."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with strictly positive edge lengths."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size not in (2, 3):
            raise MeshError("box corners must both be 2D or 3D coordinate tuples")
        if not np.all(hi > lo):
            raise MeshError(f"degenerate box: lo={lo.tolist()} hi={hi.tolist()}")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Componentwise inclusion test; `points` is (n, dim) or (dim,)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.asarray(self.lo) - tol
        hi = np.asarray(self.hi) + tol
        return np.all((p >= lo) & (p <= hi), axis=1)

    def translated(self, offset) -> "Box":
        off = np.asarray(offset, dtype=float)
        return Box(tuple(np.asarray(self.lo) + off), tuple(np.asarray(self.hi) + off))


def _cell_simplices(dim: int) -> np.ndarray:
    """Local vertex index patterns subdividing one grid cell into simplices.

    Vertices of the cell are numbered by binary offsets, x fastest
    (e.g. 3D: index = dx + 2*dy + 4*dz).  2D: two triangles sharing the
    (0,0)-(1,1) diagonal.  3D: the six Kuhn tetrahedra along coordinate
    orderings, which match across neighbouring cells.
    """
    if dim == 2:
        return np.array([[0, 1, 3], [0, 3, 2]], dtype=np.int64)
    pats = []
    for perm in itertools.permutations(range(3)):
        verts = [0]
        acc = 0
        for ax in perm:
            acc += 2**ax
            verts.append(acc)
        pats.append(verts)
    return np.array(pats, dtype=np.int64)


_QUADRATURE = {
    # (barycentric points, weights summing to 1); exact for degree-2 integrands
    2: (
        np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
        np.full(3, 1.0 / 3.0),
    ),
    3: (
        None,  # filled below
        np.full(4, 0.25),
    ),
}
_a = (5.0 + 3.0 * np.sqrt(5.0)) / 20.0
_b = (5.0 - np.sqrt(5.0)) / 20.0
_QUADRATURE[3] = (
    np.array(
        [
            [_a, _b, _b, _b],
            [_b, _a, _b, _b],
            [_b, _b, _a, _b],
            [_b, _b, _b, _a],
        ]
    ),
    np.full(4, 0.25),
)

_GAUSS2 = 0.5 / np.sqrt(3.0)
_FACET_QUADRATURE = {
    # quadrature on a facet simplex (edge in 2D, triangle in 3D)
    1: (np.array([[0.5 + _GAUSS2, 0.5 - _GAUSS2], [0.5 - _GAUSS2, 0.5 + _GAUSS2]]), np.full(2, 0.5)),
    2: (
        np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
        np.full(3, 1.0 / 3.0),
    ),
}


@dataclass(frozen=True)
class FacetGroup:
    """Precomputed geometry for a set of boundary facets."""

    nodes: np.ndarray       # (F, d) node ids
    owner: np.ndarray       # (F,) owning element ids
    measure: np.ndarray     # (F,) length / area
    normal: np.ndarray      # (F, d) outward unit normals
    qp: np.ndarray          # (F, nq, d) quadrature points
    qp_phi: np.ndarray      # (nq, d) facet shape values at quadrature points
    qp_w: np.ndarray        # (nq,) weights summing to 1


class Mesh:
    """Conforming simplicial mesh of a box with tagged boundary facets."""

    def __init__(self, box: Box, ncells: np.ndarray, base_coords: np.ndarray,
                 elems: np.ndarray, offset: np.ndarray | None = None):
        self.box = box
        self.dim = box.dim
        self.ncells = np.asarray(ncells, dtype=np.int64)
        self.spacing = box.lengths / self.ncells
        self._base_coords = base_coords
        self._offset = np.zeros(self.dim) if offset is None else np.asarray(offset, dtype=float)
        self.coords = base_coords + self._offset
        self.elems = elems
        for arr in (self.coords, self.elems, self._base_coords):
            arr.setflags(write=False)

    # -- construction -------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_elems(self) -> int:
        return self.elems.shape[0]

    @property
    def h(self) -> float:
        """Characteristic spacing (largest per-axis grid step)."""
        return float(self.spacing.max())

    @cached_property
    def _boundary(self):
        """Boundary facets as (nodes, tags, owner elements)."""
        d = self.dim
        # facet k of a simplex omits local vertex k
        local = [[j for j in range(d + 1) if j != k] for k in range(d + 1)]
        faces = self.elems[:, local]                       # (E, d+1, d)
        owners = np.repeat(np.arange(self.n_elems), d + 1)
        faces = faces.reshape(-1, d)
        key = np.sort(faces, axis=1)
        order = np.lexsort(key.T[::-1])
        key_sorted = key[order]
        new = np.ones(len(key_sorted), dtype=bool)
        new[1:] = np.any(key_sorted[1:] != key_sorted[:-1], axis=1)
        # boundary facets appear exactly once
        grp = np.cumsum(new) - 1
        counts = np.bincount(grp)
        single = counts[grp] == 1
        sel = order[single]
        bfaces = faces[sel]
        bowners = owners[sel]

        centers = self.coords[bfaces].mean(axis=1)
        tol = 1e-9 * self.h
        tags = np.full(len(bfaces), LATERAL, dtype=np.int64)
        tags[np.abs(centers[:, -1] - self.box.lo[-1]) < tol] = BOTTOM
        tags[np.abs(centers[:, -1] - self.box.hi[-1]) < tol] = TOP
        return bfaces, tags, bowners

    @property
    def boundary_facets(self) -> np.ndarray:
        return self._boundary[0]

    @property
    def boundary_tags(self) -> np.ndarray:
        return self._boundary[1]

    @property
    def boundary_owner(self) -> np.ndarray:
        return self._boundary[2]

    def nodes_on(self, *tags: int) -> np.ndarray:
        """Sorted unique node ids of boundary facets carrying the given tags."""
        faces, ftags, _ = self._boundary
        mask = np.isin(ftags, tags)
        return np.unique(faces[mask])

    def facet_group(self, *tags: int) -> FacetGroup:
        """Quadrature-ready geometry for boundary facets of the given tags."""
        faces, ftags, owner = self._boundary
        mask = np.isin(ftags, tags)
        return self._facet_geometry(faces[mask], owner[mask])

    def _facet_geometry(self, faces: np.ndarray, owner: np.ndarray) -> FacetGroup:
        d = self.dim
        pts = self.coords[faces]                           # (F, d, dim)
        if d == 2:
            t = pts[:, 1] - pts[:, 0]
            meas = np.linalg.norm(t, axis=1)
            nrm = np.stack([t[:, 1], -t[:, 0]], axis=1) / meas[:, None]
        else:
            e1 = pts[:, 1] - pts[:, 0]
            e2 = pts[:, 2] - pts[:, 0]
            cr = np.cross(e1, e2)
            nn = np.linalg.norm(cr, axis=1)
            meas = 0.5 * nn
            nrm = cr / nn[:, None]
        # orient outward from the owning element
        cent_e = self.coords[self.elems[owner]].mean(axis=1)
        cent_f = pts.mean(axis=1)
        flip = np.einsum("fd,fd->f", nrm, cent_f - cent_e) < 0
        nrm[flip] *= -1.0
        phi, w = _FACET_QUADRATURE[d - 1]
        qp = np.einsum("qi,fid->fqd", phi, pts)
        return FacetGroup(faces, owner, meas, nrm, qp, phi, w)

    # -- element geometry ----------------------------------------------

    @cached_property
    def geometry(self):
        """Volumes, P1 basis gradients, and edge-matrix inverses per element."""
        d = self.dim
        v0 = self.coords[self.elems[:, 0]]
        J = self.coords[self.elems[:, 1:]] - v0[:, None, :]    # rows are edges
        det = np.linalg.det(J)
        if np.any(det <= 0):
            raise MeshError("element with non-positive volume")
        vol = det / np.prod(range(1, d + 1))
        invJ = np.linalg.inv(J)
        grads = np.empty((self.n_elems, d + 1, d))
        grads[:, 1:, :] = np.swapaxes(invJ, 1, 2)
        grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
        return vol, grads, invJ

    @cached_property
    def quad_points(self) -> np.ndarray:
        """Element quadrature points in physical coordinates, (E, nq, dim)."""
        phi, _ = _QUADRATURE[self.dim]
        return np.einsum("qi,eid->eqd", phi, self.coords[self.elems])

    @property
    def quad_rule(self):
        return _QUADRATURE[self.dim]

    @cached_property
    def assembly_indices(self):
        """COO (rows, cols) for element-matrix scatter, computed once."""
        conn = self.elems
        rows = np.repeat(conn, self.dim + 1, axis=1).reshape(-1)
        cols = np.tile(conn, (1, self.dim + 1)).reshape(-1)
        return rows, cols

    # -- point location and interpolation -------------------------------

    def _barycentric(self, elems: np.ndarray, points: np.ndarray) -> np.ndarray:
        _, _, invJ = self.geometry
        v0 = self.coords[self.elems[elems, 0]]
        lam = np.einsum("ndk,nk->nd", np.swapaxes(invJ[elems], 1, 2), points - v0)
        bary = np.empty((len(points), self.dim + 1))
        bary[:, 1:] = lam
        bary[:, 0] = 1.0 - lam.sum(axis=1)
        return bary

    def locate(self, points: np.ndarray, tol: float = 1e-10):
        """Locate points; returns (element ids, barycentric coordinates).

        Raises PointOutsideMesh for any point that cannot be placed in an
        element with barycentric coordinates >= -tol.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.asarray(self.box.lo)
        inflate = 1e-12 * self.h
        if not np.all(self.box.contains(pts, tol=inflate)):
            bad = np.nonzero(~self.box.contains(pts, tol=inflate))[0][0]
            raise PointOutsideMesh(pts[bad])
        cell = np.floor((pts - lo) / self.spacing).astype(np.int64)
        cell = np.clip(cell, 0, self.ncells - 1)
        strides = np.cumprod(np.concatenate(([1], self.ncells[:-1])))
        cell_id = cell @ strides
        per = 2 if self.dim == 2 else 6
        best_elem = np.zeros(len(pts), dtype=np.int64)
        best_bary = np.full((len(pts), self.dim + 1), -np.inf)
        for k in range(per):
            cand = cell_id * per + k
            bary = self._barycentric(cand, pts)
            better = bary.min(axis=1) > best_bary.min(axis=1)
            best_elem[better] = cand[better]
            best_bary[better] = bary[better]
        miss = best_bary.min(axis=1) < -tol
        if np.any(miss):
            self._locate_fallback(pts, cell, strides, per, best_elem, best_bary, miss)
        miss = best_bary.min(axis=1) < -tol
        if np.any(miss):
            raise PointOutsideMesh(pts[np.nonzero(miss)[0][0]])
        return best_elem, best_bary

    def _locate_fallback(self, pts, cell, strides, per, best_elem, best_bary, miss):
        # rounding can land a point in a neighbouring cell; scan the 3^d block
        idx = np.nonzero(miss)[0]
        shifts = np.array(list(itertools.product((-1, 0, 1), repeat=self.dim)))
        for i in idx:
            for s in shifts:
                c = cell[i] + s
                if np.any(c < 0) or np.any(c >= self.ncells):
                    continue
                cid = int(c @ strides)
                for k in range(per):
                    e = cid * per + k
                    bary = self._barycentric(np.array([e]), pts[i : i + 1])[0]
                    if bary.min() > best_bary[i].min():
                        best_elem[i] = e
                        best_bary[i] = bary

    def interpolate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Evaluate the P1 interpolant of nodal `values` at `points`."""
        elems, bary = self.locate(points)
        return np.einsum("nk,nk->n", bary, values[self.elems[elems]])

    # -- rigid motion ---------------------------------------------------

    def translated(self, offset, within: Box | None = None) -> "Mesh":
        """Rigidly translated copy; connectivity and tags are shared.

        Coordinates are recomputed from the construction-time coordinates
        plus the accumulated offset, so translating by v and then -v
        restores them bitwise.
        """
        off = self._offset + np.asarray(offset, dtype=float)
        new_box = Box(
            tuple(np.asarray(self.box.lo) - self._offset + off),
            tuple(np.asarray(self.box.hi) - self._offset + off),
        )
        if within is not None:
            lo_ok = np.all(np.asarray(new_box.lo) >= np.asarray(within.lo) - 1e-12 * self.h)
            hi_ok = np.all(np.asarray(new_box.hi) <= np.asarray(within.hi) + 1e-12 * self.h)
            if not (lo_ok and hi_ok):
                raise DomainEscape(
                    f"local domain {new_box} escapes global box {within}"
                )
        m = Mesh(new_box, self.ncells, self._base_coords, self.elems, offset=off)
        return m


def build_structured_mesh(box: Box, h) -> Mesh:
    """Uniform simplicial mesh of `box` with target spacing `h`.

    `h` may be a scalar or a per-axis sequence.  Axes whose length is not
    an integer multiple of h (relative tolerance 1e-9) get their spacing
    shrunk to the nearest exact divisor.
    """
    d = box.dim
    h = np.broadcast_to(np.asarray(h, dtype=float), (d,))
    if np.any(h <= 0):
        raise MeshError(f"mesh spacing must be positive, got {h.tolist()}")
    lengths = box.lengths
    q = lengths / h
    ncells = np.where(np.abs(q - np.round(q)) <= 1e-9 * q, np.round(q), np.ceil(q))
    ncells = ncells.astype(np.int64)
    if np.any(ncells < 1):
        raise MeshError("mesh must have at least one cell per axis")

    axes = [np.linspace(box.lo[k], box.hi[k], ncells[k] + 1) for k in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    # node index: x fastest, then y, then z
    coords = np.stack([g.T.reshape(-1) if d == 2 else np.transpose(g, (2, 1, 0)).reshape(-1) for g in grids], axis=1)

    nn = ncells + 1
    node_strides = np.cumprod(np.concatenate(([1], nn[:-1])))
    cell_ranges = [np.arange(n) for n in ncells]
    cgrids = np.meshgrid(*cell_ranges, indexing="ij")
    cells = np.stack([g.reshape(-1) for g in cgrids], axis=1)
    # enumerate cells x-fastest to match locate()'s cell_id convention
    order = np.lexsort([cells[:, k] for k in range(d - 1, -1, -1)][::-1])
    cells = cells[order]

    corner0 = cells @ node_strides
    offsets = np.array(list(itertools.product((0, 1), repeat=d)))[:, ::-1]  # x fastest
    corner_ids = corner0[:, None] + offsets @ node_strides                  # (C, 2^d)

    pattern = _cell_simplices(d)
    elems = corner_ids[:, pattern].reshape(-1, d + 1).astype(np.int64)

    mesh = Mesh(box, ncells, coords, elems)
    # fix orientation once: swap last two vertices of inverted simplices
    v0 = coords[elems[:, 0]]
    J = coords[elems[:, 1:]] - v0[:, None, :]
    det = np.linalg.det(J)
    if np.any(det < 0):
        flip = det < 0
        elems = elems.copy()
        elems[flip, -2:] = elems[flip, -2:][:, ::-1]
        mesh = Mesh(box, ncells, coords, elems)
    if np.any(np.abs(det) < 1e-300):
        raise MeshError("degenerate cell subdivision")
    return mesh


@dataclass(frozen=True)
class InterfaceGamma:
    """Quadrature realization of the immersed local/global interface.

    Covers the lateral and bottom facets of the local mesh.  Each facet
    carries a degree-2 quadrature; every quadrature point is located in
    the global mesh so surface functionals can be scattered onto global
    test functions.  `trace_nodes` are the local boundary nodes where the
    local problem takes Dirichlet data interpolated from the global field.
    """

    facet_nodes: np.ndarray     # (F, d) local node ids
    facet_owner: np.ndarray     # (F,) local element adjacent to each facet
    facet_measure: np.ndarray   # (F,)
    qp_points: np.ndarray       # (Q, dim) all quadrature points, facet-major
    qp_weights: np.ndarray      # (Q,) absolute weights; sum per facet = measure
    qp_normal: np.ndarray       # (Q, dim) outward (from the local domain) unit normals
    qp_local_elem: np.ndarray   # (Q,) local element containing each point
    qp_local_bary: np.ndarray   # (Q, d+1)
    qp_global_elem: np.ndarray  # (Q,)
    qp_global_bary: np.ndarray  # (Q, d+1)
    trace_nodes: np.ndarray     # (T,) local node ids on the Dirichlet interface
    trace_global_elem: np.ndarray
    trace_global_bary: np.ndarray

    @property
    def measure(self) -> float:
        return float(self.facet_measure.sum())

    def trace_of(self, global_field_values: np.ndarray, global_mesh: Mesh) -> np.ndarray:
        """Global field values interpolated at the local interface nodes."""
        vals = global_field_values[global_mesh.elems[self.trace_global_elem]]
        return np.einsum("nk,nk->n", self.trace_global_bary, vals)


def extract_interface(local: Mesh, global_mesh: Mesh) -> InterfaceGamma:
    """Build the interface data for a local mesh immersed in a global mesh.

    The local box must sit strictly inside the global box on the lateral
    and bottom sides; its top face must lie on the global top face (the
    top carries boundary conditions, not coupling).
    """
    tol = 1e-9 * global_mesh.h
    llo, lhi = np.asarray(local.box.lo), np.asarray(local.box.hi)
    glo, ghi = np.asarray(global_mesh.box.lo), np.asarray(global_mesh.box.hi)
    if local.dim != global_mesh.dim:
        raise MeshError("local and global meshes must share the dimension")
    lateral_ok = np.all(llo[:-1] > glo[:-1] + tol) and np.all(lhi[:-1] < ghi[:-1] - tol)
    bottom_ok = llo[-1] > glo[-1] + tol
    top_ok = abs(lhi[-1] - ghi[-1]) <= tol
    if not (lateral_ok and bottom_ok and top_ok):
        raise MeshError(
            "local box must be strictly immersed laterally and at the bottom, "
            "with its top face on the global top face"
        )

    grp = local.facet_group(LATERAL, BOTTOM)
    nf, nq = grp.nodes.shape[0], grp.qp_w.size
    qp = grp.qp.reshape(-1, local.dim)
    weights = (grp.measure[:, None] * grp.qp_w[None, :]).reshape(-1)
    normal = np.repeat(grp.normal, nq, axis=0)
    owner = np.repeat(grp.owner, nq)
    lbary = local._barycentric(owner, qp)
    gelem, gbary = global_mesh.locate(qp)

    tnodes = np.unique(grp.nodes)
    telem, tbary = global_mesh.locate(local.coords[tnodes])
    return InterfaceGamma(
        facet_nodes=grp.nodes,
        facet_owner=grp.owner,
        facet_measure=grp.measure,
        qp_points=qp,
        qp_weights=weights,
        qp_normal=normal,
        qp_local_elem=owner,
        qp_local_bary=lbary,
        qp_global_elem=gelem,
        qp_global_bary=gbary,
        trace_nodes=tnodes,
        trace_global_elem=telem,
        trace_global_bary=tbary,
    )
