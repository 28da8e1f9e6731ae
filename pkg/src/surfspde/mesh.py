"""Polygonal and triangulated approximations of the built-in surfaces.

Meshes are generated as nested hierarchies with all vertices on the
smooth surface: inscribed regular 2^(level+2)-gons for the circle, and
subdivided icosahedra (midpoints projected back to the surface) for the
sphere and the deformed sphere.  The module also builds the sparse
vertex-interpolation matrix that couples a fine mesh to a coarser one,
which the convergence harness uses to compare solutions across
resolutions.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .geometry import DeformedSphere, Surface, deform

# icosahedron with vertices on the unit sphere (golden-ratio coordinates,
# normalized); faces oriented outward at build time
_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICOSA_VERTICES = np.array([
    [-1.0, _PHI, 0.0], [1.0, _PHI, 0.0], [-1.0, -_PHI, 0.0], [1.0, -_PHI, 0.0],
    [0.0, -1.0, _PHI], [0.0, 1.0, _PHI], [0.0, -1.0, -_PHI], [0.0, 1.0, -_PHI],
    [_PHI, 0.0, -1.0], [_PHI, 0.0, 1.0], [-_PHI, 0.0, -1.0], [-_PHI, 0.0, 1.0],
]) / np.sqrt(1.0 + _PHI ** 2)
_ICOSA_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [5, 4, 9], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])


@dataclass
class SurfaceMesh:
    """Simplicial surface mesh: segments on a curve or triangles in R^3.

    `vertices` is (N, d+1), `simplices` is (E, d+1) with vertex indices.
    The generating `surface` is kept for projections and normal
    orientation; hand-built meshes may pass None.
    """

    vertices: np.ndarray
    simplices: np.ndarray
    level: int = 0
    surface: Surface | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.simplices = np.ascontiguousarray(self.simplices, dtype=np.int64)

    @property
    def d(self):
        return self.simplices.shape[1] - 1

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.simplices.shape[0]

    @property
    def h(self):
        return float(self.element_diameters().max())

    def element_coords(self):
        """(E, d+1, ambient) coordinates of the element vertices."""
        return self.vertices[self.simplices]

    def element_diameters(self):
        if "diam" not in self._cache:
            coords = self.element_coords()
            if self.d == 1:
                diam = np.linalg.norm(coords[:, 1] - coords[:, 0], axis=1)
            else:
                e01 = np.linalg.norm(coords[:, 1] - coords[:, 0], axis=1)
                e02 = np.linalg.norm(coords[:, 2] - coords[:, 0], axis=1)
                e12 = np.linalg.norm(coords[:, 2] - coords[:, 1], axis=1)
                diam = np.maximum(e01, np.maximum(e02, e12))
            self._cache["diam"] = diam
        return self._cache["diam"]

    def element_measures(self):
        """Lengths (d=1) or areas (d=2) of the flat elements."""
        if "measure" not in self._cache:
            coords = self.element_coords()
            if self.d == 1:
                meas = np.linalg.norm(coords[:, 1] - coords[:, 0], axis=1)
            else:
                n = np.cross(coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0])
                meas = 0.5 * np.linalg.norm(n, axis=1)
            self._cache["measure"] = meas
        return self._cache["measure"]

    def element_inradii(self):
        coords = self.element_coords()
        if self.d == 1:
            return 0.5 * self.element_measures()
        e01 = np.linalg.norm(coords[:, 1] - coords[:, 0], axis=1)
        e02 = np.linalg.norm(coords[:, 2] - coords[:, 0], axis=1)
        e12 = np.linalg.norm(coords[:, 2] - coords[:, 1], axis=1)
        s = 0.5 * (e01 + e02 + e12)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.element_measures() / s

    def element_normals(self):
        """Per-element unit normals, oriented outward.

        Orientation follows the smooth surface normal at the projected
        barycenter when the mesh carries a surface, otherwise the ray
        from the origin through the barycenter.
        """
        if "normal" not in self._cache:
            coords = self.element_coords()
            if self.d == 1:
                t = coords[:, 1] - coords[:, 0]
                raw = np.column_stack([t[:, 1], -t[:, 0]])
            else:
                raw = np.cross(coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0])
            norms = np.linalg.norm(raw, axis=1, keepdims=True)
            if np.any(norms == 0.0):
                raise ValidationError("degenerate element: zero normal")
            raw = raw / norms
            bary = coords.mean(axis=1)
            if self.surface is not None:
                ref = np.array([self.surface.unit_normal(self.surface.closest_point(b))
                                for b in bary])
            else:
                ref = bary
            sign = np.where(np.einsum("ij,ij->i", raw, ref) < 0.0, -1.0, 1.0)
            self._cache["normal"] = raw * sign[:, None]
        return self._cache["normal"]

    def element_barycenters(self):
        return self.element_coords().mean(axis=1)

    def validate(self, vertex_tol=1e-10, max_ratio=10.0):
        """Check vertex placement, closedness, and shape regularity."""
        meas = self.element_measures()
        if np.any(meas <= 0.0) or not np.all(np.isfinite(meas)):
            raise ValidationError("mesh has a degenerate (zero-measure) element")
        if self.surface is not None:
            worst = max(self.surface.distance(v) for v in self.vertices)
            if worst > vertex_tol:
                raise ValidationError(
                    f"mesh vertex off the surface by {worst:.3e} (tol {vertex_tol:.0e})")
        if self.d == 1:
            counts = np.bincount(self.simplices.ravel(), minlength=self.n_vertices)
            if not np.all(counts == 2):
                raise ValidationError("curve mesh is not closed: vertex valence != 2")
        else:
            edges = np.sort(np.concatenate([
                self.simplices[:, [0, 1]],
                self.simplices[:, [1, 2]],
                self.simplices[:, [2, 0]],
            ]), axis=1)
            _, counts = np.unique(edges, axis=0, return_counts=True)
            if not np.all(counts == 2):
                raise ValidationError("surface mesh is not closed: edge not shared by 2 triangles")
        ratio = quasi_uniformity_ratio(self)
        if ratio > max_ratio:
            raise ValidationError(f"quasi-uniformity ratio {ratio:.2f} exceeds {max_ratio}")
        return self


@dataclass
class MeshMetrics:
    h: float
    min_diameter: float
    quasi_uniformity_ratio: float
    total_measure: float
    n_vertices: int
    density_constant: float  # N_h * h^d


def quasi_uniformity_ratio(mesh):
    """max element diameter over min incircle diameter."""
    return float(mesh.element_diameters().max() / (2.0 * mesh.element_inradii().min()))


def mesh_metrics(mesh):
    meas = mesh.element_measures()
    if np.any(meas <= 0.0) or not np.all(np.isfinite(meas)):
        raise ValidationError("mesh has a degenerate (zero-measure) element")
    diam = mesh.element_diameters()
    h = float(diam.max())
    return MeshMetrics(
        h=h,
        min_diameter=float(diam.min()),
        quasi_uniformity_ratio=quasi_uniformity_ratio(mesh),
        total_measure=float(meas.sum()),
        n_vertices=mesh.n_vertices,
        density_constant=mesh.n_vertices * h ** mesh.d,
    )


def discrete_normal(mesh, simplex_index):
    """Outward unit normal of one element."""
    n = mesh.n_elements
    if not 0 <= simplex_index < n:
        raise ValidationError(f"simplex index {simplex_index} out of range [0, {n})")
    return mesh.element_normals()[simplex_index].copy()


def _circle_mesh(surface, level):
    n = 2 ** (level + 2)
    angles = 2.0 * np.pi * np.arange(n) / n
    vertices = np.column_stack([np.cos(angles), np.sin(angles)])
    segments = np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    return SurfaceMesh(vertices, segments, level=level, surface=surface)


def _subdivide_sphere(vertices, faces):
    """One 4:1 refinement on S^2; midpoints projected radially."""
    midpoint = {}
    verts = list(vertices)

    def mid(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in midpoint:
            m = 0.5 * (verts[i] + verts[j])
            m = m / np.linalg.norm(m)
            midpoint[key] = len(verts)
            verts.append(m)
        return midpoint[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(verts), np.array(new_faces)


def _orient_outward(vertices, faces):
    coords = vertices[faces]
    n = np.cross(coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0])
    bary = coords.mean(axis=1)
    flip = np.einsum("ij,ij->i", n, bary) < 0.0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _icosphere(level):
    vertices, faces = _ICOSA_VERTICES.copy(), _ICOSA_FACES.copy()
    for _ in range(level):
        vertices, faces = _subdivide_sphere(vertices, faces)
    faces = _orient_outward(vertices, faces)
    return vertices, faces


def generate_mesh(surface, level):
    """Build the level-`level` mesh of a built-in surface.

    Hierarchies are nested: every coarse vertex appears, with identical
    coordinates, in all finer meshes of the same surface.
    """
    if level < 0:
        raise ValidationError("refinement level must be >= 0")
    if surface.kind == "circle":
        mesh = _circle_mesh(surface, level)
    elif surface.kind in ("sphere", "deformed-sphere"):
        vertices, faces = _icosphere(level)
        if isinstance(surface, DeformedSphere):
            vertices = deform(vertices)
        mesh = SurfaceMesh(vertices, faces, level=level, surface=surface)
    else:
        raise ValidationError(f"cannot generate a mesh for surface kind {surface.kind!r}")
    return mesh.validate()


@dataclass
class CouplingOperator:
    """Sparse hat-function interpolation matrix between two meshes.

    Entry (i, j) is the i-th coarse hat function evaluated at the closest
    point of fine vertex j on the coarse mesh; columns sum to one.
    Applied as `matrix @ fine_vector` it coarsens noise loads, and its
    transpose interpolates coarse nodal values onto the fine vertices.
    """

    matrix: sp.csr_matrix
    coarse_level: int
    fine_level: int

    @property
    def shape(self):
        return self.matrix.shape

    def coarsen(self, fine_vector):
        fine_vector = np.asarray(fine_vector, dtype=float)
        if fine_vector.shape[0] != self.matrix.shape[1]:
            raise ValidationError(
                f"fine vector length {fine_vector.shape[0]} does not match "
                f"coupling shape {self.matrix.shape}")
        return self.matrix @ fine_vector

    def interpolate(self, coarse_vector):
        coarse_vector = np.asarray(coarse_vector, dtype=float)
        if coarse_vector.shape[0] != self.matrix.shape[0]:
            raise ValidationError(
                f"coarse vector length {coarse_vector.shape[0]} does not match "
                f"coupling shape {self.matrix.shape}")
        return self.matrix.T @ coarse_vector


def identity_coupling(mesh):
    return CouplingOperator(sp.identity(mesh.n_vertices, format="csr"),
                            coarse_level=mesh.level, fine_level=mesh.level)


def _project_points_to_segments(points, segs):
    """Closest point on each segment for every query point.

    Returns (dist2, t) arrays of shape (n_points, n_segments) where t is
    the clamped parametric coordinate along each segment.
    """
    a = segs[:, 0]
    ab = segs[:, 1] - segs[:, 0]
    denom = np.einsum("sj,sj->s", ab, ab)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("psj,sj->ps", ap, ab) / denom[None, :], 0.0, 1.0)
    diff = ap - t[:, :, None] * ab[None, :, :]
    dist2 = np.einsum("psj,psj->ps", diff, diff)
    return dist2, t


def _project_points_to_triangle(points, a, b, c):
    """Closest point on one triangle for every query point.

    Vectorized variant of the standard region-based algorithm; returns
    (dist2, bary) with bary of shape (n_points, 3).
    """
    ab = b - a
    ac = c - a
    ap = points - a
    d1 = ap @ ab
    d2 = ap @ ac

    bp = points - b
    d3 = bp @ ab
    d4 = bp @ ac

    cp = points - c
    d5 = cp @ ab
    d6 = cp @ ac

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    n = points.shape[0]
    bary = np.empty((n, 3))
    denom = va + vb + vc
    # interior fallback (denominator is positive for nondegenerate triangles)
    v = vb / denom
    w = vc / denom
    bary[:, 0] = 1.0 - v - w
    bary[:, 1] = v
    bary[:, 2] = w

    unset = np.ones(n, dtype=bool)

    def assign(mask, b0, b1, b2):
        m = mask & unset
        bary[m, 0] = b0 if np.isscalar(b0) else b0[m]
        bary[m, 1] = b1 if np.isscalar(b1) else b1[m]
        bary[m, 2] = b2 if np.isscalar(b2) else b2[m]
        unset[m] = False

    assign((d1 <= 0) & (d2 <= 0), 1.0, 0.0, 0.0)
    assign((d3 >= 0) & (d4 <= d3), 0.0, 1.0, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = np.where(d1 - d3 != 0.0, d1 / (d1 - d3), 0.0)
    assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1.0 - t_ab, t_ab, 0.0)
    assign((d6 >= 0) & (d5 <= d6), 0.0, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ac = np.where(d2 - d6 != 0.0, d2 / (d2 - d6), 0.0)
    assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1.0 - t_ac, 0.0, t_ac)
    e1 = d4 - d3
    e2 = d5 - d6
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bc = np.where(e1 + e2 != 0.0, e1 / (e1 + e2), 0.0)
    assign((va <= 0) & (e1 >= 0) & (e2 >= 0), 0.0, 1.0 - t_bc, t_bc)

    closest = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    diff = points - closest
    dist2 = np.einsum("pj,pj->p", diff, diff)
    return dist2, bary


def coarse_to_fine_matrix(coarse, fine, surface=None):
    """Vertex-interpolation coupling between nested resolutions.

    Each fine vertex is projected onto the nearest coarse element
    (Euclidean closest point over all elements; ties resolved to the
    lowest element index) and the coarse hat functions are evaluated at
    the projection via barycentric coordinates.
    """
    if coarse.d != fine.d:
        raise ValidationError("meshes have different surface dimensions")
    if coarse.level > fine.level:
        raise ValidationError(
            f"coarse level {coarse.level} exceeds fine level {fine.level}")
    if coarse.level == fine.level and coarse.n_vertices == fine.n_vertices:
        return identity_coupling(coarse)

    points = fine.vertices
    n_pts = points.shape[0]
    coords = coarse.element_coords()

    if coarse.d == 1:
        dist2, t = _project_points_to_segments(points, coords)
        best = np.argmin(dist2, axis=1)  # first minimum wins ties
        best_dist2 = dist2[np.arange(n_pts), best]
        tb = t[np.arange(n_pts), best]
        bary = np.column_stack([1.0 - tb, tb])
    else:
        best = np.zeros(n_pts, dtype=np.int64)
        best_dist2 = np.full(n_pts, np.inf)
        bary = np.zeros((n_pts, 3))
        for e in range(coarse.n_elements):
            d2, bc = _project_points_to_triangle(
                points, coords[e, 0], coords[e, 1], coords[e, 2])
            better = d2 < best_dist2
            best[better] = e
            best_dist2[better] = d2[better]
            bary[better] = bc[better]

    tol = 0.5 * coarse.h
    worst = float(np.sqrt(best_dist2.max()))
    if worst > tol:
        raise ValidationError(
            f"fine vertex lies {worst:.3e} from every coarse element (tol {tol:.3e})")

    dim = coarse.d + 1
    rows = coarse.simplices[best].ravel()
    cols = np.repeat(np.arange(n_pts), dim)
    vals = bary.ravel()
    matrix = sp.coo_matrix((vals, (rows, cols)),
                           shape=(coarse.n_vertices, n_pts)).tocsr()
    return CouplingOperator(matrix, coarse_level=coarse.level, fine_level=fine.level)
