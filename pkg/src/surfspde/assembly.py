"""Assembly of the sparse P1 finite element matrices on surface meshes.

Produces the mass matrix and the bilinear-form matrices of the two
elliptic operators (drift and noise-covariance) in the nodal hat basis.
Hat-function gradients are constant per element; the polynomial parts
are integrated exactly and coefficients are evaluated at the element
barycenter, which is exact for element-wise constant coefficients.
"""

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

from .coefficients import CoefficientField, project_to_mesh
from .errors import ValidationError
from .mesh import SurfaceMesh

# exact integrals of hat-function products on the reference element,
# scaled by the element measure
_MASS_SEGMENT = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
_MASS_TRIANGLE = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


@dataclass
class OperatorSet:
    """The assembled matrices of one model on one mesh."""

    M: sp.csr_matrix            # mass
    T: sp.csr_matrix            # drift form
    K: sp.csr_matrix            # noise-covariance form
    mesh: SurfaceMesh
    field1: str = ""
    field2: str = ""

    @property
    def n(self):
        return self.M.shape[0]


def _element_geometry(mesh):
    """Element measures and constant hat-function gradients.

    Returns (measures, grads) with grads of shape (E, d+1, ambient); the
    gradients live in the element plane.
    """
    coords = mesh.element_coords()
    if mesh.d == 1:
        e = coords[:, 1] - coords[:, 0]
        length2 = np.einsum("ej,ej->e", e, e)
        if np.any(length2 <= 0.0):
            raise ValidationError("degenerate segment in mesh")
        grads = np.stack([-e / length2[:, None], e / length2[:, None]], axis=1)
        return np.sqrt(length2), grads
    a, b, c = coords[:, 0], coords[:, 1], coords[:, 2]
    n = np.cross(b - a, c - a)
    double_area = np.linalg.norm(n, axis=1)
    if np.any(double_area <= 0.0):
        raise ValidationError("degenerate triangle in mesh")
    nhat = n / double_area[:, None]
    g0 = np.cross(nhat, c - b) / double_area[:, None]
    g1 = np.cross(nhat, a - c) / double_area[:, None]
    g2 = np.cross(nhat, b - a) / double_area[:, None]
    return 0.5 * double_area, np.stack([g0, g1, g2], axis=1)


def _scatter(mesh, local):
    """Sum (E, k, k) element blocks into the global sparse matrix."""
    k = mesh.d + 1
    rows = np.repeat(mesh.simplices, k, axis=1).ravel()
    cols = np.tile(mesh.simplices, (1, k)).ravel()
    out = sp.coo_matrix((local.ravel(), (rows, cols)),
                        shape=(mesh.n_vertices, mesh.n_vertices))
    return out.tocsr()


def assemble_mass(mesh):
    """Consistent P1 mass matrix (symmetric positive definite)."""
    measures, _ = _element_geometry(mesh)
    ref = _MASS_SEGMENT if mesh.d == 1 else _MASS_TRIANGLE
    local = measures[:, None, None] * ref[None, :, :]
    return _scatter(mesh, local)


def assemble_form(mesh, field):
    """Matrix of the bilinear form of `field` in the nodal basis.

    Entry (i, j) is the form applied to (hat_j, hat_i): diffusion of the
    projected tensor against constant element gradients, advection
    tested against the exactly integrated hats, and reaction scaling the
    element mass block.
    """
    if isinstance(field, str):
        raise ValidationError("assemble_form expects a CoefficientField, not a name")
    coeffs = project_to_mesh(field, mesh) if isinstance(field, CoefficientField) else field
    measures, grads = _element_geometry(mesh)
    k = mesh.d + 1

    diff = np.einsum("e,eia,eab,ejb->eij", measures, grads, coeffs.diffusion, grads)
    # int hat_i = |element| / (d+1), identical for every test function i
    adv_row = np.einsum("e,ea,eja->ej", measures / k, coeffs.advection, grads)
    adv = np.broadcast_to(adv_row[:, None, :], (mesh.n_elements, k, k))
    ref = _MASS_SEGMENT if mesh.d == 1 else _MASS_TRIANGLE
    reac = (coeffs.reaction * measures)[:, None, None] * ref[None, :, :]

    return _scatter(mesh, diff + adv + reac)


def assemble_operator_set(mesh, field1, field2):
    """Assemble mass plus the two form matrices for a model."""
    return OperatorSet(
        M=assemble_mass(mesh),
        T=assemble_form(mesh, field1),
        K=assemble_form(mesh, field2),
        mesh=mesh,
        field1=field1.name,
        field2=field2.name,
    )


def symmetric_part_min_eig(A, M=None, shift=0.0):
    """Smallest eigenvalue of sym(A) + shift*M; dense coercivity check."""
    A = np.asarray(A.todense() if sp.issparse(A) else A, dtype=float)
    if A.shape[0] > 200:
        raise ValidationError("dense coercivity diagnostic limited to N <= 200")
    S = 0.5 * (A + A.T)
    if shift != 0.0 and M is not None:
        S = S + shift * np.asarray(M.todense() if sp.issparse(M) else M, dtype=float)
    return float(scipy.linalg.eigvalsh(S)[0])


def dump_matrix_market(path, A):
    """Write a sparse matrix in MatrixMarket coordinate format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A))
