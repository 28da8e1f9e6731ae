"""PDE coefficient fields and their tangential projection onto meshes.

A field bundles a diffusion tensor, an advection vector, and a scalar
reaction coefficient, each as a function of the ambient point.  Before
assembly the diffusion and advection parts are projected onto the
element tangent planes with I - n n^T built from the discrete element
normal n.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError

BUILTIN_FIELD_NAMES = ("laplace", "shifted-laplace", "example3-a1", "example3-a2")

#: field pairs whose assembled operators are simultaneously diagonalizable
#: (identity diffusion, no advection, constant reaction), enabling the
#: apply-the-fractional-power-once-at-the-end optimization
COMMUTING_FIELDS = ("laplace", "shifted-laplace")


@dataclass
class CoefficientField:
    """Evaluable coefficients of one second-order operator."""

    name: str
    diffusion: Callable[[np.ndarray], np.ndarray]
    advection: Callable[[np.ndarray], np.ndarray]
    reaction: Callable[[np.ndarray], float]
    is_constant: bool = False  # constant fields skip per-element evaluation


def _constant_field(name, alpha):
    def diffusion(x):
        return np.eye(len(x))

    def advection(x):
        return np.zeros(len(x))

    def reaction(x):
        return alpha

    return CoefficientField(name, diffusion, advection, reaction, is_constant=True)


def _swirl_field(surface):
    """Spatially varying diffusion/advection on a closed surface in R^3.

    The diffusion tensor is the identity plus a rank-one enhancement
    5 v v^T along a latitude-dependent swirl direction v; the advection
    pulls towards the equator.  The smooth surface normal enters the
    formulas, evaluated at the closest point on the surface.
    """
    if surface is None:
        raise ValidationError("the swirl field requires a surface for its normals")

    def _tangent_projector(x):
        nu = surface.unit_normal(surface.closest_point(x))
        return np.eye(3) - np.outer(nu, nu)

    def diffusion(x):
        proj = _tangent_projector(x)
        v = np.cos(np.pi * x[2] / 2.0) ** 2 * (proj @ np.array([x[1], -x[0], 0.0]))
        return np.eye(3) + 5.0 * np.outer(v, v)

    def advection(x):
        proj = _tangent_projector(x)
        return -(proj @ np.array([0.0, 0.0, x[2] / 2.0]))

    def reaction(x):
        return 1.0

    return CoefficientField("example3-a1", diffusion, advection, reaction)


def builtin_field(name, surface=None):
    """Named coefficient sets used by the built-in models.

    laplace          identity diffusion, no advection, zero reaction
    shifted-laplace  identity diffusion, no advection, unit reaction
    example3-a1      swirl diffusion + equatorward advection, unit reaction
    example3-a2      alias of shifted-laplace (keeps the noise operator
                     invertible)
    """
    if name == "laplace":
        return _constant_field(name, 0.0)
    if name == "shifted-laplace":
        return _constant_field(name, 1.0)
    if name == "example3-a1":
        return _swirl_field(surface)
    if name == "example3-a2":
        f = _constant_field(name, 1.0)
        return f
    raise ValidationError(
        f"unknown coefficient field {name!r}; expected one of {BUILTIN_FIELD_NAMES}")


@dataclass
class MeshCoefficients:
    """Per-element projected coefficients at the element barycenters."""

    field_name: str
    diffusion: np.ndarray  # (E, a, a), a = ambient dimension
    advection: np.ndarray  # (E, a)
    reaction: np.ndarray   # (E,)
    normals: np.ndarray    # (E, a)


def tangential_projector(normal):
    normal = np.asarray(normal, dtype=float)
    return np.eye(len(normal)) - np.outer(normal, normal)


def project_to_mesh(field, mesh):
    """Evaluate and tangentially project a field on every element.

    Coefficients are taken at the barycenter of each flat element (the
    single quadrature point of the assembly rule); diffusion tensors are
    sandwiched between tangential projectors and advection vectors are
    projected, so both map the element tangent plane to itself.
    """
    normals = mesh.element_normals()
    n_elem = mesh.n_elements
    a = mesh.vertices.shape[1]

    if field.is_constant:
        x0 = mesh.vertices[0]
        alpha = field.reaction(x0)
        diff0 = np.asarray(field.diffusion(x0), dtype=float)
        adv0 = np.asarray(field.advection(x0), dtype=float)
        proj = np.eye(a)[None, :, :] - np.einsum("ei,ej->eij", normals, normals)
        diffusion = proj @ diff0 @ proj
        advection = np.einsum("eij,j->ei", proj, adv0)
        reaction = np.full(n_elem, alpha)
        return MeshCoefficients(field.name, diffusion, advection, reaction, normals)

    barycenters = mesh.element_barycenters()
    diffusion = np.empty((n_elem, a, a))
    advection = np.empty((n_elem, a))
    reaction = np.empty(n_elem)
    for e in range(n_elem):
        x = barycenters[e]
        proj = tangential_projector(normals[e])
        diffusion[e] = proj @ np.asarray(field.diffusion(x), dtype=float) @ proj
        advection[e] = proj @ np.asarray(field.advection(x), dtype=float)
        reaction[e] = field.reaction(x)
    if not (np.all(np.isfinite(diffusion)) and np.all(np.isfinite(advection))
            and np.all(np.isfinite(reaction))):
        raise ValidationError(f"field {field.name!r} evaluated to a non-finite value")
    return MeshCoefficients(field.name, diffusion, advection, reaction, normals)
