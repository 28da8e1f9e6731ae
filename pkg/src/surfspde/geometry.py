"""Analytic surfaces used by the mesh generator.

Three built-in closed hypersurfaces: the unit circle in R^2, the unit
sphere in R^3, and a pinched sphere obtained by rescaling the horizontal
coordinates of the unit sphere with a height-dependent factor.  Each
surface provides closest-point projection and exact unit normals, which
is all the mesh machinery needs; user-defined parametric surfaces can be
plugged in behind the same interface.
"""

import numpy as np

from .errors import NumericalError, ValidationError


def _unit(v):
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValidationError("cannot normalize a zero vector")
    return v / n


def _tangent_basis(q):
    """Orthonormal t1, t2 perpendicular to unit q with t1 x t2 = q."""
    a = np.zeros(3)
    a[np.argmin(np.abs(q))] = 1.0
    t1 = _unit(np.cross(a, q))
    t2 = np.cross(q, t1)
    return t1, t2


class Surface:
    """A compact smooth hypersurface embedded in R^{d+1}."""

    kind = "abstract"
    dim = 0

    @property
    def ambient_dim(self):
        return self.dim + 1

    def closest_point(self, x):
        """Project a tubular-neighborhood point onto the surface."""
        raise NotImplementedError

    def unit_normal(self, p):
        """Outward unit normal at a point on the surface."""
        raise NotImplementedError

    def distance(self, x):
        x = np.asarray(x, dtype=float)
        return float(np.linalg.norm(x - self.closest_point(x)))


class Circle(Surface):
    """Unit circle in R^2."""

    kind = "circle"
    dim = 1

    def closest_point(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x)
        if r < 1e-14:
            raise ValidationError(
                "closest-point projection undefined at the center of the circle")
        return x / r

    def unit_normal(self, p):
        p = np.asarray(p, dtype=float)
        r = np.linalg.norm(p)
        if abs(r - 1.0) > 1e-10:
            raise ValidationError("point is not on the unit circle")
        return p / r


class Sphere(Surface):
    """Unit sphere in R^3."""

    kind = "sphere"
    dim = 2

    def closest_point(self, x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x)
        if r < 1e-14:
            raise ValidationError(
                "closest-point projection undefined at the center of the sphere")
        return x / r

    def unit_normal(self, p):
        p = np.asarray(p, dtype=float)
        r = np.linalg.norm(p)
        if abs(r - 1.0) > 1e-10:
            raise ValidationError("point is not on the unit sphere")
        return p / r


def _pinch(t):
    # horizontal scale factor of the deformation, in [0.5, 1]
    return 1.0 - 0.5 * np.cos(np.pi * t) ** 2


def _pinch_deriv(t):
    return np.pi * np.cos(np.pi * t) * np.sin(np.pi * t)


def deform(q):
    """Map a unit-sphere point to the pinched sphere.

    (q1, q2, q3) -> (s(q3) q1, s(q3) q2, q3) with s(t) = 1 - 0.5 cos^2(pi t).
    Total on S^2; preserves the vertical coordinate.
    """
    q = np.asarray(q, dtype=float)
    s = _pinch(q[..., 2])
    out = np.empty_like(q)
    out[..., 0] = s * q[..., 0]
    out[..., 1] = s * q[..., 1]
    out[..., 2] = q[..., 2]
    return out


def _deform_jacobian(q):
    s = _pinch(q[2])
    ds = _pinch_deriv(q[2])
    return np.array([
        [s, 0.0, ds * q[0]],
        [0.0, s, ds * q[1]],
        [0.0, 0.0, 1.0],
    ])


class DeformedSphere(Surface):
    """Image of the unit sphere under the pinching map `deform`."""

    kind = "deformed-sphere"
    dim = 2

    #: Gauss-Newton settings for the closest-point solve
    max_iter = 60
    step_tol = 1e-14

    def deform(self, q):
        return deform(q)

    def parameter_inverse(self, p, tol=None):
        """Recover the unit-sphere preimage of a point on the surface.

        The pinching map preserves the vertical coordinate and scales the
        horizontal ones, so the inverse is explicit.  When `tol` is given,
        rejects points whose preimage is not within `tol` of the unit
        sphere (i.e. points off the surface).
        """
        p = np.asarray(p, dtype=float)
        q3 = np.clip(p[2], -1.0, 1.0)
        s = _pinch(q3)
        q = np.array([p[0] / s, p[1] / s, q3])
        r = np.linalg.norm(q)
        if tol is not None and abs(r - 1.0) > tol:
            raise ValidationError("point is not on the deformed sphere")
        if r < 1e-14:
            raise ValidationError("projection seed undefined at the origin")
        return q / r

    def closest_point(self, x):
        """Gauss-Newton minimization of |x - deform(q)| over unit q.

        Seeded from the horizontally rescaled preimage projected radially
        onto the sphere; the iteration stays on S^2 by renormalizing.
        """
        x = np.asarray(x, dtype=float)
        q = self.parameter_inverse(x)
        for _ in range(self.max_iter):
            t1, t2 = _tangent_basis(q)
            r = x - deform(q)
            J = _deform_jacobian(q) @ np.column_stack([t1, t2])
            g = J.T @ r
            H = J.T @ J
            try:
                delta = np.linalg.solve(H, g)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"closest-point solve degenerate at q={q}") from exc
            q = _unit(q + delta[0] * t1 + delta[1] * t2)
            if np.linalg.norm(delta) < self.step_tol:
                break
        else:
            # allow slow tail convergence: accept if the first-order
            # optimality condition holds
            t1, t2 = _tangent_basis(q)
            r = x - deform(q)
            J = _deform_jacobian(q) @ np.column_stack([t1, t2])
            if np.linalg.norm(J.T @ r) > 1e-9 * max(1.0, np.linalg.norm(r)):
                raise NumericalError(
                    f"closest-point iteration did not converge for x={x}")
        return deform(q)

    def unit_normal(self, p):
        q = self.parameter_inverse(p, tol=1e-8)
        t1, t2 = _tangent_basis(q)
        J = _deform_jacobian(q)
        # t1 x t2 = q points outward and the map preserves orientation,
        # so the cross product below is outward as well
        return _unit(np.cross(J @ t1, J @ t2))


_BUILTINS = {
    "circle": Circle,
    "sphere": Sphere,
    "deformed-sphere": DeformedSphere,
}


def surface_by_name(name):
    try:
        return _BUILTINS[name]()
    except KeyError:
        raise ValidationError(
            f"unknown surface {name!r}; expected one of {sorted(_BUILTINS)}") from None
