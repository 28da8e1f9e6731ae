"""Negative fractional powers of the assembled elliptic operator.

The power gamma in (0, 1) is realized by an exponentially convergent
quadrature over shifted resolvent solves: a weighted sum of solutions of
(e^{jk} M + K) x = b on a geometric grid of shifts.  The endpoints use
the exact conventions gamma = 1 -> K^{-1} b and gamma = 0 -> M^{-1} b.
A dense generalized-eigendecomposition oracle validates the quadrature
on small problems.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalError, ValidationError

# shifts beyond this are handled by the asymptotic mass solve, keeping
# the shifted systems inside double-precision range
_SHIFT_OVERFLOW = 1e100


@dataclass(frozen=True)
class FractionalSpec:
    """Quadrature grid for one fractional power.

    For gamma in (0, 1): nodes y_j = j*k for j in [-n_minus, n_plus] and
    weights (k sin(pi gamma) / pi) e^{(1-gamma) y_j}.  For gamma 0 or 1
    the node list is empty and the endpoint conventions apply.
    """

    gamma: float
    k: float
    n_plus: int
    n_minus: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def n_nodes(self):
        return len(self.nodes)


def sinc_nodes(gamma, k):
    """Quadrature nodes and weights for gamma strictly inside (0, 1)."""
    if not 0.0 < gamma < 1.0:
        raise ValidationError(f"sinc quadrature requires gamma in (0,1), got {gamma}")
    if k <= 0.0:
        raise ValidationError(f"quadrature resolution k must be positive, got {k}")
    n_plus = math.ceil(math.pi ** 2 / (2.0 * gamma * k ** 2))
    n_minus = math.ceil(math.pi ** 2 / (2.0 * (1.0 - gamma) * k ** 2))
    j = np.arange(-n_minus, n_plus + 1)
    nodes = j * k
    weights = (k * math.sin(math.pi * gamma) / math.pi) * np.exp((1.0 - gamma) * nodes)
    return FractionalSpec(gamma, k, n_plus, n_minus, nodes, weights)


def fractional_spec(gamma, k):
    """Spec for any admissible gamma, applying the endpoint conventions."""
    if gamma in (0.0, 1.0):
        return FractionalSpec(float(gamma), float(k), 0, 0,
                              np.empty(0), np.empty(0))
    return sinc_nodes(gamma, k)


def choose_k(gamma, h, k_max):
    """Largest quadrature resolution the strong-rate theory permits.

    k = min(k_max, pi^2 / (2 (2 gamma + 1) ln(1/h))); smaller meshes
    force finer quadrature so its error never dominates.
    """
    if not 0.0 < h < 1.0:
        raise ValidationError(f"mesh size h must lie in (0,1), got {h}")
    if not 0.0 < gamma <= 1.0:
        raise ValidationError(f"choose_k requires gamma in (0,1], got {gamma}")
    if k_max <= 0.0:
        raise ValidationError(f"k_max must be positive, got {k_max}")
    bound = math.pi ** 2 / (2.0 * (2.0 * gamma + 1.0) * math.log(1.0 / h))
    return min(k_max, bound)


def _factorize(matrix, label):
    try:
        return spla.splu(sp.csc_matrix(matrix))
    except RuntimeError as exc:
        raise NumericalError(f"factorization failed for {label}: {exc}") from exc


class FractionalApplier:
    """Action of the fractional solve with cached factorizations.

    Factorizes every shifted system (and the mass / form matrix for the
    endpoint conventions) once; `apply` then costs one triangular solve
    per quadrature node.  Safe to reuse across time steps and
    realizations since the shift set is fixed by the spec.
    """

    def __init__(self, M, K, spec):
        self.spec = spec
        self.n = M.shape[0]
        M = sp.csc_matrix(M)
        K = sp.csc_matrix(K)
        self._mass_lu = None
        self._form_lu = None
        self._solves = []      # (weight, lu) in node order
        self._asymptotic = 0.0

        gamma = spec.gamma
        if gamma == 0.0:
            self._mass_lu = _factorize(M, "mass matrix")
            return
        if gamma == 1.0:
            self._form_lu = _factorize(K, "form matrix")
            return

        lu_cache = {}
        asymptotic_coeff = 0.0
        base = spec.k * math.sin(math.pi * gamma) / math.pi
        for idx, (y, w) in enumerate(zip(spec.nodes, spec.weights)):
            shift = math.exp(y) if y < 710.0 else math.inf
            if shift > _SHIFT_OVERFLOW:
                # (e^y M)^{-1} b = e^{-y} M^{-1} b to machine precision
                asymptotic_coeff += base * math.exp(-gamma * y)
                continue
            if shift not in lu_cache:
                lu_cache[shift] = _factorize(
                    shift * M + K, f"shifted system at node index {idx} (y={y:.3f})")
            self._solves.append((w, lu_cache[shift]))
        self._asymptotic = asymptotic_coeff
        if asymptotic_coeff > 0.0:
            self._mass_lu = _factorize(M, "mass matrix")

    def apply(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValidationError(
                f"vector length {b.shape[0]} does not match system size {self.n}")
        if self.spec.gamma == 0.0:
            return self._mass_lu.solve(b)
        if self.spec.gamma == 1.0:
            return self._form_lu.solve(b)
        out = np.zeros_like(b)
        for w, lu in self._solves:
            out += w * lu.solve(b)
        if self._asymptotic > 0.0:
            out += self._asymptotic * self._mass_lu.solve(b)
        if not np.all(np.isfinite(out)):
            raise NumericalError("fractional solve produced non-finite values")
        return out


def apply_fractional(M, K, spec, b):
    """One-shot fractional solve; prefer FractionalApplier in loops."""
    return FractionalApplier(M, K, spec).apply(b)


def dense_fractional_oracle(M, K, gamma, b):
    """Reference fractional solve via the generalized eigenproblem.

    Diagonalizes K V = M V diag(lam) with V^T M V = I and returns
    V diag(lam^-gamma) V^T b.  Requires symmetric K and SPD M; intended
    for validation on systems up to 1000 unknowns.
    """
    M = np.asarray(M.todense() if sp.issparse(M) else M, dtype=float)
    K = np.asarray(K.todense() if sp.issparse(K) else K, dtype=float)
    if M.shape[0] > 1000:
        raise ValidationError("dense oracle limited to N <= 1000")
    if np.max(np.abs(K - K.T)) > 1e-10 * max(1.0, np.max(np.abs(K))):
        raise ValidationError("dense oracle requires a symmetric form matrix")
    try:
        lam, V = scipy.linalg.eigh(K, M)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"generalized eigensolve failed: {exc}") from exc
    if lam.min() <= 0.0:
        raise NumericalError(
            f"form matrix is not positive definite (min eigenvalue {lam.min():.3e})")
    b = np.asarray(b, dtype=float)
    return V @ (lam ** (-gamma) * (V.T @ b))
