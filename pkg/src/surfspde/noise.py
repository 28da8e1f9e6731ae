"""White-in-space Gaussian increments as nodal load vectors.

Sampling the spatially white driving noise against the hat basis reduces
to load = sqrt(dt) * L * rho with rho ~ N(0, I) and L any factor of the
mass matrix (L L^T = M).  Streams are counter-based: the normals for a
given (seed, realization, step) are fixed independently of evaluation
order, which lets coupled multi-resolution studies replay the same path.
Coarser resolutions never draw their own normals; their loads are sums
of fine loads over time windows and a hat-interpolation matrix in space.
"""

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .errors import NumericalError, ValidationError

_MASK64 = (1 << 64) - 1

# below this size a dense Cholesky is cheaper than the banded detour
_DENSE_FACTOR_LIMIT = 600


def _banded_cholesky(M):
    """Permuted sparse Cholesky via bandwidth reduction.

    Returns L (csc) with L L^T = M; L is lower-triangular up to the
    fill-reducing symmetric permutation.
    """
    perm = reverse_cuthill_mckee(sp.csr_matrix(M), symmetric_mode=True)
    Mp = sp.coo_matrix(M.tocsr()[perm][:, perm])
    n = M.shape[0]
    lower = Mp.row >= Mp.col
    rows, cols, vals = Mp.row[lower], Mp.col[lower], Mp.data[lower]
    bw = int((rows - cols).max())
    ab = np.zeros((bw + 1, n))
    ab[rows - cols, cols] = vals
    try:
        cb = scipy.linalg.cholesky_banded(ab, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"mass matrix is not positive definite: {exc}") from exc
    band, col = np.nonzero(cb)
    Lp = sp.coo_matrix((cb[band, col], (col + band, col)), shape=(n, n))
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    return Lp.tocsr()[inv].tocsc()


def mass_sqrt_factor(M):
    """Factor L with L L^T = M (SPD), lower-triangular up to ordering.

    Small matrices get the plain dense Cholesky; larger ones a banded
    Cholesky after reverse Cuthill-McKee reordering, so factor time and
    fill stay proportional to the mesh bandwidth.
    """
    n = M.shape[0]
    if n <= _DENSE_FACTOR_LIMIT:
        dense = np.asarray(M.todense() if sp.issparse(M) else M, dtype=float)
        try:
            L = np.linalg.cholesky(dense)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"mass matrix is not positive definite: {exc}") from exc
        return sp.csc_matrix(L)
    return _banded_cholesky(sp.csc_matrix(M))


@dataclass
class NoiseStream:
    """Reproducible Gaussian load source at one (fine) resolution."""

    seed: int
    dt: float
    factor: sp.csc_matrix  # L with L L^T = M

    @property
    def n(self):
        return self.factor.shape[0]

    @classmethod
    def for_mass(cls, M, dt, seed):
        return cls(seed=seed, dt=dt, factor=mass_sqrt_factor(M))


@dataclass
class NoiseIncrement:
    step: int
    rho: np.ndarray
    load: np.ndarray


def _normals(seed, realization, step, n):
    # Philox is counter-based: the key fixes (seed, realization) and the
    # step occupies the high counter word, so any (realization, step)
    # pair indexes a disjoint block of the stream.
    key = ((seed & _MASK64) << 64) | (realization & _MASK64)
    bitgen = np.random.Philox(key=key, counter=(step & _MASK64) << 192)
    return np.random.Generator(bitgen).standard_normal(n)


def sample_increment(stream, realization, step, dt):
    """Draw the nodal noise load for one step of one realization."""
    if abs(dt - stream.dt) > 1e-15 * max(1.0, abs(stream.dt)):
        raise ValidationError(
            f"increment dt {dt} does not match the stream resolution {stream.dt}")
    rho = _normals(stream.seed, realization, step, stream.n)
    load = np.sqrt(dt) * (stream.factor @ rho)
    return NoiseIncrement(step=step, rho=rho, load=load)


def coarsen_time(loads, ratio):
    """Sum `ratio` consecutive fine loads into one coarse-window load."""
    if ratio < 1:
        raise ValidationError(f"time-coarsening ratio must be >= 1, got {ratio}")
    if len(loads) != ratio:
        raise ValidationError(
            f"expected {ratio} fine loads for one coarse window, got {len(loads)}")
    out = np.array(loads[0], dtype=float, copy=True)
    for load in loads[1:]:
        out += load
    return out


def coarsen_space(coupling, fine_load):
    """Interpolate a fine-resolution load onto the coarse vertex set."""
    return coupling.coarsen(fine_load)


def write_rho_dump(path, rho):
    """Flat binary record of raw normals: int64 header (n, steps) then
    little-endian doubles, step-major."""
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    steps, n = rho.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<qq", n, steps))
        f.write(rho.astype("<f8").tobytes())


def read_rho_dump(path):
    with open(path, "rb") as f:
        n, steps = struct.unpack("<qq", f.read(16))
        data = np.frombuffer(f.read(8 * n * steps), dtype="<f8")
    return data.reshape(steps, n)
