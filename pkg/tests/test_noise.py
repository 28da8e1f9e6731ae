"""Noise streams: mass factor, reproducibility, law, and coarsening."""

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose

from surfspde.assembly import assemble_mass, assemble_operator_set
from surfspde.coefficients import builtin_field
from surfspde.errors import NumericalError, ValidationError
from surfspde.geometry import surface_by_name
from surfspde.mesh import coarse_to_fine_matrix, generate_mesh, identity_coupling
from surfspde.noise import (NoiseStream, coarsen_space, coarsen_time,
                            mass_sqrt_factor, read_rho_dump, sample_increment,
                            write_rho_dump)


def test_factor_scalar():
    L = mass_sqrt_factor(sp.csc_matrix([[4.0]]))
    assert_allclose(L.toarray(), [[2.0]], atol=0)


def test_factor_hand_cholesky():
    L = mass_sqrt_factor(sp.csc_matrix(np.array([[2.0, 1.0], [1.0, 2.0]])))
    expected = np.array([[np.sqrt(2.0), 0.0],
                         [1.0 / np.sqrt(2.0), np.sqrt(1.5)]])
    assert_allclose(L.toarray(), expected, rtol=1e-14)


@pytest.mark.parametrize("surf,level", [("circle", 2), ("circle", 7),
                                        ("sphere", 2), ("sphere", 3)])
def test_factor_residual_small(surf, level):
    # levels above the dense cutoff exercise the banded path
    surface = surface_by_name(surf)
    M = assemble_mass(generate_mesh(surface, level))
    L = mass_sqrt_factor(M)
    resid = sp.linalg.norm(L @ L.T - M) / sp.linalg.norm(M)
    assert resid <= 1e-12


def test_factor_rejects_indefinite():
    with pytest.raises(NumericalError):
        mass_sqrt_factor(sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]])))


def _circle_stream(level, dt, seed):
    surface = surface_by_name("circle")
    mesh = generate_mesh(surface, level)
    ops = assemble_operator_set(mesh, builtin_field("laplace"),
                                builtin_field("shifted-laplace"))
    return ops, NoiseStream.for_mass(ops.M, dt, seed)


def test_sampling_deterministic():
    _, stream = _circle_stream(1, 0.125, 99)
    a = sample_increment(stream, 5, 17, 0.125)
    b = sample_increment(stream, 5, 17, 0.125)
    assert np.array_equal(a.rho, b.rho)
    assert np.array_equal(a.load, b.load)


def test_sampling_distinct_indices_differ():
    _, stream = _circle_stream(1, 0.125, 99)
    base = sample_increment(stream, 5, 17, 0.125)
    assert not np.array_equal(base.rho, sample_increment(stream, 5, 18, 0.125).rho)
    assert not np.array_equal(base.rho, sample_increment(stream, 6, 17, 0.125).rho)
    other = NoiseStream(seed=100, dt=0.125, factor=stream.factor)
    assert not np.array_equal(base.rho, sample_increment(other, 5, 17, 0.125).rho)


def test_sampling_rejects_wrong_dt():
    _, stream = _circle_stream(1, 0.125, 0)
    with pytest.raises(ValidationError):
        sample_increment(stream, 0, 0, 0.25)


def test_load_scaling():
    _, stream = _circle_stream(1, 0.125, 7)
    inc = sample_increment(stream, 0, 0, 0.125)
    assert_allclose(inc.load, np.sqrt(0.125) * (stream.factor @ inc.rho), atol=0)


def test_load_covariance_matches_mass():
    dt = 2.0 ** -4
    ops, stream = _circle_stream(1, dt, 11)  # 8 vertices
    n = 10_000
    loads = np.array([sample_increment(stream, r, 0, dt).load for r in range(n)])
    emp = loads.T @ loads / n
    target = dt * ops.M.toarray()
    rel = np.linalg.norm(emp - target) / np.linalg.norm(target)
    assert rel <= 0.05


def test_load_mean_clt_bound():
    dt = 2.0 ** -4
    ops, stream = _circle_stream(1, dt, 13)
    n = 10_000
    loads = np.array([sample_increment(stream, r, 0, dt).load for r in range(n)])
    mean = loads.mean(axis=0)
    bound = 4.0 * np.sqrt(dt * ops.M.diagonal().sum() / n)
    assert np.linalg.norm(mean) <= bound


def test_rho_autocorrelation_across_steps():
    _, stream = _circle_stream(1, 0.125, 17)
    n = 10_000
    series = np.array([sample_increment(stream, 0, step, 0.125).rho[3]
                       for step in range(n)])
    x = series - series.mean()
    var = x @ x
    for lag in (1, 2, 5):
        corr = (x[:-lag] @ x[lag:]) / var
        assert abs(corr) <= 4.0 / np.sqrt(n)


def test_coarsen_time_identity_and_sum():
    a = np.array([1.0, 2.0])
    b = np.array([0.5, -1.0])
    assert_allclose(coarsen_time([a], 1), a, atol=0)
    assert_allclose(coarsen_time([a, b], 2), a + b, atol=0)
    with pytest.raises(ValidationError):
        coarsen_time([a], 2)


def test_coarsen_time_variance():
    dt = 2.0 ** -5
    ops, stream = _circle_stream(1, dt, 29)
    ratio, n = 4, 10_000
    sums = np.array([
        coarsen_time([sample_increment(stream, r, s, dt).load for s in range(ratio)],
                     ratio)
        for r in range(n)])
    emp = sums.T @ sums / n
    target = ratio * dt * ops.M.toarray()
    assert np.linalg.norm(emp - target) / np.linalg.norm(target) <= 0.05


def test_coarsen_time_total_increment_associative():
    dt = 2.0 ** -6
    _, stream = _circle_stream(1, dt, 31)
    loads = [sample_increment(stream, 0, s, dt).load for s in range(8)]
    total = coarsen_time(loads, 8)
    halves = [coarsen_time(loads[:4], 4), coarsen_time(loads[4:], 4)]
    assert_allclose(coarsen_time(halves, 2), total, rtol=1e-12)


def test_coarsen_space_identity_and_constants():
    surface = surface_by_name("circle")
    fine = generate_mesh(surface, 1)
    eye = identity_coupling(fine)
    v = np.arange(fine.n_vertices, dtype=float)
    assert_allclose(coarsen_space(eye, v), v, atol=0)

    coarse = generate_mesh(surface, 0)
    coupling = coarse_to_fine_matrix(coarse, fine, surface)
    const = coarsen_space(coupling, np.full(fine.n_vertices, 3.0))
    expected = 3.0 * np.asarray(coupling.matrix.sum(axis=1)).ravel()
    assert_allclose(const, expected, atol=1e-14)


def test_coarsen_space_dimension_mismatch():
    surface = surface_by_name("circle")
    fine = generate_mesh(surface, 1)
    coarse = generate_mesh(surface, 0)
    coupling = coarse_to_fine_matrix(coarse, fine, surface)
    with pytest.raises(ValidationError):
        coarsen_space(coupling, np.ones(5))


def test_coupled_coarse_covariance():
    dt = 2.0 ** -4
    surface = surface_by_name("circle")
    fine = generate_mesh(surface, 1)
    coarse = generate_mesh(surface, 0)
    ops = assemble_operator_set(fine, builtin_field("laplace"),
                                builtin_field("shifted-laplace"))
    coupling = coarse_to_fine_matrix(coarse, fine, surface)
    stream = NoiseStream.for_mass(ops.M, dt, 37)
    n = 10_000
    loads = np.array([coarsen_space(coupling, sample_increment(stream, r, 0, dt).load)
                      for r in range(n)])
    A = coupling.matrix.toarray()
    target = dt * A @ ops.M.toarray() @ A.T
    emp = loads.T @ loads / n
    assert np.linalg.norm(emp - target) / np.linalg.norm(target) <= 0.05


def test_rho_dump_roundtrip(tmp_path):
    rho = np.random.default_rng(0).standard_normal((5, 3))
    path = tmp_path / "rho.bin"
    write_rho_dump(path, rho)
    back = read_rho_dump(path)
    assert_allclose(back, rho, atol=0)
    raw = path.read_bytes()
    assert len(raw) == 16 + 8 * rho.size
    assert int.from_bytes(raw[:8], "little") == 3   # N_h
    assert int.from_bytes(raw[8:16], "little") == 5  # steps
