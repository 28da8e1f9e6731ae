"""Backward Euler stepping: closed forms, invariants, and the
final-time fractional shortcut."""

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose

from surfspde.assembly import OperatorSet, assemble_operator_set
from surfspde.coefficients import builtin_field
from surfspde.errors import NumericalError, ValidationError
from surfspde.fractional import fractional_spec
from surfspde.geometry import surface_by_name
from surfspde.mesh import SurfaceMesh, generate_mesh
from surfspde.noise import NoiseStream, sample_increment
from surfspde.stepper import (StateVector, apply_fractional_final, build_stepper,
                              run, step)


def _scalar_ops(lam=1.0, kval=2.0):
    return OperatorSet(M=sp.csc_matrix([[1.0]]), T=sp.csc_matrix([[lam]]),
                       K=sp.csc_matrix([[kval]]), mesh=None,
                       field1="laplace", field2="shifted-laplace")


def _circle_ops(level):
    surface = surface_by_name("circle")
    mesh = generate_mesh(surface, level)
    return assemble_operator_set(mesh, builtin_field("laplace"),
                                 builtin_field("shifted-laplace"))


def _three_vertex_ops():
    # triangle ring inscribed in the unit circle
    angles = 2.0 * np.pi * np.arange(3) / 3.0
    verts = np.column_stack([np.cos(angles), np.sin(angles)])
    mesh = SurfaceMesh(verts, np.array([[0, 1], [1, 2], [2, 0]]),
                       surface=surface_by_name("circle"))
    return assemble_operator_set(mesh, builtin_field("laplace"),
                                 builtin_field("shifted-laplace"))


def test_scalar_deterministic_step():
    out = run(_scalar_ops(), fractional_spec(1.0, 0.5), 0.5, 1,
              alpha0=np.array([1.0]))
    assert_allclose(out.alpha, [2.0 / 3.0], rtol=1e-15)


def test_scalar_closed_form_decay():
    n = 16
    out = run(_scalar_ops(), fractional_spec(1.0, 0.5), 1.0 / n, n,
              alpha0=np.array([1.0]))
    assert_allclose(out.alpha, [(1.0 + 1.0 / n) ** -n], rtol=1e-13)


def test_scalar_one_noisy_step():
    # gamma = 1: theta = K^{-1} load; one step from zero initial data
    ops = _scalar_ops(lam=1.0, kval=2.0)
    op = build_stepper(ops, fractional_spec(1.0, 0.5), 0.25)
    out = step(op, StateVector(np.array([0.0])), noise_load=np.array([0.5]))
    assert_allclose(out.alpha, [0.2], rtol=1e-15)


def test_constants_invariant_under_pure_laplace():
    ops = _circle_ops(3)
    out = run(ops, fractional_spec(1.0, 0.5), 0.125, 8,
              alpha0=np.full(ops.n, 3.7))
    assert_allclose(out.alpha, np.full(ops.n, 3.7), atol=1e-10)


def test_zero_noise_matches_dense_matrix_power():
    ops = _circle_ops(3)  # 32 vertices
    dt, n = 0.1, 7
    rng = np.random.default_rng(0)
    alpha0 = rng.standard_normal(ops.n)
    out = run(ops, fractional_spec(0.5, 0.5), dt, n, alpha0=alpha0)
    E = np.linalg.inv(np.eye(ops.n) + dt * np.linalg.solve(ops.M.toarray(),
                                                           ops.T.toarray()))
    expected = np.linalg.matrix_power(E, n) @ alpha0
    assert np.linalg.norm(out.alpha - expected) <= 1e-8 * np.linalg.norm(expected)


def test_m_norm_nonincreasing_without_noise():
    ops = _circle_ops(4)
    rng = np.random.default_rng(1)
    states = run(ops, fractional_spec(1.0, 0.5), 0.05, 20,
                 alpha0=rng.standard_normal(ops.n), record="trajectory")
    M = ops.M
    norms = [float(s.alpha @ (M @ s.alpha)) for s in states]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))


def test_noise_path_linearity():
    ops = _circle_ops(2)
    spec = fractional_spec(0.5, 0.5)
    stream = NoiseStream.for_mass(ops.M, 0.125, 5)
    loads = [sample_increment(stream, 0, n, 0.125).load for n in range(8)]
    out1 = run(ops, spec, 0.125, 8, noise_source=lambda n: loads[n])
    c = -2.5
    out2 = run(ops, spec, 0.125, 8, noise_source=lambda n: c * loads[n])
    assert_allclose(out2.alpha, c * out1.alpha, atol=1e-12 * np.abs(out1.alpha).max())


def test_same_seed_bitwise_identical():
    ops = _circle_ops(2)
    spec = fractional_spec(0.5, 0.5)

    def noise():
        stream = NoiseStream.for_mass(ops.M, 0.125, 5)
        return lambda n: sample_increment(stream, 0, n, 0.125).load

    a = run(ops, spec, 0.125, 8, noise_source=noise(), record="trajectory")
    b = run(ops, spec, 0.125, 8, noise_source=noise(), record="trajectory")
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.alpha, sb.alpha)


def test_empirical_mean_zero():
    ops = _circle_ops(1)
    spec = fractional_spec(0.5, 0.5)
    dt, n_steps, n_real = 0.125, 8, 1000
    stream = NoiseStream.for_mass(ops.M, dt, 21)
    finals = np.empty((n_real, ops.n))
    for r in range(n_real):
        out = run(ops, spec, dt, n_steps,
                  noise_source=lambda n: sample_increment(stream, r, n, dt).load)
        finals[r] = out.alpha
    M = ops.M.toarray()
    m_norms = np.sqrt(np.einsum("ri,ij,rj->r", finals, M, finals))
    mean = finals.mean(axis=0)
    mean_norm = np.sqrt(mean @ M @ mean)
    assert mean_norm <= 4.0 * m_norms.std() / np.sqrt(n_real)


def test_build_stepper_roundtrip_identity():
    ops = _circle_ops(3)
    op = build_stepper(ops, fractional_spec(0.5, 0.5), 0.01)
    rng = np.random.default_rng(3)
    x = rng.standard_normal(ops.n)
    system = (ops.M + 0.01 * ops.T).toarray()
    assert np.linalg.norm(op.solve(system @ x) - x) <= 1e-10 * np.linalg.norm(x)


def test_build_stepper_nonsymmetric_drift():
    sphere = surface_by_name("sphere")
    mesh = generate_mesh(sphere, 2)
    ops = assemble_operator_set(mesh, builtin_field("example3-a1", sphere),
                                builtin_field("example3-a2"))
    op = build_stepper(ops, fractional_spec(0.5, 0.5), 0.05)
    out = step(op, StateVector(np.zeros(ops.n)), noise_load=np.ones(ops.n))
    assert np.all(np.isfinite(out.alpha))


def test_run_rejects_bad_record_mode():
    with pytest.raises(ValidationError):
        run(_scalar_ops(), fractional_spec(1.0, 0.5), 0.5, 1, record="everything")


def test_nan_detection_reports_step():
    ops = _scalar_ops()
    spec = fractional_spec(1.0, 0.5)
    with pytest.raises(NumericalError, match="step 2"):
        run(ops, spec, 0.5, 5,
            noise_source=lambda n: np.array([np.nan]) if n == 2 else np.array([0.0]))


@pytest.mark.parametrize("gamma", [1.0, 0.5])
def test_final_fractional_matches_per_step(gamma):
    # commuting drift/noise forms: applying the fractional solve once to
    # the plain-path final state equals the per-step fractional scheme
    ops = _three_vertex_ops()
    spec = fractional_spec(gamma, 0.4)
    dt, n_steps = 0.125, 8
    stream = NoiseStream.for_mass(ops.M, dt, 17)
    loads = [sample_increment(stream, 0, n, dt).load for n in range(n_steps)]

    per_step = run(ops, spec, dt, n_steps, noise_source=lambda n: loads[n])
    base = run(ops, fractional_spec(0.0, 0.4), dt, n_steps,
               noise_source=lambda n: loads[n])
    shortcut = apply_fractional_final(ops, spec, base.alpha)
    assert np.linalg.norm(shortcut - per_step.alpha) <= 1e-8


def test_final_fractional_gamma_zero_is_identity():
    ops = _three_vertex_ops()
    alpha = np.array([1.0, -2.0, 0.5])
    assert_allclose(apply_fractional_final(ops, fractional_spec(0.0, 0.5), alpha),
                    alpha, atol=0)


def test_final_fractional_refuses_noncommuting_fields():
    sphere = surface_by_name("sphere")
    mesh = generate_mesh(sphere, 1)
    ops = assemble_operator_set(mesh, builtin_field("example3-a1", sphere),
                                builtin_field("example3-a2"))
    with pytest.raises(ValidationError):
        apply_fractional_final(ops, fractional_spec(0.5, 0.5), np.zeros(ops.n))
