"""Assembled matrices against closed forms and structural invariants."""

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose

from surfspde.assembly import (assemble_form, assemble_mass, assemble_operator_set,
                               symmetric_part_min_eig)
from surfspde.coefficients import builtin_field
from surfspde.geometry import surface_by_name
from surfspde.mesh import SurfaceMesh, generate_mesh, mesh_metrics


@pytest.fixture(scope="module")
def circle():
    return surface_by_name("circle")


@pytest.fixture(scope="module")
def sphere():
    return surface_by_name("sphere")


def test_square_mass_closed_form(circle):
    # inscribed square: 4 segments of length sqrt(2)
    M = assemble_mass(generate_mesh(circle, 0)).toarray()
    ell = np.sqrt(2.0)
    assert_allclose(np.diag(M), np.full(4, 2 * ell / 3), rtol=1e-14)
    off = M[np.arange(4), (np.arange(4) + 1) % 4]
    assert_allclose(off, np.full(4, ell / 6), rtol=1e-14)


def test_square_stiffness_closed_form(circle):
    T = assemble_form(generate_mesh(circle, 0), builtin_field("laplace")).toarray()
    ell = np.sqrt(2.0)
    assert_allclose(np.diag(T), np.full(4, 2.0 / ell), rtol=1e-13)
    off = T[np.arange(4), (np.arange(4) + 1) % 4]
    assert_allclose(off, np.full(4, -1.0 / ell), rtol=1e-13)


@pytest.mark.parametrize("surf,level", [("circle", 3), ("sphere", 2),
                                        ("deformed-sphere", 1)])
def test_mass_sum_equals_total_measure(surf, level):
    surface = surface_by_name(surf)
    mesh = generate_mesh(surface, level)
    M = assemble_mass(mesh)
    total = mesh_metrics(mesh).total_measure
    assert_allclose(np.ones(mesh.n_vertices) @ (M @ np.ones(mesh.n_vertices)),
                    total, rtol=1e-12)


def test_mass_spd_via_cholesky(sphere):
    M = assemble_mass(generate_mesh(sphere, 0)).toarray()
    np.linalg.cholesky(M)  # raises if not SPD


def test_pure_laplace_kernel_row_sums(circle, sphere):
    for surf, level in ((circle, 4), (sphere, 2)):
        mesh = generate_mesh(surf, level)
        T = assemble_form(mesh, builtin_field("laplace"))
        resid = np.abs(T @ np.ones(mesh.n_vertices)).max()
        scale = np.abs(T.toarray()).max()
        assert resid <= 1e-10 * scale


def test_shifted_laplace_equals_laplace_plus_mass(sphere):
    mesh = generate_mesh(sphere, 2)
    T = assemble_form(mesh, builtin_field("laplace"))
    K = assemble_form(mesh, builtin_field("shifted-laplace"))
    M = assemble_mass(mesh)
    assert np.abs((K - (T + M)).toarray()).max() <= 1e-12


def test_symmetry_for_advection_free_fields(sphere):
    mesh = generate_mesh(sphere, 2)
    K = assemble_form(mesh, builtin_field("shifted-laplace"))
    assert np.abs((K - K.T).toarray()).max() <= 1e-12 * np.abs(K.toarray()).max()


def test_swirl_field_breaks_symmetry(sphere):
    mesh = generate_mesh(sphere, 2)
    T = assemble_form(mesh, builtin_field("example3-a1", sphere))
    asym = (T - T.T).toarray()
    assert np.linalg.norm(asym, "fro") > 0.0
    # the antisymmetric part is exactly the assembled advection block's
    # antisymmetric component: rebuilding without advection must be symmetric
    field = builtin_field("example3-a1", sphere)
    no_advection = type(field)(field.name, field.diffusion,
                               lambda x: np.zeros(3), field.reaction)
    T0 = assemble_form(mesh, no_advection)
    assert np.abs((T0 - T0.T).toarray()).max() <= 1e-12 * np.abs(T0.toarray()).max()
    adv_part = (T - T0).toarray()
    assert_allclose(asym, adv_part - adv_part.T, atol=1e-13)


def test_scaling_of_mass_and_stiffness_on_circle(circle):
    mesh = generate_mesh(circle, 2)
    s = 1.7
    scaled = SurfaceMesh(mesh.vertices * s, mesh.simplices.copy())
    M, Ms = assemble_mass(mesh), assemble_mass(scaled)
    T = assemble_form(mesh, builtin_field("laplace"))
    Ts = assemble_form(scaled, builtin_field("laplace"))
    assert np.abs((Ms - s * M).toarray()).max() <= 1e-10
    assert np.abs((Ts - T / s).toarray()).max() <= 1e-10


def test_discrete_coercivity_diagnostic(circle, sphere):
    # smallest symmetric-part eigenvalue with the appropriate zero-order shift
    mesh = generate_mesh(circle, 3)  # 32 vertices
    lap = assemble_form(mesh, builtin_field("laplace"))
    M = assemble_mass(mesh)
    assert symmetric_part_min_eig(lap, M=M, shift=1.0) > 0.0
    shifted = assemble_form(mesh, builtin_field("shifted-laplace"))
    assert symmetric_part_min_eig(shifted) > 0.0
    smesh = generate_mesh(sphere, 1)  # 42 vertices
    swirl = assemble_form(smesh, builtin_field("example3-a1", sphere))
    assert symmetric_part_min_eig(swirl) > 0.0


def test_operator_set_assembly(sphere):
    mesh = generate_mesh(sphere, 1)
    ops = assemble_operator_set(mesh, builtin_field("laplace"),
                                builtin_field("shifted-laplace"))
    assert ops.field1 == "laplace"
    assert ops.field2 == "shifted-laplace"
    assert ops.n == mesh.n_vertices
    assert sp.issparse(ops.M) and sp.issparse(ops.T) and sp.issparse(ops.K)


def test_assembly_deterministic(sphere):
    mesh = generate_mesh(sphere, 2)
    field = builtin_field("example3-a1", sphere)
    A1 = assemble_form(mesh, field)
    A2 = assemble_form(mesh, field)
    assert (A1 != A2).nnz == 0


def test_matrix_market_dump(tmp_path, circle):
    from surfspde.assembly import dump_matrix_market

    M = assemble_mass(generate_mesh(circle, 0))
    path = tmp_path / "mass.mtx"
    dump_matrix_market(path, M)
    header = path.read_text().splitlines()[0]
    assert header.startswith("%%MatrixMarket matrix coordinate")
