import math

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from fsmor import discretization as disc
from fsmor.errors import StructureError
from fsmor.numerics import cholesky, sparse_solve
from fsmor.system import registry_get

REGISTRY = ("advection-reaction-1d", "advection-reaction-2d-case1", "advection-reaction-2d-case2",
            "advection-reaction-2d-case3", "cdr-1d", "cdr-2d", "elasticity-2d")


def space_for(sys, cells, k=1, periodic=None):
    return disc.build_space(disc.StructuredMesh.for_system(sys, cells, periodic), k, sys.m)


# ---------------------------------------------------------------- spaces and quadrature

@pytest.mark.parametrize("d,cells,k,m,ndof", [(1, 4, 0, 1, 4), (1, 4, 1, 1, 8), (2, 3, 1, 2, 72)])
def test_dof_counts(d, cells, k, m, ndof):
    mesh = disc.StructuredMesh((cells,) * d, (0.0,) * d, (1.0,) * d, (False,) * d)
    assert disc.build_space(mesh, k, m).ndof == ndof


def test_unsupported_order_rejected():
    mesh = disc.StructuredMesh((4,), (0.0,), (1.0,), (False,))
    with pytest.raises(ValueError):
        disc.build_space(mesh, 2, 1)


def test_dof_indexing_bijective():
    mesh = disc.StructuredMesh((3, 2), (0.0, 0.0), (1.0, 1.0), (False, False))
    space = disc.build_space(mesh, 1, 2)
    idx = space.cell_dofs(np.arange(mesh.ncells)).ravel()
    assert np.array_equal(np.sort(idx), np.arange(space.ndof))


@given(st.integers(1, 6), st.integers(0, 11))
def test_gauss_rule_exactness(npts, degree):
    pts, wts = disc.gauss_rule(npts, 1)
    exact = (1 - (-1) ** (degree + 1)) / (degree + 1)
    if degree <= 2 * npts - 1:
        assert np.dot(wts, pts[:, 0] ** degree) == pytest.approx(exact, abs=1e-13)


@pytest.mark.parametrize("k", [0, 1])
def test_projection_of_constant_exact(k):
    mesh = disc.StructuredMesh((5, 3), (0.0, 0.0), (1.0, 2.0), (False, False))
    space = disc.build_space(mesh, k, 2)
    u = disc.project(space, lambda x: np.tile([3.0, -1.0], (x.shape[0], 1)))
    vals = disc.evaluate(space, u, np.random.default_rng(0).random((20, 2)) * [1, 2])
    assert np.allclose(vals, [3.0, -1.0], atol=1e-14)


# ---------------------------------------------------------------- assembly

def test_upwind_stencil_hand_assembly():
    sys = registry_get("advection-reaction-1d", {"b": 1.0, "c": 1.0})
    space = space_for(sys, 3, k=0)
    b, f = disc.assemble_system(sys, space, [1.0])
    h = 1.0 / 3.0
    expect = np.array([[1 + h, 0, 0], [-1, 1 + h, 0], [0, -1, 1 + h]])
    assert np.allclose(b.toarray(), expect, atol=1e-15)
    assert np.allclose(f, h)


def test_pure_reaction_is_mass_multiple():
    sys = registry_get("advection-reaction-2d-case1", {"b": [0.0, 0.0], "c": 2.0})
    space = space_for(sys, 3)
    ap = disc.assemble(sys, space, [2.0])
    assert np.allclose(ap.B.toarray(), 2.0 * ap.mass.toarray(), atol=1e-15)
    assert np.allclose(ap.gram.toarray(), 5.0 * ap.mass.toarray(), atol=1e-14)


def test_fs2_violation_rejected():
    sys = registry_get("advection-reaction-1d", {"c": 0.0})
    with pytest.raises(StructureError, match="FS2"):
        disc.assemble(sys, space_for(sys, 8, periodic=(True,)), [0.0])


def test_parameter_outside_box_rejected():
    sys = registry_get("advection-reaction-1d")
    with pytest.raises(ValueError, match="outside"):
        disc.assemble(sys, space_for(sys, 4), [sys.params.hi[0] + 1.0])


def test_graph_norm_examples():
    sys = registry_get("advection-reaction-1d", {"b": 1.0, "c": 0.0})
    space = space_for(sys, 8)
    one = disc.project(space, lambda x: np.ones(x.shape[0]))
    g = disc.graph_gram(sys, space, [0.0])
    assert one @ (g @ one) == pytest.approx(1.0, rel=1e-14)
    space = space_for(sys, 256)
    u = disc.project(space, lambda x: np.sin(np.pi * x[:, 0]))
    g = disc.graph_gram(sys, space, [0.0])
    assert u @ (g @ u) == pytest.approx((1 + math.pi ** 2) / 2, rel=1e-3)


@pytest.mark.parametrize("name", REGISTRY)
def test_grams_spd_at_random_parameters(name):
    sys = registry_get(name)
    space = space_for(sys, 3 if sys.d == 2 else 6)
    for mu in sys.params.sample(20, np.random.default_rng(4)):
        ap = disc.assemble(sys, space, mu)
        for mat in (ap.mass, ap.gram, ap.adjoint_gram):
            dense = mat.toarray()
            assert np.allclose(dense, dense.T, atol=1e-13)
            cholesky(dense)


@pytest.mark.parametrize("name", ["advection-reaction-1d", "advection-reaction-2d-case1", "cdr-1d",
                                  "cdr-2d", "elasticity-2d"])
def test_separable_assembly_agrees(name):
    sys = registry_get(name)
    space = space_for(sys, 4)
    op = disc.separable_operator(sys, space)
    for mu in sys.params.sample(3, np.random.default_rng(2)):
        direct, _ = disc.assemble_system(sys, space, mu)
        diff = op.matrix(mu) - direct
        assert abs(diff).max() <= 1e-12 * abs(direct).max()


@pytest.mark.parametrize("name", ["advection-reaction-2d-case1", "cdr-2d", "advection-reaction-2d-case3"])
def test_affine_gram_agrees(name):
    sys = registry_get(name)
    space = space_for(sys, 3)
    mats, weight_fn = disc.affine_gram(sys, space)
    for mu in sys.params.sample(3, np.random.default_rng(5)):
        direct = disc.graph_gram(sys, space, mu)
        summed = sum(w * m for w, m in zip(weight_fn(mu), mats))
        assert abs(summed - direct).max() <= 1e-12 * abs(direct).max()


def test_rotating_cases_not_flux_separable():
    assert not disc.flux_separable(registry_get("advection-reaction-2d-case2"))
    with pytest.raises(StructureError):
        disc.separable_operator(registry_get("advection-reaction-2d-case3"),
                                space_for(registry_get("advection-reaction-2d-case3"), 2))


# ---------------------------------------------------------------- identities

@pytest.mark.parametrize("name,raw", [
    ("advection-reaction-2d-case1", {"b_grad": [[0.5, 0.25], [0.0, -0.3]]}),
    ("advection-reaction-1d", {"b_slope": 0.5}),
    ("cdr-2d", {}),
    ("elasticity-2d", {}),
])
def test_integration_by_parts_identity(name, raw):
    sys = registry_get(name, raw)
    space = space_for(sys, 16 if sys.d == 1 else 6)
    rng = np.random.default_rng(8)
    ap = disc.assemble(sys, space, sys.params.sample(1, rng)[0])
    for _ in range(5):
        u = disc.random_continuous_field(space, rng)
        v = disc.random_continuous_field(space, rng)
        assert disc.ibp_residual(ap, u, v) <= 1e-10
        assert disc.ibp_energy_residual(ap, u) <= 1e-10


def test_compact_fields_have_no_boundary_term():
    sys = registry_get("advection-reaction-2d-case1", {"b_grad": [[0.5, 0.0], [0.0, 0.5]]})
    space = space_for(sys, 6)
    rng = np.random.default_rng(1)
    ap = disc.assemble(sys, space, [3.0])
    u = disc.random_continuous_field(space, rng, compact=True)
    assert abs(u @ (ap.boundary_d @ u)) <= 1e-12
    v = disc.random_continuous_field(space, rng, compact=True)
    lhs = v @ (ap.volume @ u) - u @ (ap.adjoint_volume @ v)
    assert abs(lhs) <= 1e-12 * np.sqrt((u @ ap.gram @ u) * (v @ ap.gram @ v))


@pytest.mark.parametrize("name", ["advection-reaction-2d-case1", "cdr-2d", "advection-reaction-2d-case3"])
def test_flux_vanishes_on_continuous_fields(name):
    sys = registry_get(name)
    space = space_for(sys, 5)
    rng = np.random.default_rng(3)
    ap = disc.assemble(sys, space, sys.params.sample(1, rng)[0])
    u = disc.random_continuous_field(space, rng)
    volume_only = ap.volume @ u + 0.5 * ((ap.boundary_m - ap.boundary_d) @ u)
    assert np.allclose(ap.B @ u, volume_only, atol=1e-12 * np.abs(ap.B @ u).max())


def test_energy_identity_of_upwind_form():
    # u^T B u = ((A0 + A0^T - div A) u, u)/2 + jumps|D| jumps/2 + u M u/2 >= eps |u|^2
    sys = registry_get("cdr-2d")
    space = space_for(sys, 4)
    rng = np.random.default_rng(0)
    mu = sys.params.sample(1, rng)[0]
    ap = disc.assemble(sys, space, mu)
    for _ in range(10):
        u = rng.standard_normal(space.ndof)
        assert u @ (ap.B @ u) >= ap.epsilon * (u @ (ap.mass @ u)) * (1 - 1e-12)


@pytest.mark.parametrize("k,eoc_min", [(0, 0.8), (1, 1.4)])
def test_manufactured_solution_convergence(k, eoc_min):
    sys = registry_get("advection-reaction-1d", {"b": 1.0, "c": 1.0, "f": 1.0})
    exact = lambda x: 1.0 - np.exp(-x[:, 0])
    errors = []
    for n in (32, 64, 128, 256):
        space = space_for(sys, n, k=k)
        b, f = disc.assemble_system(sys, space, [1.0])
        errors.append(disc.l2_error(space, sparse_solve(b, f, block=space.block), exact))
    eoc = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(eoc >= eoc_min), eoc


def test_matrix_market_round_trip(tmp_path):
    sys = registry_get("cdr-1d")
    b, _ = disc.assemble_system(sys, space_for(sys, 4), [1.0, 0.0, 2.0])
    disc.export_matrix_market(tmp_path / "b.mtx", b, "test")
    back = scipy.io.mmread(str(tmp_path / "b.mtx"))
    assert abs(sp.csr_matrix(back) - b).max() == 0.0


def test_boundary_trace_shapes():
    sys = registry_get("cdr-2d")
    d_faces, m_faces = disc.boundary_trace_matrices(sys, space_for(sys, 3), [1.0, 0.0, 2.0])
    assert d_faces.shape == m_faces.shape == (12, 6, 6)
    assert np.allclose(d_faces, d_faces.transpose(0, 2, 1))
