"""Upwind discontinuous-Galerkin discretization on uniform tensor meshes.

Degrees of freedom are numbered ``(cell * m + component) * nb + b`` with
cells ordered x-fastest and ``b`` indexing the tensor Legendre basis
``{1, xi}`` (k = 1) or ``{1}`` (k = 0) per axis, x-fastest as well.

The DG bilinear form is assembled in strong form,

    B(u, v) = sum_K (A u, v)_K
              + sum_F int_F (P [u^- - u^+]) . v^-  +  (Q [u^+ - u^-]) . v^+
              + int_dOmega 1/2 (M - D) u . v,

with ``P = (|D| - D)/2`` and ``Q = (|D| + D)/2`` for the face matrix
``D = sum_i n_i A^i`` of the normal pointing from ``K^-`` into ``K^+``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import StructureError
from .numerics import sym_eig


# --------------------------------------------------------------------------
# Mesh and space
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StructuredMesh:
    """Uniform tensor grid on a box."""

    cells: tuple
    lo: tuple = None
    hi: tuple = None
    periodic: tuple = None

    def __post_init__(self):
        cells = tuple(int(c) for c in np.atleast_1d(self.cells))
        d = len(cells)
        if d not in (1, 2):
            raise ValueError(f"only 1D and 2D meshes are supported, got d={d}")
        if any(c < 1 for c in cells):
            raise ValueError("at least one cell per axis is required")
        lo = tuple(float(v) for v in (self.lo if self.lo is not None else (0.0,) * d))
        hi = tuple(float(v) for v in (self.hi if self.hi is not None else (1.0,) * d))
        per = tuple(bool(p) for p in (self.periodic if self.periodic is not None else (False,) * d))
        if len(lo) != d or len(hi) != d or len(per) != d:
            raise ValueError("mesh bounds and periodic flags must match the dimension")
        if any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("mesh cells must have positive volume")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "periodic", per)

    @classmethod
    def for_system(cls, sys, cells, periodic=None):
        cells = tuple(np.broadcast_to(np.atleast_1d(cells), (sys.d,)).tolist())
        return cls(cells, tuple(a for a, _ in sys.box), tuple(b for _, b in sys.box), periodic)

    @property
    def d(self):
        return len(self.cells)

    @property
    def ncells(self):
        return int(np.prod(self.cells))

    @property
    def h(self):
        return np.array([(b - a) / n for a, b, n in zip(self.lo, self.hi, self.cells)])

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    def multi_index(self):
        """Per-cell integer coordinates, shape ``(ncells, d)``, x-fastest."""
        idx = np.arange(self.ncells)
        out = np.empty((self.ncells, self.d), dtype=int)
        for a, n in enumerate(self.cells):
            out[:, a] = idx % n
            idx = idx // n
        return out

    def strides(self):
        return np.cumprod((1,) + self.cells[:-1])

    def lower_corners(self):
        return np.array(self.lo) + self.multi_index() * self.h


@dataclass(frozen=True)
class DGSpace:
    mesh: StructuredMesh
    k: int
    m: int

    def __post_init__(self):
        if self.k not in (0, 1):
            raise ValueError(f"polynomial order must be 0 or 1, got {self.k}")
        if self.m < 1:
            raise ValueError("state dimension must be positive")

    @property
    def d(self):
        return self.mesh.d

    @property
    def nb(self):
        return (self.k + 1) ** self.d

    @property
    def block(self):
        return self.m * self.nb

    @property
    def ndof(self):
        return self.mesh.ncells * self.block

    def dof(self, cell, comp, b):
        return (np.asarray(cell) * self.m + comp) * self.nb + b

    def cell_dofs(self, cells):
        cells = np.asarray(cells)
        return cells[..., None] * self.block + np.arange(self.block)


def build_space(mesh, k, m):
    """DG(k) space with ``m`` components on ``mesh``."""
    return DGSpace(mesh, int(k), int(m))


# --------------------------------------------------------------------------
# Reference element
# --------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def gauss_rule(npts, d):
    """Tensor Gauss-Legendre rule on ``[-1, 1]^d`` (x-fastest)."""
    x1, w1 = np.polynomial.legendre.leggauss(npts)
    if d == 0:
        return np.zeros((1, 0)), np.ones(1)
    grids = np.meshgrid(*([x1] * d), indexing="ij")
    pts = np.stack([g.ravel(order="F") for g in grids], axis=1)
    wg = np.meshgrid(*([w1] * d), indexing="ij")
    w = np.prod(np.stack([g.ravel(order="F") for g in wg], axis=1), axis=1)
    return pts, w


def legendre_basis(k, ref):
    """Values ``(nq, nb)`` and reference gradients ``(nq, nb, d)`` of the tensor basis."""
    ref = np.atleast_2d(ref)
    nq, d = ref.shape
    vals1 = []
    ders1 = []
    for a in range(d):
        xi = ref[:, a]
        if k == 0:
            vals1.append(np.stack([np.ones(nq)], axis=1))
            ders1.append(np.zeros((nq, 1)))
        else:
            vals1.append(np.stack([np.ones(nq), xi], axis=1))
            ders1.append(np.stack([np.zeros(nq), np.ones(nq)], axis=1))
    nb = (k + 1) ** d
    vals = np.ones((nq, nb))
    grads = np.ones((nq, nb, d))
    for b in range(nb):
        digits = [(b // (k + 1) ** a) % (k + 1) for a in range(d)]
        for a in range(d):
            vals[:, b] *= vals1[a][:, digits[a]]
            for g in range(d):
                grads[:, b, g] *= (ders1 if g == a else vals1)[a][:, digits[a]]
    return vals, grads


def basis_norms(k, d):
    """``int phi_b^2`` over the reference cube."""
    one = np.array([2.0] if k == 0 else [2.0, 2.0 / 3.0])
    nb = (k + 1) ** d
    out = np.ones(nb)
    for b in range(nb):
        for a in range(d):
            out[b] *= one[(b // (k + 1) ** a) % (k + 1)]
    return out


def quadrature_points_per_axis(k, tag):
    """Gauss points per axis: exact for degree 2k+3, one more for general coefficients."""
    return k + 2 + (1 if tag == "general" else 0)


# --------------------------------------------------------------------------
# Geometry cache
# --------------------------------------------------------------------------

@dataclass
class _Faces:
    axis: int
    minus: np.ndarray
    plus: np.ndarray
    points: np.ndarray          # (nf, nfq, d)
    weights: np.ndarray         # (nfq,) including the face Jacobian
    phi_minus: np.ndarray       # (nfq, nb) trace from the minus cell
    phi_plus: np.ndarray


@dataclass
class _Boundary:
    axis: int
    sign: float
    cells: np.ndarray
    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    phi: np.ndarray
    face_ref: np.ndarray        # (nfq, d-1) reference coordinates on the face


@dataclass
class Geometry:
    space: DGSpace
    npts: int
    points: np.ndarray          # (nc, nq, d)
    weights: np.ndarray         # (nq,) including the cell Jacobian
    phi: np.ndarray             # (nq, nb)
    dphi: np.ndarray            # (nq, nb, d) physical gradients
    interior: list = field(default_factory=list)
    boundary: list = field(default_factory=list)


@functools.lru_cache(maxsize=32)
def geometry(space, npts):
    mesh = space.mesh
    d, h = mesh.d, mesh.h
    ref, w = gauss_rule(npts, d)
    phi, dref = legendre_basis(space.k, ref)
    dphi = dref * (2.0 / h)
    corners = mesh.lower_corners()
    points = corners[:, None, :] + (ref[None, :, :] + 1.0) * 0.5 * h
    geo = Geometry(space, npts, points, w * np.prod(h / 2.0), phi, dphi)

    mi = mesh.multi_index()
    strides = mesh.strides()
    fref, fw = gauss_rule(npts, d - 1)
    for a in range(d):
        other = [j for j in range(d) if j != a]
        fjac = float(np.prod(h[other] / 2.0)) if other else 1.0

        def trace_ref(value):
            r = np.insert(fref, a, value, axis=1)
            return r

        ref_m, ref_p = trace_ref(1.0), trace_ref(-1.0)
        phi_m = legendre_basis(space.k, ref_m)[0]
        phi_p = legendre_basis(space.k, ref_p)[0]
        n_a = mesh.cells[a]
        if mesh.periodic[a]:
            minus = np.arange(mesh.ncells)
            plus = minus + strides[a] - np.where(mi[:, a] == n_a - 1, n_a * strides[a], 0)
        else:
            minus = np.flatnonzero(mi[:, a] < n_a - 1)
            plus = minus + strides[a]
        if minus.size:
            pts = corners[minus][:, None, :] + (ref_m[None, :, :] + 1.0) * 0.5 * h
            geo.interior.append(_Faces(a, minus, plus, pts, fw * fjac, phi_m, phi_p))
        if not mesh.periodic[a]:
            for sign, value in ((-1.0, -1.0), (1.0, 1.0)):
                cells = np.flatnonzero(mi[:, a] == (0 if sign < 0 else n_a - 1))
                ref_b = trace_ref(value)
                pts = corners[cells][:, None, :] + (ref_b[None, :, :] + 1.0) * 0.5 * h
                nrm = np.zeros_like(pts)
                nrm[..., a] = sign
                geo.boundary.append(_Boundary(a, sign, cells, pts, nrm, fw * fjac,
                                              legendre_basis(space.k, ref_b)[0], fref))
    return geo


def geometry_for(sys, space):
    if sys.d != space.d or sys.m != space.m:
        raise ValueError(f"space (d={space.d}, m={space.m}) does not match system (d={sys.d}, m={sys.m})")
    return geometry(space, quadrature_points_per_axis(space.k, sys.tag))


# --------------------------------------------------------------------------
# Local kernels
# --------------------------------------------------------------------------

def _flat(arr):
    return arr.reshape((-1,) + arr.shape[2:])


def _unflat(arr, nc, nq):
    return arr.reshape((nc, nq) + arr.shape[1:])


def _eval_cells(func, mu, points):
    nc, nq, _ = points.shape
    return _unflat(func(mu, _flat(points)), nc, nq)


def apply_basis(a0, ai, geo):
    """Operator applied to every basis function at every quadrature point.

    Returns ``(nc, nq, m, m * nb)`` with columns ordered (component, basis).
    ``a0`` is ``(nc, nq, m, m)`` or None, ``ai`` is ``(d, nc, nq, m, m)`` or None.
    """
    out = 0.0
    if a0 is not None:
        out = np.einsum("cqrs,qb->cqrsb", a0, geo.phi)
    if ai is not None:
        out = out + np.einsum("icqrs,qbi->cqrsb", ai, geo.dphi)
    nc, nq, m = out.shape[:3]
    return out.reshape(nc, nq, m, -1)


def _volume_blocks(applied, geo):
    # (phi_{r,b}, (A phi)_{s,b'}) -> [c, (r,b), (s,b')]
    nc, nq, m, ncol = applied.shape
    blk = np.einsum("q,qb,cqrj->crbj", geo.weights, geo.phi, applied)
    return blk.reshape(nc, m * geo.phi.shape[1], ncol)


def _gram_blocks(left, right, weights):
    return np.einsum("q,cqri,cqrj->cij", weights, left, right)


def _face_blocks(mat, weights, phi_test, phi_trial):
    nf, nq, m, _ = mat.shape
    nb = phi_test.shape[1]
    blk = np.einsum("q,fqrs,qb,qe->frbse", weights, mat, phi_test, phi_trial)
    return blk.reshape(nf, m * nb, m * nb)


def spectral_abs(mat):
    """``|D|`` of a stack of symmetric matrices via their eigen-decomposition."""
    shape = mat.shape
    m = shape[-1]
    if m == 1:
        return np.abs(mat)
    flat = mat.reshape(-1, m, m)
    vals, vecs = sym_eig(flat)
    out = np.einsum("pij,pj,pkj->pik", vecs, np.abs(vals), vecs)
    return out.reshape(shape)


class _Builder:
    """Collects local blocks and produces a CSR matrix."""

    def __init__(self, space):
        self.space = space
        self.rows, self.cols, self.vals = [], [], []

    def add(self, test_cells, trial_cells, blocks):
        rd = self.space.cell_dofs(test_cells)
        cd = self.space.cell_dofs(trial_cells)
        self.rows.append(np.broadcast_to(rd[:, :, None], blocks.shape).ravel())
        self.cols.append(np.broadcast_to(cd[:, None, :], blocks.shape).ravel())
        self.vals.append(blocks.ravel())

    def matrix(self):
        n = self.space.ndof
        if not self.vals:
            return sp.csr_matrix((n, n))
        mat = sp.coo_matrix((np.concatenate(self.vals),
                             (np.concatenate(self.rows), np.concatenate(self.cols))),
                            shape=(n, n)).tocsr()
        mat.sum_duplicates()
        mat.sort_indices()
        return mat


def _all_cells(space):
    return np.arange(space.mesh.ncells)


def mass_matrix(space):
    """Block-diagonal L2 mass matrix."""
    norms = basis_norms(space.k, space.d) * np.prod(space.mesh.h / 2.0)
    diag = np.tile(np.tile(norms, space.m), space.mesh.ncells)
    return sp.diags(diag).tocsr()


# --------------------------------------------------------------------------
# Assembly
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AssembledProblem:
    """All discrete operators of one parameter value.

    ``volume[i, j] = (A phi_j, phi_i)`` cellwise, ``adjoint_volume`` is the
    same for the formal adjoint, ``boundary_d`` and ``boundary_m`` are the
    boundary integrals of ``phi_i . D phi_j`` and ``phi_i . M phi_j``.
    """

    mu: np.ndarray
    space: DGSpace
    B: sp.csr_matrix
    F: np.ndarray
    mass: sp.csr_matrix
    gram: sp.csr_matrix
    volume: sp.csr_matrix
    adjoint_volume: sp.csr_matrix
    boundary_d: sp.csr_matrix
    boundary_m: sp.csr_matrix
    positivity: sp.csr_matrix
    adjoint_gram: sp.csr_matrix
    epsilon: float


def _check_mu(sys, mu):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    if not sys.params.contains(mu):
        raise ValueError(f"parameter {mu.tolist()} lies outside the box {sys.params.to_dict()}")
    return mu


def _fs2_min(sys, mu, geo):
    pts = _flat(geo.points)
    a0 = sys.a0(mu, pts)
    sym = a0 + a0.transpose(0, 2, 1) - sys.divergence(mu, pts)
    sym = 0.5 * (sym + sym.transpose(0, 2, 1))
    if sys.m == 1:
        return float(sym.min()) / 2
    return float(sym_eig(sym, compute_vectors=False)[:, 0].min()) / 2


def _rhs_vector(sys, mu, geo):
    f = _eval_cells(sys.source, mu, geo.points)
    vec = np.einsum("q,qb,cqr->crb", geo.weights, geo.phi, f)
    return vec.reshape(-1)


def _flux_and_boundary(sys, mu, geo, builder, first=None, boundary=None, scale=1.0):
    """Upwind interface terms and the 1/2 (M - D) boundary term."""
    first = first if first is not None else [lambda x, a=a: sys.a[a](mu, x) for a in range(sys.d)]
    boundary = boundary if boundary is not None else (lambda x, n: sys.boundary(mu, x, n))
    for fc in geo.interior:
        nf, nq, _ = fc.points.shape
        dmat = _unflat(first[fc.axis](_flat(fc.points)), nf, nq) * scale
        adm = spectral_abs(dmat)
        pm = 0.5 * (adm - dmat)
        qm = 0.5 * (adm + dmat)
        builder.add(fc.minus, fc.minus, _face_blocks(pm, fc.weights, fc.phi_minus, fc.phi_minus))
        builder.add(fc.minus, fc.plus, -_face_blocks(pm, fc.weights, fc.phi_minus, fc.phi_plus))
        builder.add(fc.plus, fc.minus, -_face_blocks(qm, fc.weights, fc.phi_plus, fc.phi_minus))
        builder.add(fc.plus, fc.plus, _face_blocks(qm, fc.weights, fc.phi_plus, fc.phi_plus))
    for bd in geo.boundary:
        nf, nq, _ = bd.points.shape
        dmat = bd.sign * _unflat(first[bd.axis](_flat(bd.points)), nf, nq) * scale
        mmat = _unflat(boundary(_flat(bd.points), _flat(bd.normals)), nf, nq) * scale
        builder.add(bd.cells, bd.cells, _face_blocks(0.5 * (mmat - dmat), bd.weights, bd.phi, bd.phi))


def _boundary_matrices(sys, mu, geo, space):
    bd_d, bd_m = _Builder(space), _Builder(space)
    for bd in geo.boundary:
        nf, nq, _ = bd.points.shape
        dmat = bd.sign * _eval_cells(sys.a[bd.axis], mu, bd.points)
        mmat = _unflat(sys.boundary(mu, _flat(bd.points), _flat(bd.normals)), nf, nq)
        bd_d.add(bd.cells, bd.cells, _face_blocks(dmat, bd.weights, bd.phi, bd.phi))
        bd_m.add(bd.cells, bd.cells, _face_blocks(mmat, bd.weights, bd.phi, bd.phi))
    return bd_d.matrix(), bd_m.matrix()


def _require_positive(sys, mu, geo):
    eps = _fs2_min(sys, mu, geo)
    if not eps > 0:
        raise StructureError(
            f"FS2 fails for {sys.id} at mu={np.asarray(mu).tolist()}: "
            f"lambda_min(A0 + A0^T - div A)/2 = {eps:.6g} <= 0"
        )
    return eps


def assemble_system(sys, space, mu):
    """Only the DG system matrix ``B`` and load vector ``F``."""
    mu = _check_mu(sys, mu)
    geo = geometry_for(sys, space)
    _require_positive(sys, mu, geo)
    a0 = _eval_cells(sys.a0, mu, geo.points)
    ai = np.stack([_eval_cells(a, mu, geo.points) for a in sys.a])
    cells = _all_cells(space)
    builder = _Builder(space)
    builder.add(cells, cells, _volume_blocks(apply_basis(a0, ai, geo), geo))
    _flux_and_boundary(sys, mu, geo, builder)
    return builder.matrix(), _rhs_vector(sys, mu, geo)


def load_vector(sys, space, mu):
    """Load vector ``F`` alone, after the same parameter and FS2 checks as assembly."""
    mu = _check_mu(sys, mu)
    geo = geometry_for(sys, space)
    _require_positive(sys, mu, geo)
    return _rhs_vector(sys, mu, geo)


def assemble(sys, space, mu):
    """Assemble every parameter-dependent discrete operator at ``mu``.

    Raises
    ------
    StructureError
        If FS2 fails at a quadrature point.
    ValueError
        If ``mu`` lies outside the parameter box.
    """
    mu = _check_mu(sys, mu)
    geo = geometry_for(sys, space)
    eps = _require_positive(sys, mu, geo)
    cells = _all_cells(space)
    a0 = _eval_cells(sys.a0, mu, geo.points)
    ai = np.stack([_eval_cells(a, mu, geo.points) for a in sys.a])
    div = _eval_cells(sys.divergence, mu, geo.points)
    applied = apply_basis(a0, ai, geo)
    a0_adj = a0.transpose(0, 1, 3, 2) - div
    applied_adj = apply_basis(a0_adj, -ai.transpose(0, 1, 2, 4, 3), geo)

    vol = _volume_blocks(applied, geo)
    system = _Builder(space)
    system.add(cells, cells, vol)
    _flux_and_boundary(sys, mu, geo, system)

    vol_b = _Builder(space)
    vol_b.add(cells, cells, vol)
    adj_b = _Builder(space)
    adj_b.add(cells, cells, _volume_blocks(applied_adj, geo))

    sym = a0 + a0.transpose(0, 1, 3, 2) - div
    pos_b = _Builder(space)
    pos_b.add(cells, cells, _volume_blocks(apply_basis(sym, None, geo), geo))

    mass = mass_matrix(space)
    k_b = _Builder(space)
    k_b.add(cells, cells, _gram_blocks(applied, applied, geo.weights))
    ka_b = _Builder(space)
    ka_b.add(cells, cells, _gram_blocks(applied_adj, applied_adj, geo.weights))
    bd_d, bd_m = _boundary_matrices(sys, mu, geo, space)
    return AssembledProblem(
        mu=mu, space=space, B=system.matrix(), F=_rhs_vector(sys, mu, geo),
        mass=mass, gram=(mass + k_b.matrix()).tocsr(),
        volume=vol_b.matrix(), adjoint_volume=adj_b.matrix(),
        boundary_d=bd_d, boundary_m=bd_m, positivity=pos_b.matrix(),
        adjoint_gram=(mass + ka_b.matrix()).tocsr(), epsilon=eps,
    )


def graph_gram(sys, space, mu):
    """Broken graph-norm Gram ``M + K`` with ``K_ij = sum_K (A phi_i, A phi_j)_K``."""
    mu = _check_mu(sys, mu)
    geo = geometry_for(sys, space)
    a0 = _eval_cells(sys.a0, mu, geo.points)
    ai = np.stack([_eval_cells(a, mu, geo.points) for a in sys.a])
    applied = apply_basis(a0, ai, geo)
    cells = _all_cells(space)
    k_b = _Builder(space)
    k_b.add(cells, cells, _gram_blocks(applied, applied, geo.weights))
    return (mass_matrix(space) + k_b.matrix()).tocsr()


def reference_gram(sys, space):
    """Parameter-independent Gram ``|u|^2 + |sum_i A_tilde^i d_i u|^2`` (broken).

    Requires the N1 factorization ``A^i = a_hat * A_tilde^i``.
    """
    if sys.n1 is None:
        raise StructureError(f"{sys.id} has no N1 factorization; the reference norm is undefined")
    geo = geometry_for(sys, space)
    nc, nq, _ = geo.points.shape
    tilde = np.stack([_unflat(np.broadcast_to(np.asarray(at(_flat(geo.points)), dtype=float),
                                              (nc * nq, sys.m, sys.m)), nc, nq)
                      for at in sys.n1.a_tilde])
    applied = apply_basis(None, tilde, geo)
    cells = _all_cells(space)
    k_b = _Builder(space)
    k_b.add(cells, cells, _gram_blocks(applied, applied, geo.weights))
    return (mass_matrix(space) + k_b.matrix()).tocsr()


# --------------------------------------------------------------------------
# Separable assembly
# --------------------------------------------------------------------------

def _term_arrays(term, geo, m, d):
    nc, nq, _ = geo.points.shape
    pts = _flat(geo.points)

    def ev(func):
        return _unflat(np.broadcast_to(np.asarray(func(pts), dtype=float), (nc * nq, m, m)), nc, nq)

    a0 = ev(term.zeroth) if term.zeroth is not None else None
    ai = np.stack([ev(f) for f in term.first]) if term.first is not None else None
    return a0, ai


@dataclass(frozen=True)
class SeparableOperator:
    """``B_mu = sum_q theta_q(mu) B_q`` with precomputed components."""

    system: object
    space: DGSpace
    components: tuple

    def weights(self, mu):
        return self.system.expansion.weights(mu)

    def matrix(self, mu):
        w = self.weights(mu)
        out = self.components[0] * w[0]
        for q in range(1, len(self.components)):
            out = out + self.components[q] * w[q]
        return out.tocsr()


def flux_separable(sys, samples=9):
    """True when the upwind flux is parameter-independent under the expansion.

    That holds when the boundary is declared parameter-independent and all
    first-order parts sit in terms whose weight is identically one.
    """
    exp = sys.expansion
    if exp is None or not sys.boundary.param_independent_boundary:
        return False
    transport = exp.transport_terms()
    if len(transport) != 1:
        return False
    mus = sys.params.grid(max(2, int(round(samples ** (1.0 / sys.params.dim)))))
    return all(abs(exp.weights(mu)[transport[0]] - 1.0) <= 1e-15 for mu in mus)


def separable_operator(sys, space):
    """Precompute ``B_q`` so that ``B_mu = sum_q theta_q(mu) B_q``.

    Raises
    ------
    StructureError
        If the system has no expansion or its flux terms vary with mu.
    """
    if not flux_separable(sys):
        raise StructureError(f"{sys.id} has no flux-separable expansion")
    geo = geometry_for(sys, space)
    cells = _all_cells(space)
    mu_ref = np.array(sys.params.lo)
    comps = []
    for term in sys.expansion.terms:
        a0, ai = _term_arrays(term, geo, sys.m, sys.d)
        builder = _Builder(space)
        builder.add(cells, cells, _volume_blocks(apply_basis(a0, ai, geo), geo))
        if term.first is not None:
            _flux_and_boundary(sys, mu_ref, geo, builder, first=list(term.first),
                               boundary=lambda x, n: sys.boundary(mu_ref, x, n))
        comps.append(builder.matrix())
    return SeparableOperator(sys, space, tuple(comps))


def affine_gram(sys, space):
    """Graph Gram as ``G_mu = sum_j w_j(mu) G_j``.

    Returns
    -------
    matrices : list of csr matrices
        ``[M, K_00, K_01 + K_10, ..., K_QQ]``.
    weight_fn : callable
        ``mu -> (J,)`` weights matching ``matrices``.
    """
    if sys.expansion is None:
        raise StructureError(f"{sys.id} has no separable expansion")
    geo = geometry_for(sys, space)
    cells = _all_cells(space)
    applied = [apply_basis(*_term_arrays(t, geo, sys.m, sys.d), geo) for t in sys.expansion.terms]
    mats = [mass_matrix(space)]
    pairs = []
    for q in range(len(applied)):
        for r in range(q, len(applied)):
            blk = _gram_blocks(applied[q], applied[r], geo.weights)
            if r != q:
                blk = blk + blk.transpose(0, 2, 1)
            builder = _Builder(space)
            builder.add(cells, cells, blk)
            mats.append(builder.matrix())
            pairs.append((q, r))
    exp = sys.expansion

    def weight_fn(mu):
        th = exp.weights(mu)
        return np.array([1.0] + [th[q] * th[r] for q, r in pairs])

    return mats, weight_fn


# --------------------------------------------------------------------------
# Fields
# --------------------------------------------------------------------------

def project(space, func, npts=None):
    """Cellwise L2 projection of ``func(x) -> (n, m)`` (or ``(n,)`` for m=1)."""
    npts = npts or max(space.k + 2, 6)
    geo = geometry(space, npts)
    nc, nq, _ = geo.points.shape
    vals = np.asarray(func(_flat(geo.points)), dtype=float).reshape(nc, nq, space.m)
    num = np.einsum("q,qb,cqr->crb", geo.weights, geo.phi, vals)
    norms = basis_norms(space.k, space.d) * np.prod(space.mesh.h / 2.0)
    return (num / norms).reshape(-1)


def evaluate(space, u, x):
    """Point values ``(n, m)`` of the DG field ``u`` at points ``x``."""
    mesh = space.mesh
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lo, h = np.array(mesh.lo), mesh.h
    idx = np.clip(np.floor((x - lo) / h).astype(int), 0, np.array(mesh.cells) - 1)
    cell = (idx * mesh.strides()).sum(axis=1)
    ref = 2.0 * (x - lo - idx * h) / h - 1.0
    phi = legendre_basis(space.k, ref)[0]
    coef = np.asarray(u).reshape(mesh.ncells, space.m, space.nb)[cell]
    return np.einsum("pb,prb->pr", phi, coef)


def l2_error(space, u, exact, npts=None):
    """``||u - exact||_{L2}`` by cellwise Gauss quadrature."""
    npts = npts or space.k + 4
    geo = geometry(space, npts)
    nc, nq, _ = geo.points.shape
    coef = np.asarray(u).reshape(nc, space.m, space.nb)
    uh = np.einsum("qb,crb->cqr", geo.phi, coef)
    ex = np.asarray(exact(_flat(geo.points)), dtype=float).reshape(nc, nq, space.m)
    return float(np.sqrt(np.einsum("q,cqr->", geo.weights, (uh - ex) ** 2)))


def continuous_field(space, vertex_values):
    """DG(1) coefficients of the continuous piecewise (bi)linear interpolant.

    ``vertex_values`` has shape ``(m, nx + 1[, ny + 1])`` indexed (x, y).
    Periodic axes use vertex 0 in place of the last vertex.
    """
    if space.k != 1:
        raise ValueError("continuous fields need k = 1")
    mesh = space.mesh
    vals = np.asarray(vertex_values, dtype=float)
    expect = (space.m,) + tuple(n + 1 for n in mesh.cells)
    if vals.shape != expect:
        raise ValueError(f"vertex values must have shape {expect}, got {vals.shape}")
    for a, per in enumerate(mesh.periodic):
        if per:
            idx = [slice(None)] * vals.ndim
            idx[a + 1] = -1
            src = [slice(None)] * vals.ndim
            src[a + 1] = 0
            vals = vals.copy()
            vals[tuple(idx)] = vals[tuple(src)]
    mi = mesh.multi_index()
    out = np.empty((mesh.ncells, space.m, space.nb))
    if mesh.d == 1:
        left = vals[:, mi[:, 0]].T
        right = vals[:, mi[:, 0] + 1].T
        out[:, :, 0] = 0.5 * (left + right)
        out[:, :, 1] = 0.5 * (right - left)
    else:
        ix, iy = mi[:, 0], mi[:, 1]
        v00, v10 = vals[:, ix, iy].T, vals[:, ix + 1, iy].T
        v01, v11 = vals[:, ix, iy + 1].T, vals[:, ix + 1, iy + 1].T
        out[:, :, 0] = 0.25 * (v00 + v10 + v01 + v11)
        out[:, :, 1] = 0.25 * (-v00 + v10 - v01 + v11)
        out[:, :, 2] = 0.25 * (-v00 - v10 + v01 + v11)
        out[:, :, 3] = 0.25 * (v00 - v10 - v01 + v11)
    return out.reshape(-1)


def random_continuous_field(space, rng, compact=False):
    """Continuous DG(1) field from standard-normal vertex values.

    With ``compact=True`` all boundary vertices are zero.
    """
    shape = (space.m,) + tuple(n + 1 for n in space.mesh.cells)
    vals = rng.standard_normal(shape)
    if compact:
        for a in range(space.d):
            idx = [slice(None)] * vals.ndim
            for end in (0, -1):
                idx[a + 1] = end
                vals[tuple(idx)] = 0.0
    return continuous_field(space, vals)


def ibp_residual(ap, u, v):
    """Normalized defect of ``(A u, v) - (u, A* v) = <D u, v>``.

    Meaningful for globally continuous fields, where interface terms cancel.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    lhs = v @ (ap.volume @ u) - u @ (ap.adjoint_volume @ v) - v @ (ap.boundary_d @ u)
    norm = np.sqrt(max(u @ (ap.gram @ u), 0.0) * max(v @ (ap.gram @ v), 0.0))
    return float(abs(lhs) / norm) if norm > 0 else float(abs(lhs))


def ibp_energy_residual(ap, u):
    """Normalized defect of ``2 (A u, u) = ((A0 + A0^T - div A) u, u) + <D u, u>``."""
    u = np.asarray(u, dtype=float)
    lhs = 2.0 * (u @ (ap.volume @ u)) - u @ (ap.positivity @ u) - u @ (ap.boundary_d @ u)
    norm = u @ (ap.gram @ u)
    return float(abs(lhs) / norm) if norm > 0 else float(abs(lhs))


# --------------------------------------------------------------------------
# Boundary trace spaces
# --------------------------------------------------------------------------

def boundary_trace_matrices(sys, space, mu):
    """``D`` and ``M`` on the Legendre trace space of every boundary face.

    Returns
    -------
    d_faces, m_faces : ndarray
        Stacks ``(nfaces, t, t)`` with ``t = m * (k + 1)^(d - 1)`` and entries
        ``int_F psi_i . D psi_j`` (resp. ``M``).
    """
    mu = _check_mu(sys, mu)
    geo = geometry_for(sys, space)
    d_blocks, m_blocks = [], []
    for bd in geo.boundary:
        nf, nq, _ = bd.points.shape
        if bd.face_ref.shape[1]:
            psi, _ = legendre_basis(space.k, bd.face_ref)
        else:
            psi = np.ones((nq, 1))
        dmat = bd.sign * _eval_cells(sys.a[bd.axis], mu, bd.points)
        mmat = _unflat(sys.boundary(mu, _flat(bd.points), _flat(bd.normals)), nf, nq)
        d_blocks.append(_face_blocks(dmat, bd.weights, psi, psi))
        m_blocks.append(_face_blocks(mmat, bd.weights, psi, psi))
    if not d_blocks:
        return np.zeros((0, 0, 0)), np.zeros((0, 0, 0))
    return np.concatenate(d_blocks), np.concatenate(m_blocks)


def export_matrix_market(path, matrix, comment=""):
    """Write a sparse or dense matrix in Matrix Market text format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)


__all__ = [
    "StructuredMesh", "DGSpace", "build_space", "AssembledProblem", "assemble", "load_vector",
    "assemble_system", "graph_gram", "reference_gram", "mass_matrix", "separable_operator",
    "SeparableOperator", "flux_separable", "affine_gram", "project", "evaluate", "l2_error",
    "continuous_field", "random_continuous_field", "ibp_residual", "ibp_energy_residual",
    "boundary_trace_matrices", "export_matrix_market", "gauss_rule", "legendre_basis",
    "spectral_abs",
]
