"""Numerical checks of the structural properties of discretized Friedrichs' systems.

Each check returns a report object with a ``to_dict`` method producing
JSON-serializable output (constants, pass flags and worst-case witnesses).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import discretization as disc
from .errors import StructureError
from .numerics import EPS, cholesky, solve_lower, svd, sym_eig
from .system import spatial_samples

NORM_SLACK = 1e-8
COERCIVITY_SLACK = 0.9
INFSUP_FLOOR = 1e-10


def _dense(mat):
    return mat.toarray() if hasattr(mat, "toarray") else np.asarray(mat, dtype=float)


# --------------------------------------------------------------------------
# Coercivity
# --------------------------------------------------------------------------

def coercivity_estimate(ap, trials=32, seed=0, epsilon=None, compact=False):
    """Smallest sampled Rayleigh quotient ``u^T B u / u^T M u``.

    Random fields have standard-normal coefficients; with ``compact=True``
    every cell touching the boundary is zeroed.

    Raises
    ------
    ValueError
        If ``trials < 1`` or a sampled field vanishes.
    StructureError
        If the estimate is below ``0.9 * epsilon`` (``epsilon`` defaults
        to the FS2 constant found during assembly).
    """
    if trials < 1:
        raise ValueError("at least one trial field is required")
    rng = np.random.default_rng(seed)
    space = ap.space
    keep = np.ones(space.ndof)
    if compact:
        mi = space.mesh.multi_index()
        inner = np.all((mi > 0) & (mi < np.array(space.mesh.cells) - 1), axis=1)
        if not inner.any():
            raise ValueError("mesh has no interior cells for compactly supported fields")
        keep = np.repeat(inner.astype(float), space.block)
    best = np.inf
    for _ in range(trials):
        u = rng.standard_normal(space.ndof) * keep
        mass = float(u @ (ap.mass @ u))
        if not mass > 0:
            raise ValueError("trial field has zero L2 norm")
        best = min(best, float(u @ (ap.B @ u)) / mass)
    eps = ap.epsilon if epsilon is None else float(epsilon)
    if best < COERCIVITY_SLACK * eps:
        raise StructureError(f"coercivity estimate {best:.6g} below {COERCIVITY_SLACK} * epsilon = "
                             f"{COERCIVITY_SLACK * eps:.6g}")
    return best


# --------------------------------------------------------------------------
# Boundary admissibility
# --------------------------------------------------------------------------

@dataclass
class AdmissibilityReport:
    m1_min_eig: float
    m1_scale: float
    m1_passed: bool
    m2_rank: int
    m2_expected: int
    m2_passed: bool
    worst_face: int

    @property
    def passed(self):
        return self.m1_passed and self.m2_passed

    def to_dict(self):
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _null_space(mat, scale):
    if mat.size == 0:
        return np.zeros((0, 0))
    _, s, vt = svd(mat)
    tol = max(mat.shape) * EPS * max(scale, 1e-300) * 100
    rank = int(np.sum(s > tol))
    return vt[rank:].T


def m_admissibility_check(sys, space, mu):
    """M1 (``M + M^T`` positive semidefinite) and M2 (kernel splitting) on traces.

    Both conditions are tested face by face on the Legendre trace space of
    each boundary face; M2 requires ``ker(D - M) + ker(D + M)`` to span the
    trace space.
    """
    d_faces, m_faces = disc.boundary_trace_matrices(sys, space, mu)
    if d_faces.size == 0:
        return AdmissibilityReport(0.0, 0.0, True, 0, 0, True, -1)
    scale = float(max(np.abs(m_faces).max(), np.abs(d_faces).max(), 0.0))
    sym = m_faces + m_faces.transpose(0, 2, 1)
    lam = sym_eig(sym, compute_vectors=False)[:, 0]
    worst = int(np.argmin(lam))
    m1_min = float(lam[worst])
    m1_ok = m1_min >= -1e-10 * max(scale, 1e-300)

    rank_total, expect = 0, 0
    for df, mf in zip(d_faces, m_faces):
        k1 = _null_space(df - mf, scale)
        k2 = _null_space(df + mf, scale)
        both = np.hstack([k1, k2])
        t = df.shape[0]
        expect += t
        if both.shape[1]:
            s = svd(both, compute_uv=False)
            rank_total += int(np.sum(s > 1e-8))
    return AdmissibilityReport(m1_min, scale, bool(m1_ok), rank_total, expect,
                               rank_total == expect, worst)


# --------------------------------------------------------------------------
# Norm equivalence
# --------------------------------------------------------------------------

@dataclass
class NormEquivalenceReport:
    c_emp: float
    C_emp: float
    c_theory: float
    C_theory: float
    violations: int
    samples: int
    per_mu: list = field(default_factory=list)

    @property
    def passed(self):
        return self.violations == 0 and 0 < self.c_emp <= self.C_emp

    def to_dict(self):
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _sup_norms(sys, space, mu, xs):
    geo = disc.geometry_for(sys, space)
    pts = np.vstack([geo.points.reshape(-1, sys.d), xs])
    a0 = sys.a0(mu, pts)
    a0_norm = float(np.sqrt(max(sym_eig(a0.transpose(0, 2, 1) @ a0, compute_vectors=False)[:, -1].max(), 0.0)))
    ahat = np.broadcast_to(np.asarray(sys.n1.a_hat(mu, pts), dtype=float), (pts.shape[0],))
    return float(np.abs(ahat).max()), a0_norm


def equivalence_constants(a_hat_sup, a0_sup, kappa):
    """Squared-norm equivalence constants ``(lower, upper)`` implied by the N1 factorization."""
    upper = max(2.0 * a_hat_sup ** 2, 1.0 + 2.0 * a0_sup ** 2)
    lower = 1.0 / max(2.0 / kappa ** 2, 1.0 + 2.0 * a0_sup ** 2 / kappa ** 2)
    return lower, upper


def norm_equivalence(sys, space, mus, trials=100, seed=0, slack=NORM_SLACK):
    """Check ``c |u|_0^2 <= |u|_mu^2 <= C |u|_0^2`` on random DG fields.

    ``|u|_0`` is the parameter-independent norm built from the N1 factorization and the
    constants follow from the factorization with sup-norms sampled on quadrature points
    plus seeded uniform points.

    Raises
    ------
    StructureError
        If the system lacks the N1 factorization.
    """
    if not sys.n1_structure:
        raise StructureError(f"{sys.id} does not have the N1 structure A^i = a_hat * A_tilde^i "
                             "with a_hat >= kappa > 0; the equivalence bounds do not apply")
    rng = np.random.default_rng(seed)
    g0 = disc.reference_gram(sys, space)
    xs = spatial_samples(sys.box, 4, 256, rng)
    fields = rng.standard_normal((space.ndof, trials))
    base = np.einsum("ij,ij->j", fields, g0 @ fields)
    c_emp, C_emp = np.inf, 0.0
    c_th, C_th = np.inf, 0.0
    violations = 0
    per_mu = []
    for mu in np.atleast_2d(mus):
        gm = disc.graph_gram(sys, space, mu)
        ratio = np.einsum("ij,ij->j", fields, gm @ fields) / base
        ahat_sup, a0_sup = _sup_norms(sys, space, mu, xs)
        lo, hi = equivalence_constants(ahat_sup, a0_sup, sys.n1.kappa)
        bad = int(np.sum(ratio < lo * (1 - slack)) + np.sum(ratio > hi * (1 + slack)))
        violations += bad
        c_emp, C_emp = min(c_emp, float(ratio.min())), max(C_emp, float(ratio.max()))
        c_th, C_th = min(c_th, lo), max(C_th, hi)
        per_mu.append({"mu": np.asarray(mu).tolist(), "ratio_min": float(ratio.min()),
                       "ratio_max": float(ratio.max()), "lower": lo, "upper": hi,
                       "a_hat_sup": ahat_sup, "a0_sup": a0_sup, "violations": bad})
    return NormEquivalenceReport(c_emp, C_emp, c_th, C_th, violations,
                                 trials * len(per_mu), per_mu)


# --------------------------------------------------------------------------
# Inf-sup
# --------------------------------------------------------------------------

@dataclass
class InfSupReport:
    mu: list
    form: str
    beta_h: float
    theoretical_bound: float | None
    adjoint_inverse_norm: float | None
    ndof: int

    @property
    def passed(self):
        return self.beta_h > INFSUP_FLOOR

    def to_dict(self):
        out = asdict(self)
        out["passed"] = self.passed
        return out


def _factor(gram):
    return cholesky(0.5 * (_dense(gram) + _dense(gram).T))


def _whitened(b, l_test, l_trial):
    # l_test^{-1} b l_trial^{-T}
    left = solve_lower(l_test, b)
    return solve_lower(l_trial, left.T).T


def discrete_infsup(ap, form="weak"):
    """Smallest singular value of ``B`` in the trial/test norms of ``form``.

    weak: trial norm = broken graph norm, test norm = L2.
    ultraweak: trial norm = L2, test norm = broken adjoint graph norm.

    The ultraweak reference value ``(1 + |A^{-*}|^2)^{-1/2}`` uses
    ``|A^{-*}| ~ 1 / sigma_min(B^T)`` in L2 norms as a discrete surrogate;
    it is left as ``None`` for the weak form.
    """
    if form not in ("weak", "ultraweak"):
        raise ValueError(f"unknown form {form!r}; use 'weak' or 'ultraweak'")
    b = _dense(ap.B)
    l_mass = _factor(ap.mass)
    if form == "weak":
        op = _whitened(b, l_mass, _factor(ap.gram))
    else:
        op = _whitened(b, _factor(ap.adjoint_gram), l_mass)
    beta = float(svd(op, compute_uv=False)[-1])
    bound = inv_norm = None
    if form == "ultraweak":
        sigma_adj = float(svd(_whitened(b.T, l_mass, l_mass), compute_uv=False)[-1])
        inv_norm = 1.0 / sigma_adj if sigma_adj > 0 else float("inf")
        bound = float(1.0 / np.sqrt(1.0 + inv_norm ** 2))
    return InfSupReport(np.asarray(ap.mu).tolist(), form, beta, bound, inv_norm, ap.space.ndof)


# --------------------------------------------------------------------------
# Fell continuity diagnostic
# --------------------------------------------------------------------------

def fell_continuity_diagnostic(section, path, gram):
    """Largest finite-difference slope of ``mu -> |section(mu)|_mu`` along ``path``.

    Parameters
    ----------
    section : callable
        ``mu -> dof vector``.
    path : (P, p) array_like
        Ordered parameter samples, at least three.
    gram : callable
        ``mu -> Gram matrix`` of the parameter-dependent norm.
    """
    path = np.atleast_2d(np.asarray(path, dtype=float))
    if path.shape[0] == 1 and path.shape[1] >= 3:
        path = path.T
    if path.shape[0] < 3:
        raise ValueError("the path needs at least three samples")
    norms = []
    for mu in path:
        v = np.asarray(section(mu), dtype=float)
        norms.append(float(np.sqrt(max(v @ (gram(mu) @ v), 0.0))))
    norms = np.array(norms)
    steps = np.linalg.norm(np.diff(path, axis=0), axis=1)
    if np.any(steps == 0):
        raise ValueError("consecutive path samples must differ")
    jumps = np.abs(np.diff(norms)) / steps
    return float(jumps.max())


def sample_parameters(sys, count, seed):
    """Seeded uniform parameter samples in the system's box."""
    return sys.params.sample(count, np.random.default_rng(seed))


__all__ = [
    "coercivity_estimate", "m_admissibility_check", "AdmissibilityReport", "norm_equivalence",
    "NormEquivalenceReport", "equivalence_constants", "discrete_infsup", "InfSupReport",
    "fell_continuity_diagnostic", "sample_parameters",
]
