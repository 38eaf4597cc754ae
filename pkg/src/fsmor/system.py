"""Parametrized Friedrichs' systems.

A Friedrichs' operator acts on vector fields ``u : Omega -> R^m`` as

    A_mu u = A0(mu, x) u + sum_i A^i(mu, x) d_i u

with symmetric first-order coefficients and a positivity condition on
``A0 + A0^T - div A``.  Boundary conditions are encoded by an admissible
boundary operator ``M(mu, x, n)``.

Coefficient callables are vectorized: they receive one parameter point
``mu`` of shape ``(p,)`` and points ``x`` of shape ``(n, d)`` and return
arrays of shape ``(n, m, m)`` (matrices) or ``(n, m)`` (right-hand sides).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, EvaluationError
from .numerics import sym_eig

SYMMETRY_ATOL = 1e-12
N_RANDOM_DEFAULT = 256
FD_RELATIVE_STEP = 1e-6

COEFFICIENT_TAGS = ("constant", "polynomial", "general")
VERDICT_CERTIFIED = "exponential-certified"
VERDICT_UNCERTIFIED = "uncertified"


@dataclass(frozen=True)
class ParameterDomain:
    """Compact box ``prod_k [lo_k, hi_k]`` of parameters."""

    lo: tuple
    hi: tuple
    names: tuple = ()

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not lo:
            raise ValueError("parameter box needs matching non-empty lo/hi bounds")
        if not all(np.isfinite(lo + hi)):
            raise ValueError("parameter box must be bounded")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"parameter box has lo > hi: {lo} vs {hi}")
        names = tuple(self.names) or tuple(f"mu{k}" for k in range(len(lo)))
        if len(names) != len(lo):
            raise ValueError("one name per parameter coordinate is required")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "names", names)

    @property
    def dim(self):
        return len(self.lo)

    def contains(self, mu, rtol=1e-12):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        lo, hi = np.array(self.lo), np.array(self.hi)
        slack = rtol * np.maximum(1.0, np.abs(hi - lo))
        return mu.shape == lo.shape and bool(np.all(mu >= lo - slack) and np.all(mu <= hi + slack))

    def grid(self, counts):
        """Tensor grid with ``counts[k]`` equispaced points per axis (first axis fastest)."""
        counts = np.broadcast_to(np.asarray(counts, dtype=int), (self.dim,))
        axes = [np.linspace(a, b, int(c)) if c > 1 else np.array([0.5 * (a + b)])
                for a, b, c in zip(self.lo, self.hi, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel(order="F") for g in mesh], axis=1)

    def sample(self, count, rng):
        lo, hi = np.array(self.lo), np.array(self.hi)
        return lo + (hi - lo) * rng.random((int(count), self.dim))

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "names": list(self.names)}


@dataclass(frozen=True)
class CoefficientField:
    """Matrix-valued coefficient ``(mu, x) -> (n, m, m)`` with shape and finiteness checks."""

    func: Callable
    d: int
    m: int
    tag: str = "general"

    def __post_init__(self):
        if self.tag not in COEFFICIENT_TAGS:
            raise ValueError(f"unknown coefficient tag {self.tag!r}")

    def __call__(self, mu, x):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        val = np.asarray(self.func(mu, x))
        if np.iscomplexobj(val):
            raise EvaluationError("complex-valued coefficients are not supported")
        val = np.broadcast_to(val.astype(float, copy=False), (x.shape[0], self.m, self.m))
        if not np.all(np.isfinite(val)):
            bad = int(np.argwhere(~np.isfinite(val).all(axis=(1, 2)))[0, 0])
            raise EvaluationError(
                f"coefficient returned non-finite values at mu={mu.tolist()}, x={x[bad].tolist()}"
            )
        return val


@dataclass(frozen=True)
class BoundaryOperatorSpec:
    """Boundary operator ``M(mu, x, n)`` plus the parameter-independence declaration."""

    func: Callable
    param_independent_boundary: bool

    def __call__(self, mu, x, normals):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        normals = np.atleast_2d(np.asarray(normals, dtype=float))
        val = np.asarray(self.func(mu, x, normals), dtype=float)
        if not np.all(np.isfinite(val)):
            raise EvaluationError(f"boundary operator returned non-finite values at mu={mu.tolist()}")
        return val


@dataclass(frozen=True)
class ExpansionTerm:
    """One parameter-independent component of the operator.

    ``zeroth`` and each entry of ``first`` map points ``(n, d)`` to
    ``(n, m, m)``; either may be None when the term has no such part.
    """

    zeroth: Optional[Callable] = None
    first: Optional[tuple] = None
    label: str = ""


@dataclass(frozen=True)
class SeparableExpansion:
    """Affine decomposition ``A_mu = sum_q theta_q(mu) A_q``."""

    theta: Callable
    terms: tuple

    def __post_init__(self):
        if len(self.terms) < 1:
            raise ValueError("a separable expansion needs at least one term")

    @property
    def size(self):
        return len(self.terms)

    def weights(self, mu):
        w = np.asarray(self.theta(np.atleast_1d(np.asarray(mu, dtype=float))), dtype=float)
        if w.shape != (self.size,):
            raise EvaluationError(f"theta returned shape {w.shape}, expected ({self.size},)")
        if not np.all(np.isfinite(w)):
            raise EvaluationError(f"theta returned non-finite values at mu={np.asarray(mu).tolist()}")
        return w

    def transport_terms(self):
        return [q for q, t in enumerate(self.terms) if t.first is not None]

    def reordered(self, order):
        """Same expansion with its terms permuted by ``order``."""
        order = list(order)
        theta = self.theta
        return SeparableExpansion(lambda mu: np.asarray(theta(mu))[order],
                                  tuple(self.terms[q] for q in order))


@dataclass(frozen=True)
class N1Structure:
    """First-order coefficients factor as ``A^i = a_hat(mu, x) * A_tilde^i(x)``."""

    a_hat: Callable
    a_tilde: tuple
    kappa: float


@dataclass(frozen=True)
class FriedrichsSystem:
    """A parametrized Friedrichs' system on a box domain."""

    id: str
    d: int
    m: int
    a0: CoefficientField
    a: tuple
    rhs: Callable
    boundary: BoundaryOperatorSpec
    params: ParameterDomain
    box: tuple
    div_a: Optional[CoefficientField] = None
    expansion: Optional[SeparableExpansion] = None
    n1: Optional[N1Structure] = None
    denseness_d1_d2: bool = False
    epsilon: float = 0.0
    solve_supported: bool = True
    tag: str = "general"
    constants: dict = field(default_factory=dict)
    unknowns: tuple = ()

    def __post_init__(self):
        if len(self.a) != self.d:
            raise ValueError(f"expected {self.d} first-order coefficients, got {len(self.a)}")
        box = tuple((float(a), float(b)) for a, b in self.box)
        if len(box) != self.d or any(a >= b for a, b in box):
            raise ValueError(f"invalid spatial box {self.box}")
        object.__setattr__(self, "box", box)

    @property
    def n1_structure(self):
        return self.n1 is not None and self.n1.kappa > 0

    @property
    def diameter(self):
        return float(np.sqrt(sum((b - a) ** 2 for a, b in self.box)))

    def first_order(self, mu, x):
        """Stack ``(d, n, m, m)`` of first-order coefficients."""
        return np.stack([ai(mu, x) for ai in self.a])

    def divergence(self, mu, x):
        """``div A = sum_i d_i A^i``, analytic if supplied, else central differences."""
        if self.div_a is not None:
            return self.div_a(mu, x)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = FD_RELATIVE_STEP * self.diameter
        out = np.zeros((x.shape[0], self.m, self.m))
        for i, ai in enumerate(self.a):
            step = np.zeros(self.d)
            step[i] = h
            out += (ai(mu, x + step) - ai(mu, x - step)) / (2.0 * h)
        return out

    def source(self, mu, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        val = np.broadcast_to(np.asarray(self.rhs(np.atleast_1d(mu), x), dtype=float),
                              (x.shape[0], self.m))
        if not np.all(np.isfinite(val)):
            raise EvaluationError(f"right-hand side non-finite at mu={np.asarray(mu).tolist()}")
        return val

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

def spatial_samples(box, counts, n_random, rng):
    """Tensor grid (``counts`` per axis) plus ``n_random`` uniform points in ``box``."""
    d = len(box)
    counts = np.broadcast_to(np.asarray(counts, dtype=int), (d,))
    axes = [np.linspace(a, b, int(c)) for (a, b), c in zip(box, counts)]
    grid = np.stack([g.ravel(order="F") for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    lo = np.array([a for a, _ in box])
    hi = np.array([b for _, b in box])
    rand = lo + (hi - lo) * rng.random((int(n_random), d))
    return np.vstack([grid, rand])


def boundary_samples(box, count, n_random, rng):
    """Points on every face of ``box`` with their outward unit normals."""
    d = len(box)
    pts, nrm = [], []
    for axis in range(d):
        for side, sign in ((0, -1.0), (1, 1.0)):
            other = [box[j] for j in range(d) if j != axis]
            if other:
                face = spatial_samples(other, count, max(1, n_random // (2 * d)), rng)
            else:
                face = np.zeros((1, 0))
            p = np.insert(face, axis, box[axis][side], axis=1)
            n = np.zeros_like(p)
            n[:, axis] = sign
            pts.append(p)
            nrm.append(n)
    return np.vstack(pts), np.vstack(nrm)


def parameter_samples(params, counts, n_random, rng):
    grid = params.grid(counts)
    if n_random:
        grid = np.vstack([grid, params.sample(n_random, rng)])
    return grid


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------

@dataclass
class ValidationReport:
    system: str
    epsilon: float
    epsilon_declared: float
    worst_mu: list
    worst_x: list
    fs1_asymmetry: float
    m1_min_eig: float
    m1_worst_mu: list
    m1_worst_x: list
    samples: int
    boundary_samples: int
    failures: list

    @property
    def passed(self):
        return not self.failures

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["passed"] = self.passed
        return out


def validate_friedrichs(sys, counts=4, n_random=N_RANDOM_DEFAULT, mu_counts=2,
                        mu_random=0, seed=0, mu_samples=None):
    """Sampled check of FS1 (symmetry), FS2 (positivity) and M1 (boundary PSD).

    Parameters
    ----------
    counts : int or sequence
        Spatial tensor-grid points per axis (at least 2).
    n_random : int
        Additional uniform random spatial points.
    mu_counts, mu_random : int
        Parameter tensor grid per axis and extra random parameters; ignored
        when ``mu_samples`` is given explicitly.

    Returns
    -------
    ValidationReport
        ``epsilon`` is the minimum over all samples of
        ``lambda_min(A0 + A0^T - div A) / 2``.
    """
    if np.any(np.asarray(counts) < 2):
        raise ValueError("at least 2 spatial samples per axis are required")
    rng = np.random.default_rng(seed)
    if mu_samples is None:
        mus = parameter_samples(sys.params, mu_counts, mu_random, rng)
    else:
        mus = np.atleast_2d(np.asarray(mu_samples, dtype=float))
    xs = spatial_samples(sys.box, counts, n_random, rng)
    xb, nb = boundary_samples(sys.box, counts, n_random, rng)

    eps_min, worst = np.inf, (None, None)
    asym = 0.0
    m1_min, m1_worst = np.inf, (None, None)
    for mu in mus:
        scale = 1.0
        for ai in sys.a:
            vals = ai(mu, xs)
            scale = max(scale, float(np.abs(vals).max()))
            asym = max(asym, float(np.abs(vals - vals.transpose(0, 2, 1)).max()) / scale)
        a0 = sys.a0(mu, xs)
        sym = a0 + a0.transpose(0, 2, 1) - sys.divergence(mu, xs)
        lam = sym_eig(0.5 * (sym + sym.transpose(0, 2, 1)), compute_vectors=False)[:, 0]
        j = int(np.argmin(lam))
        if lam[j] / 2 < eps_min:
            eps_min, worst = float(lam[j] / 2), (mu.tolist(), xs[j].tolist())
        mb = sys.boundary(mu, xb, nb)
        lam_b = sym_eig(mb + mb.transpose(0, 2, 1), compute_vectors=False)[:, 0]
        j = int(np.argmin(lam_b))
        if lam_b[j] < m1_min:
            m1_min, m1_worst = float(lam_b[j]), (mu.tolist(), xb[j].tolist())

    failures = []
    if asym > SYMMETRY_ATOL:
        failures.append(f"FS1: first-order coefficient asymmetry {asym:.3e} exceeds {SYMMETRY_ATOL:g}")
    if not eps_min > 0:
        failures.append(f"FS2: epsilon estimate {eps_min:.6g} is not positive at mu={worst[0]}, x={worst[1]}")
    elif sys.epsilon > eps_min * (1 + 1e-12) + 1e-14:
        failures.append(f"FS2: declared epsilon {sys.epsilon:.6g} exceeds sampled {eps_min:.6g}")
    if m1_min < -SYMMETRY_ATOL * max(1.0, abs(m1_min)):
        failures.append(f"M1: M + M^T has eigenvalue {m1_min:.3e} at mu={m1_worst[0]}, x={m1_worst[1]}")
    return ValidationReport(
        system=sys.id, epsilon=eps_min, epsilon_declared=float(sys.epsilon),
        worst_mu=worst[0], worst_x=worst[1], fs1_asymmetry=asym,
        m1_min_eig=m1_min, m1_worst_mu=m1_worst[0], m1_worst_x=m1_worst[1],
        samples=len(mus) * len(xs), boundary_samples=len(mus) * len(xb), failures=failures,
    )


# --------------------------------------------------------------------------
# Adjoint, face matrix
# --------------------------------------------------------------------------

def adjoint_coefficients(sys):
    """The formal adjoint ``A* v = (A0^T - div A) v - sum_i (A^i)^T d_i v``.

    The adjoint boundary operator is ``M^T``.  The right-hand side of the
    returned system is zero.
    """
    a0, div = sys.a0, sys.divergence

    def a0_adj(mu, x):
        return a0(mu, x).transpose(0, 2, 1) - div(mu, x)

    def first_adj(ai):
        return lambda mu, x: -ai(mu, x).transpose(0, 2, 1)

    def div_adj(mu, x):
        return -div(mu, x).transpose(0, 2, 1)

    boundary = sys.boundary
    n1 = None
    if sys.n1 is not None:
        n1 = N1Structure(sys.n1.a_hat,
                         tuple((lambda at: (lambda x: -np.asarray(at(x)).transpose(0, 2, 1)))(at)
                               for at in sys.n1.a_tilde),
                         sys.n1.kappa)
    return sys.replace(
        id=sys.id + ":adjoint",
        a0=CoefficientField(a0_adj, sys.d, sys.m, sys.a0.tag),
        a=tuple(CoefficientField(first_adj(ai), sys.d, sys.m, ai.tag) for ai in sys.a),
        div_a=CoefficientField(div_adj, sys.d, sys.m, sys.a0.tag),
        rhs=lambda mu, x: np.zeros((np.atleast_2d(x).shape[0], sys.m)),
        boundary=BoundaryOperatorSpec(
            lambda mu, x, n: boundary(mu, x, n).transpose(0, 2, 1),
            boundary.param_independent_boundary),
        expansion=None,
        n1=n1,
    )


def face_matrix(sys, mu, x, n):
    """``D = sum_i n_i A^i(mu, x)`` for one point or a batch of points.

    Raises
    ------
    ValueError
        If a normal is not of unit length to 1e-12.
    """
    x = np.asarray(x, dtype=float)
    n = np.asarray(n, dtype=float)
    single = n.ndim == 1
    x2 = np.atleast_2d(x)
    n2 = np.atleast_2d(n)
    if n2.shape[1] != sys.d:
        raise ValueError(f"normal has {n2.shape[1]} components, expected {sys.d}")
    if np.any(np.abs(np.linalg.norm(n2, axis=1) - 1.0) > 1e-12):
        raise ValueError("face normal must have unit length")
    coeff = sys.first_order(mu, x2)
    out = np.einsum("pi,ipab->pab", n2, coeff)
    return out[0] if single else out


# --------------------------------------------------------------------------
# Classification
# --------------------------------------------------------------------------

@dataclass
class SystemClassification:
    system: str
    verdict: str
    reasons: list
    solve_supported: bool

    def to_dict(self):
        return dataclasses.asdict(self)


def _check_expansion(sys, mus, xs):
    exp = sys.expansion
    worst = 0.0
    for mu in mus:
        w = exp.weights(mu)
        a0 = sys.a0(mu, xs)
        ai = sys.first_order(mu, xs)
        s0 = np.zeros_like(a0)
        si = np.zeros_like(ai)
        for q, term in enumerate(exp.terms):
            if term.zeroth is not None:
                s0 += w[q] * np.asarray(term.zeroth(xs))
            if term.first is not None:
                for i, f in enumerate(term.first):
                    si[i] += w[q] * np.asarray(f(xs))
        scale = max(1.0, float(np.abs(a0).max()), float(np.abs(ai).max()))
        worst = max(worst, float(np.abs(s0 - a0).max()) / scale,
                    float(np.abs(si - ai).max()) / scale)
    return worst


def _check_n1(sys, mus, xs):
    n1 = sys.n1
    worst, amin = 0.0, np.inf
    tilde = np.stack([np.asarray(at(xs)) for at in n1.a_tilde])
    for mu in mus:
        ahat = np.broadcast_to(np.asarray(n1.a_hat(mu, xs), dtype=float), (xs.shape[0],))
        amin = min(amin, float(ahat.min()))
        ai = sys.first_order(mu, xs)
        scale = max(1.0, float(np.abs(ai).max()))
        worst = max(worst, float(np.abs(ai - ahat[None, :, None, None] * tilde).max()) / scale)
    return worst, amin


def classify_system(sys, seed=0, validation=None):
    """Decide whether exponential approximability is certified.

    The verdict is ``"exponential-certified"`` exactly when the N1
    factorization holds with ``kappa > 0``, a separable expansion of the
    operator exists, the boundary operators are parameter-independent and
    the sampled FS1/FS2 checks pass.  Declared structure is cross-checked on
    samples; a declaration contradicted by the samples counts as failed.
    """
    rng = np.random.default_rng(seed)
    mus = parameter_samples(sys.params, 2, 8, rng)
    xs = spatial_samples(sys.box, 3, 32, rng)
    reasons = []

    if sys.n1 is None:
        reasons.append({"criterion": "N1", "passed": False,
                        "detail": "first-order coefficients do not factor as a_hat * A_tilde"})
    else:
        err, amin = _check_n1(sys, mus, xs)
        ok = sys.n1.kappa > 0 and err <= 1e-12 and amin >= sys.n1.kappa * (1 - 1e-12)
        reasons.append({"criterion": "N1", "passed": bool(ok),
                        "detail": f"kappa={sys.n1.kappa:g}, factorization mismatch {err:.2e}, "
                                  f"min a_hat {amin:.6g}"})

    if sys.expansion is None:
        reasons.append({"criterion": "separability", "passed": False,
                        "detail": "no separable expansion declared"})
    else:
        err = _check_expansion(sys, mus, xs)
        reasons.append({"criterion": "separability", "passed": bool(err <= 1e-12),
                        "detail": f"Q={sys.expansion.size}, expansion mismatch {err:.2e}"})

    reasons.append({"criterion": "param-independent boundary",
                    "passed": bool(sys.boundary.param_independent_boundary),
                    "detail": "D-M and D+M* declared parameter-independent"
                    if sys.boundary.param_independent_boundary
                    else "boundary operator varies with the parameter"})

    report = validation if validation is not None else validate_friedrichs(sys, seed=seed)
    fs_ok = not any(f.startswith(("FS1", "FS2")) for f in report.failures)
    reasons.append({"criterion": "FS1/FS2", "passed": bool(fs_ok),
                    "detail": f"sampled epsilon {report.epsilon:.6g}, asymmetry {report.fs1_asymmetry:.2e}"})

    verdict = VERDICT_CERTIFIED if all(r["passed"] for r in reasons) else VERDICT_UNCERTIFIED
    return SystemClassification(sys.id, verdict, reasons, sys.solve_supported)


# --------------------------------------------------------------------------
# Registry and JSON
# --------------------------------------------------------------------------

def registry_get(name, raw=None):
    """Build a registry system by id with optional constant overrides."""
    from . import registry
    return registry.build(name, raw or {})


def registry_ids():
    from . import registry
    return tuple(registry.BUILDERS)


def system_to_json(sys):
    return {
        "id": sys.id,
        "d": sys.d,
        "m": sys.m,
        "coefficients": {"tag": sys.tag, "constants": dict(sys.constants)},
        "parameter_box": sys.params.to_dict(),
        "flags": {
            "n1_structure": sys.n1_structure,
            "kappa": sys.n1.kappa if sys.n1 is not None else 0.0,
            "param_independent_boundary": sys.boundary.param_independent_boundary,
            "denseness_d1_d2": sys.denseness_d1_d2,
            "separable": sys.expansion is not None,
            "solve_supported": sys.solve_supported,
            "epsilon": sys.epsilon,
        },
    }


def system_from_json(doc):
    """Rebuild a system from :func:`system_to_json` output.

    The registry id and constants determine the system; the stored shape
    and flags must agree with the rebuilt system.
    """
    try:
        sys = registry_get(doc["id"], doc.get("coefficients", {}).get("constants", {}))
    except KeyError as exc:
        raise ConfigError(f"system document is missing {exc}") from exc
    if doc.get("d", sys.d) != sys.d or doc.get("m", sys.m) != sys.m:
        raise ConfigError(f"system document shape (d={doc.get('d')}, m={doc.get('m')}) "
                          f"does not match registry entry {sys.id}")
    flags = system_to_json(sys)["flags"]
    for key, val in doc.get("flags", {}).items():
        if key in flags and flags[key] != val:
            raise ConfigError(f"flag {key}={val!r} contradicts registry value {flags[key]!r}")
    return sys


def constant_field(matrix, d, tag="constant"):
    mat = np.asarray(matrix, dtype=float)
    m = mat.shape[0]
    return CoefficientField(lambda mu, x: np.broadcast_to(mat, (np.atleast_2d(x).shape[0], m, m)),
                            d, m, tag)


def as_points_matrix(matrix):
    """Point callable ``x -> (n, m, m)`` returning a fixed matrix."""
    mat = np.asarray(matrix, dtype=float)
    return lambda x: np.broadcast_to(mat, (np.atleast_2d(x).shape[0],) + mat.shape)


def check_unknown_keys(raw, allowed, name):
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown constants for {name}: {unknown}; allowed: {sorted(allowed)}")


def sequence_of(value, length, key):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape != (length,):
        raise ConfigError(f"{key} must have {length} entries")
    return arr


__all__: Sequence[str] = (
    "ParameterDomain", "CoefficientField", "BoundaryOperatorSpec", "ExpansionTerm",
    "SeparableExpansion", "N1Structure", "FriedrichsSystem", "ValidationReport",
    "SystemClassification", "validate_friedrichs", "adjoint_coefficients", "face_matrix",
    "classify_system", "registry_get", "registry_ids", "system_to_json", "system_from_json",
)
