"""Built-in parametrized Friedrichs' systems.

Every builder takes a dict of constant overrides (unknown keys are
rejected) and returns a fully populated :class:`FriedrichsSystem` on the
unit box.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .numerics import sym_eig
from .system import (
    BoundaryOperatorSpec,
    CoefficientField,
    ExpansionTerm,
    FriedrichsSystem,
    N1Structure,
    ParameterDomain,
    SeparableExpansion,
    as_points_matrix,
    check_unknown_keys,
    sequence_of,
)


def _range(raw, key, default, fixed_key=None):
    if fixed_key is not None and fixed_key in raw:
        if key in raw:
            raise ConfigError(f"give either {key} or {fixed_key}, not both")
        v = float(raw[fixed_key])
        return v, v
    lo, hi = sequence_of(raw.get(key, default), 2, key)
    if lo > hi:
        raise ConfigError(f"{key} has lo > hi")
    return float(lo), float(hi)


def _npts(x):
    return np.atleast_2d(x).shape[0]


def _scalar_inflow_boundary(velocity, independent):
    """``M = |b . n|``: homogeneous inflow data, free outflow."""
    def func(mu, x, n):
        bn = np.einsum("pi,pi->p", velocity(mu, x), n)
        return np.abs(bn)[:, None, None]
    return BoundaryOperatorSpec(func, independent)


def _scalar_system(name, d, velocity, div_b, c_range, f, *, tag, expansion, n1,
                   independent, denseness, constants, c_fixed=None):
    """Advection-reaction ``div(b u) + c u = f`` written in Friedrichs form.

    The zeroth-order coefficient is ``c + div b``; ``c`` is the first
    parameter coordinate unless ``c_fixed`` is given.
    """
    def a0(mu, x):
        c = mu[0] if c_fixed is None else c_fixed
        return (c + div_b(x))[:, None, None]

    def first(i):
        return lambda mu, x: velocity(mu, x)[:, i, None, None]

    def div(mu, x):
        return div_b(x)[:, None, None]

    return {
        "d": d, "m": 1,
        "a0": CoefficientField(a0, d, 1, tag),
        "a": tuple(CoefficientField(first(i), d, 1, tag) for i in range(d)),
        "div_a": CoefficientField(div, d, 1, tag),
        "rhs": lambda mu, x: np.full((_npts(x), 1), f),
        "boundary": _scalar_inflow_boundary(velocity, independent),
        "expansion": expansion,
        "n1": n1,
        "denseness_d1_d2": denseness,
        "tag": tag,
        "constants": constants,
        "unknowns": ("u",),
    }


def advection_reaction_1d(raw):
    check_unknown_keys(raw, {"b", "b_slope", "c_range", "c", "f"}, "advection-reaction-1d")
    b0 = float(raw.get("b", 1.0))
    slope = float(raw.get("b_slope", 0.0))
    c_lo, c_hi = _range(raw, "c_range", [1.0, 10.0], "c")
    f = float(raw.get("f", 1.0))

    def b_of(x):
        return b0 + slope * np.atleast_2d(x)[:, 0]

    velocity = lambda mu, x: b_of(x)[:, None]
    div_b = lambda x: np.full(_npts(x), slope)
    tag = "polynomial" if slope else "constant"
    expansion = SeparableExpansion(
        lambda mu: np.array([1.0, mu[0]]),
        (ExpansionTerm(zeroth=lambda x: div_b(x)[:, None, None],
                       first=(lambda x: b_of(x)[:, None, None],), label="transport"),
         ExpansionTerm(zeroth=as_points_matrix([[1.0]]), label="reaction")),
    )
    n1 = N1Structure(lambda mu, x: np.ones(_npts(x)), (lambda x: b_of(x)[:, None, None],), 1.0)
    kw = _scalar_system("advection-reaction-1d", 1, velocity, div_b, (c_lo, c_hi), f, tag=tag,
                        expansion=expansion, n1=n1, independent=True, denseness=True,
                        constants={"b": b0, "b_slope": slope, "c_range": [c_lo, c_hi], "f": f})
    return FriedrichsSystem(
        id="advection-reaction-1d", params=ParameterDomain((c_lo,), (c_hi,), ("c",)),
        box=((0.0, 1.0),), epsilon=c_lo + 0.5 * slope, **kw)


def advection_reaction_2d_case1(raw):
    check_unknown_keys(raw, {"b", "b_grad", "c_range", "c", "f"}, "advection-reaction-2d-case1")
    b0 = sequence_of(raw.get("b", [1.0, 0.5]), 2, "b")
    grad = np.asarray(raw.get("b_grad", [[0.0, 0.0], [0.0, 0.0]]), dtype=float)
    if grad.shape != (2, 2):
        raise ConfigError("b_grad must be a 2x2 matrix")
    c_lo, c_hi = _range(raw, "c_range", [1.0, 10.0], "c")
    f = float(raw.get("f", 1.0))
    divb = float(np.trace(grad))

    def b_of(x):
        return b0 + np.atleast_2d(x) @ grad.T

    velocity = lambda mu, x: b_of(x)
    div_b = lambda x: np.full(_npts(x), divb)
    tag = "polynomial" if np.any(grad) else "constant"
    tilde = tuple((lambda i: (lambda x: b_of(x)[:, i, None, None]))(i) for i in range(2))
    expansion = SeparableExpansion(
        lambda mu: np.array([1.0, mu[0]]),
        (ExpansionTerm(zeroth=lambda x: div_b(x)[:, None, None], first=tilde, label="transport"),
         ExpansionTerm(zeroth=as_points_matrix([[1.0]]), label="reaction")),
    )
    n1 = N1Structure(lambda mu, x: np.ones(_npts(x)), tilde, 1.0)
    kw = _scalar_system("advection-reaction-2d-case1", 2, velocity, div_b, (c_lo, c_hi), f,
                        tag=tag, expansion=expansion, n1=n1, independent=True, denseness=True,
                        constants={"b": b0.tolist(), "b_grad": grad.tolist(),
                                   "c_range": [c_lo, c_hi], "f": f})
    return FriedrichsSystem(
        id="advection-reaction-2d-case1", params=ParameterDomain((c_lo,), (c_hi,), ("c",)),
        box=((0.0, 1.0), (0.0, 1.0)), epsilon=c_lo + 0.5 * divb, **kw)


def _rotating(name, raw, default_range, denseness):
    check_unknown_keys(raw, {"mu_range", "c", "f"}, name)
    lo, hi = _range(raw, "mu_range", default_range)
    c = float(raw.get("c", 1.0))
    f = float(raw.get("f", 1.0))

    def velocity(mu, x):
        return np.broadcast_to([math.cos(mu[0]), math.sin(mu[0])], (_npts(x), 2))

    div_b = lambda x: np.zeros(_npts(x))
    expansion = SeparableExpansion(
        lambda mu: np.array([1.0, math.cos(mu[0]), math.sin(mu[0])]),
        (ExpansionTerm(zeroth=as_points_matrix([[c]]), label="reaction"),
         ExpansionTerm(first=(as_points_matrix([[1.0]]), as_points_matrix([[0.0]])), label="x-transport"),
         ExpansionTerm(first=(as_points_matrix([[0.0]]), as_points_matrix([[1.0]])), label="y-transport")),
    )
    kw = _scalar_system(name, 2, velocity, div_b, None, f, tag="constant", expansion=expansion,
                        n1=None, independent=False, denseness=denseness,
                        constants={"mu_range": [lo, hi], "c": c, "f": f}, c_fixed=c)
    return FriedrichsSystem(
        id=name, params=ParameterDomain((lo,), (hi,), ("angle",)),
        box=((0.0, 1.0), (0.0, 1.0)), epsilon=c, **kw)


def advection_reaction_2d_case2(raw):
    return _rotating("advection-reaction-2d-case2", raw, [0.1, math.pi / 2 - 0.1], True)


def advection_reaction_2d_case3(raw):
    return _rotating("advection-reaction-2d-case3", raw, [0.0, 2 * math.pi], False)


def _flux_blocks(d):
    """First-order matrices of the mixed (sigma, u) form: grad on u, div on sigma."""
    m = d + 1
    out = []
    for i in range(d):
        a = np.zeros((m, m))
        a[i, d] = a[d, i] = 1.0
        out.append(a)
    return out


def _cdr(name, d, raw, default_dir):
    check_unknown_keys(raw, {"nu_range", "beta_range", "gamma_range", "b_dir", "f"}, name)
    nu = _range(raw, "nu_range", [0.5, 2.0])
    beta = _range(raw, "beta_range", [-0.5, 0.5])
    gamma = _range(raw, "gamma_range", [1.0, 3.0])
    if nu[0] <= 0:
        raise ConfigError("diffusivity range must be positive")
    bdir_raw = sequence_of(raw.get("b_dir", default_dir), d, "b_dir")
    if not np.linalg.norm(bdir_raw) > 0:
        raise ConfigError("b_dir must be nonzero")
    bdir = bdir_raw / np.linalg.norm(bdir_raw)
    f = float(raw.get("f", 1.0))
    m = d + 1
    blocks = _flux_blocks(d)

    flux_diag = np.diag([1.0] * d + [0.0])
    coupling = np.zeros((m, m))
    coupling[:d, d] = -bdir
    react = np.zeros((m, m))
    react[d, d] = 1.0

    def a0(mu, x):
        nu_, beta_, gamma_ = mu
        mat = flux_diag / nu_ + coupling * (beta_ / nu_) + react * gamma_
        return np.broadcast_to(mat, (_npts(x), m, m))

    def boundary(mu, x, n):
        out = np.zeros((n.shape[0], m, m))
        out[:, :d, d] = -n
        out[:, d, :d] = n
        return out

    def rhs(mu, x):
        out = np.zeros((_npts(x), m))
        out[:, d] = f
        return out

    expansion = SeparableExpansion(
        lambda mu: np.array([1.0, 1.0 / mu[0], mu[1] / mu[0], mu[2]]),
        (ExpansionTerm(first=tuple(as_points_matrix(b) for b in blocks), label="flux"),
         ExpansionTerm(zeroth=as_points_matrix(flux_diag), label="inverse diffusivity"),
         ExpansionTerm(zeroth=as_points_matrix(coupling), label="convection"),
         ExpansionTerm(zeroth=as_points_matrix(react), label="reaction")),
    )
    # monotone lower bound of lambda_min(A0 + A0^T) over the box
    a_min = 2.0 / nu[1]
    s_max = max(abs(beta[0]), abs(beta[1])) / nu[0]
    g_min = 2.0 * gamma[0]
    lam = 0.5 * (a_min + g_min) - math.hypot(0.5 * (a_min - g_min), s_max)
    eps = 0.5 * min(a_min, lam)
    return FriedrichsSystem(
        id=name, d=d, m=m,
        a0=CoefficientField(a0, d, m, "constant"),
        a=tuple(CoefficientField((lambda b: lambda mu, x: np.broadcast_to(b, (_npts(x), m, m)))(b),
                                 d, m, "constant") for b in blocks),
        div_a=CoefficientField(lambda mu, x: np.zeros((_npts(x), m, m)), d, m, "constant"),
        rhs=rhs,
        boundary=BoundaryOperatorSpec(boundary, True),
        params=ParameterDomain((nu[0], beta[0], gamma[0]), (nu[1], beta[1], gamma[1]),
                               ("nu", "beta", "gamma")),
        box=((0.0, 1.0),) * d,
        expansion=expansion,
        n1=N1Structure(lambda mu, x: np.ones(_npts(x)), tuple(as_points_matrix(b) for b in blocks), 1.0),
        denseness_d1_d2=True,
        epsilon=eps,
        tag="constant",
        constants={"nu_range": list(nu), "beta_range": list(beta), "gamma_range": list(gamma),
                   "b_dir": bdir_raw.tolist(), "f": f},
        unknowns=tuple(f"sigma{i + 1}" for i in range(d)) + ("u",),
    )


def cdr_1d(raw):
    return _cdr("cdr-1d", 1, raw, [1.0])


def cdr_2d(raw):
    return _cdr("cdr-2d", 2, raw, [1.0, 0.5])


# unknown ordering: sigma11, sigma12, sigma22, rho, u1, u2 (u scaled by 2 mu_L)
_S11, _S12, _S22, _RHO, _U1, _U2 = range(6)


def _elasticity_blocks():
    a1 = np.zeros((6, 6))
    a2 = np.zeros((6, 6))
    for a, pairs in ((a1, ((_S11, _U1), (_S12, _U2))), (a2, ((_S12, _U1), (_S22, _U2)))):
        for r, c in pairs:
            a[r, c] = a[c, r] = -1.0
    return a1, a2


def _elasticity_zeroth(t, alpha):
    a = np.zeros((6, 6))
    a[:4, :4] = [[1, 0, 0, 1], [0, 2, 0, 0], [0, 0, 1, 1], [1, 0, 1, t]]
    a[_U1, _U1] = a[_U2, _U2] = alpha
    return a


def elasticity_2d(raw):
    check_unknown_keys(raw, {"lam_range", "mu_range", "alpha", "f"}, "elasticity-2d")
    lam = _range(raw, "lam_range", [1.0, 10.0])
    mul = _range(raw, "mu_range", [0.5, 2.0])
    if lam[0] <= 0 or mul[0] <= 0:
        raise ConfigError("Lame constants must be positive")
    alpha = float(raw.get("alpha", 1.0))
    force = sequence_of(raw.get("f", [0.0, -1.0]), 2, "f")
    a1, a2 = _elasticity_blocks()
    base = _elasticity_zeroth(2.0, alpha)
    rho_unit = np.zeros((6, 6))
    rho_unit[_RHO, _RHO] = 2.0

    def a0(mu, x):
        return np.broadcast_to(base + rho_unit * (mu[1] / mu[0]), (_npts(x), 6, 6))

    def boundary(mu, x, n):
        dmat = n[:, 0, None, None] * a1 + n[:, 1, None, None] * a2
        out = np.zeros_like(dmat)
        out[:, :4, 4:] = -dmat[:, :4, 4:]
        out[:, 4:, :4] = dmat[:, 4:, :4]
        return out

    def rhs(mu, x):
        out = np.zeros((_npts(x), 6))
        out[:, _U1:] = force
        return out

    eps = float(sym_eig(_elasticity_zeroth(2.0 + 2.0 * mul[0] / lam[1], alpha), compute_vectors=False)[0])
    expansion = SeparableExpansion(
        lambda mu: np.array([1.0, mu[1] / mu[0]]),
        (ExpansionTerm(zeroth=as_points_matrix(base), first=(as_points_matrix(a1), as_points_matrix(a2)),
                       label="constitutive+equilibrium"),
         ExpansionTerm(zeroth=as_points_matrix(rho_unit), label="compressibility")),
    )
    return FriedrichsSystem(
        id="elasticity-2d", d=2, m=6,
        a0=CoefficientField(a0, 2, 6, "constant"),
        a=(CoefficientField(lambda mu, x: np.broadcast_to(a1, (_npts(x), 6, 6)), 2, 6, "constant"),
           CoefficientField(lambda mu, x: np.broadcast_to(a2, (_npts(x), 6, 6)), 2, 6, "constant")),
        div_a=CoefficientField(lambda mu, x: np.zeros((_npts(x), 6, 6)), 2, 6, "constant"),
        rhs=rhs,
        boundary=BoundaryOperatorSpec(boundary, True),
        params=ParameterDomain((lam[0], mul[0]), (lam[1], mul[1]), ("lambda", "mu")),
        box=((0.0, 1.0), (0.0, 1.0)),
        expansion=expansion,
        n1=N1Structure(lambda mu, x: np.ones(_npts(x)), (as_points_matrix(a1), as_points_matrix(a2)), 1.0),
        denseness_d1_d2=True,
        epsilon=eps,
        solve_supported=False,
        tag="constant",
        constants={"lam_range": list(lam), "mu_range": list(mul), "alpha": alpha, "f": force.tolist()},
        unknowns=("sigma11", "sigma12", "sigma22", "rho", "u1", "u2"),
    )


BUILDERS = {
    "advection-reaction-1d": advection_reaction_1d,
    "advection-reaction-2d-case1": advection_reaction_2d_case1,
    "advection-reaction-2d-case2": advection_reaction_2d_case2,
    "advection-reaction-2d-case3": advection_reaction_2d_case3,
    "cdr-1d": cdr_1d,
    "cdr-2d": cdr_2d,
    "elasticity-2d": elasticity_2d,
}


def build(name, raw):
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; available: {', '.join(BUILDERS)}") from None
    if not isinstance(raw, dict):
        raise ConfigError("system constants must be a mapping")
    return builder(dict(raw))
