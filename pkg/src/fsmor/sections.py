"""Section dictionaries and the sectional N-width greedy.

A section maps each parameter to a dof vector.  Dictionaries of sections
span, at every parameter, a local subspace; the sectional width measures
how well those local subspaces approximate a target section uniformly over
a training set, with errors measured in the parameter-dependent norm.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import discretization as disc
from .errors import StructureError
from .numerics import cholesky, least_squares
from .reduction import DEPENDENCE_TOL, GramFamily, _json_float, fit_decay

KINDS = ("constant", "transformed", "solution", "composite")
RULES = ("minmax", "worst")
EXHAUSTIVE_MAX_N = 3
EXHAUSTIVE_MAX_DICT = 12


# --------------------------------------------------------------------------
# Sections and dictionaries
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ShiftTransform:
    """Periodic translation ``phi -> phi(x - shift(mu))`` on a 1D DG space."""

    space: object
    shift: object          # mu -> offset
    label: str = "shift"

    def __post_init__(self):
        mesh = self.space.mesh
        if mesh.d != 1 or not mesh.periodic[0]:
            raise StructureError("shift sections need a periodic 1D mesh")

    def apply(self, profile, mu):
        lo, hi = self.space.mesh.lo[0], self.space.mesh.hi[0]
        length = hi - lo
        s = float(self.shift(mu))

        def moved(x):
            return profile(lo + np.mod(np.asarray(x, dtype=float) - lo - s, length))

        return disc.project(self.space, moved)


@dataclass(frozen=True, eq=False)
class Section:
    """A parameter-to-dof-vector map with a kind tag.

    ``vector`` is set for constant sections, ``profile`` and ``transform``
    for transformed ones and ``func`` otherwise.
    """

    name: str
    kind: str
    func: object = None
    vector: np.ndarray = None
    profile: object = None
    transform: ShiftTransform = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown section kind {self.kind!r}")

    def __call__(self, mu):
        if self.kind == "constant":
            return self.vector
        if self.kind == "transformed":
            return self.transform.apply(self.profile, mu)
        return np.asarray(self.func(mu), dtype=float)

    def __add__(self, other):
        name = f"({self.name}+{other.name})"
        if self.kind == other.kind == "constant":
            return Section(name, "constant", vector=self.vector + other.vector)
        if self.kind == other.kind == "transformed" and self.transform is other.transform:
            p, q = self.profile, other.profile
            return Section(name, "transformed", profile=lambda x: p(x) + q(x),
                           transform=self.transform)
        return Section(name, "composite", func=lambda mu: self(mu) + other(mu))

    def evaluate(self, mus):
        """Values on a training set: ``(ndof, 1)`` for constant sections, else ``(ndof, S)``."""
        if self.kind == "constant":
            return np.asarray(self.vector, dtype=float)[:, None]
        return np.column_stack([self(mu) for mu in np.atleast_2d(mus)])


@dataclass
class SectionDictionary:
    id: str
    sections: list

    def __post_init__(self):
        if not self.sections:
            raise ValueError("a dictionary needs at least one section")

    def __len__(self):
        return len(self.sections)

    def __iter__(self):
        return iter(self.sections)

    @property
    def names(self):
        return [s.name for s in self.sections]

    def union(self, other, id=None):
        known = set(self.names)
        extra = [s for s in other.sections if s.name not in known]
        return SectionDictionary(id or f"{self.id}+{other.id}", self.sections + extra)

    def includes(self, other):
        return set(other.names) <= set(self.names)


def constant_section(vector, name):
    return Section(name, "constant", vector=np.asarray(vector, dtype=float))


def constant_dictionary(space, generator, id="constant", prefix="phi"):
    """Constant sections from the columns of ``generator`` (or a list of vectors).

    ``generator="basis"`` uses the canonical dof basis of ``space``.
    """
    if isinstance(generator, str):
        if generator != "basis":
            raise ValueError(f"unknown generator {generator!r}")
        generator = np.eye(space.ndof)
    vecs = np.asarray(generator, dtype=float)
    if vecs.ndim == 1:
        vecs = vecs[:, None]
    if vecs.size == 0 or vecs.shape[1] == 0:
        raise ValueError("the generator yields no fields")
    if vecs.shape[0] != space.ndof:
        raise ValueError(f"fields have {vecs.shape[0]} dofs, the space has {space.ndof}")
    return SectionDictionary(id, [constant_section(vecs[:, i], f"{prefix}{i}")
                                  for i in range(vecs.shape[1])])


def shift_dictionary(space, profiles, shift, id="shift", names=None):
    """Translated sections ``mu -> P_h phi(x - shift(mu))`` with periodic wraparound."""
    transform = ShiftTransform(space, shift)
    if not profiles:
        raise ValueError("at least one profile is required")
    names = names or [f"shift{i}" for i in range(len(profiles))]
    return SectionDictionary(id, [Section(n, "transformed", profile=p, transform=transform)
                                  for n, p in zip(names, profiles)])


def solution_section(solver, name="solution"):
    """Section whose value at ``mu`` is ``solver(mu)`` (typically a DG solve)."""
    return Section(name, "solution", func=solver)


# --------------------------------------------------------------------------
# Per-parameter projections
# --------------------------------------------------------------------------

class _Local:
    """Per-parameter ``G_j``-orthonormal bases of selected sections.

    Arrays hold one column per training parameter; ``G_j`` acts on
    column ``j``.
    """

    def __init__(self, grams, target):
        self.grams = grams
        self.target = target
        self.g_target = self.apply(target)
        self.norms = np.sqrt(np.maximum(np.einsum("ij,ij->j", target, self.g_target), 0.0))
        self.q, self.gq = [], []
        self.rank_deficient = np.zeros(target.shape[1], dtype=bool)

    def apply(self, vals):
        """Columnwise ``G_j v_j``; a single column is broadcast to every parameter."""
        w = self.grams.weights
        out = 0.0
        for i, m in enumerate(self.grams.matrices):
            if np.any(w[:, i]):
                out = out + (m @ vals) * w[None, :, i]
        return np.broadcast_to(out, self.target.shape) if np.ndim(out) else np.zeros(self.target.shape)

    def orthogonalize(self, vals, gvals):
        """Two-pass MGS of ``vals`` against the current bases (column by column)."""
        v = np.array(np.broadcast_to(vals, self.target.shape), dtype=float)
        gv = np.array(gvals, dtype=float)
        start = np.sqrt(np.maximum(np.einsum("ij,ij->j", v, gv), 0.0))
        for _ in range(2):
            for q, gq in zip(self.q, self.gq):
                c = np.einsum("ij,ij->j", gq, v)
                v -= q * c
                gv -= gq * c
        nrm = np.sqrt(np.maximum(np.einsum("ij,ij->j", v, gv), 0.0))
        keep = nrm > DEPENDENCE_TOL * np.where(start > 0, start, 1.0)
        keep &= start > 0
        scale = np.where(keep, 1.0 / np.where(nrm > 0, nrm, 1.0), 0.0)
        return v * scale, gv * scale, keep

    def push(self, vals, gvals):
        q, gq, keep = self.orthogonalize(vals, gvals)
        self.q.append(q)
        self.gq.append(gq)
        self.rank_deficient |= ~keep

    def residual(self):
        r = self.target.copy()
        for _ in range(2):
            for q, gq in zip(self.q, self.gq):
                r -= q * np.einsum("ij,ij->j", gq, r)
        return r

    def errors(self, relative):
        r = self.residual()
        err = np.sqrt(np.maximum(np.einsum("ij,ij->j", r, self.apply(r)), 0.0))
        if not relative:
            return err
        return np.where(self.norms > 0, err / np.where(self.norms > 0, self.norms, 1.0), 0.0)

    def candidate_errors(self, vals, gvals, current, r, relative):
        """Per-parameter errors after tentatively adding one section to residual ``r``."""
        q, gq, keep = self.orthogonalize(vals, gvals)
        gain = np.einsum("ij,ij->j", gq, r) ** 2
        scale = self.norms ** 2 if relative else 1.0
        if relative:
            scale = np.where(self.norms > 0, scale, 1.0)
        sq = np.maximum(current ** 2 - np.where(keep, gain, 0.0) / scale, 0.0)
        return np.sqrt(sq)


def _coefficients(grams, target, vals, j):
    """Least-squares coefficients at parameter ``j`` in the Cholesky factor of ``G_j``."""
    cols = np.column_stack([np.broadcast_to(v, target.shape)[:, j] for v in vals])
    low = cholesky(grams.matrix(j).toarray())
    return least_squares(low.T @ cols, low.T @ target[:, j]).x


# --------------------------------------------------------------------------
# Sectional greedy
# --------------------------------------------------------------------------

@dataclass
class SectionalDecayReport:
    dictionary: str
    n_values: list
    errors: list
    selected: list
    alpha: float
    beta: float
    q_b: int
    r_squared: float
    fit_points: int
    mode: str
    rule: str
    flags: list = field(default_factory=list)
    per_mu: np.ndarray = None

    def to_dict(self):
        return {"dictionary": self.dictionary, "N": list(self.n_values),
                "e_N": [float(e) for e in self.errors], "selected": [list(s) for s in self.selected],
                "alpha": _json_float(self.alpha), "beta": _json_float(self.beta), "Q_b": self.q_b,
                "r_squared": _json_float(self.r_squared), "fit_points": self.fit_points,
                "mode": self.mode, "rule": self.rule, "flags": list(self.flags)}


def _evaluate_all(sections, mus):
    return [s.evaluate(mus) if isinstance(s, Section) else np.asarray(s, dtype=float)
            for s in sections]


def _greedy(local, vals, gvals, n_max, tol, rule, relative):
    err = local.errors(relative)
    history = [err]
    chosen = []
    reason = "n_max"
    while True:
        if err.max() <= tol:
            reason = "tolerance"
            break
        if len(chosen) >= n_max:
            break
        free = [k for k in range(len(vals)) if k not in chosen]
        if not free:
            reason = "dictionary exhausted"
            break
        worst = int(np.argmax(err))
        resid = local.residual()
        best, best_score = None, None
        for k in free:
            cand = local.candidate_errors(vals[k], gvals[k], err, resid, relative)
            score = cand[worst] if rule == "worst" else cand.max()
            if best_score is None or score < best_score:
                best, best_score = k, score
        local.push(vals[best], gvals[best])
        chosen.append(best)
        err = np.minimum(local.errors(relative), err)
        history.append(err)
    return history, [list(chosen[:n]) for n in range(1, len(chosen) + 1)], reason


def _subset_errors(grams, target, vals, gvals, subset, relative):
    local = _Local(grams, target)
    for k in subset:
        local.push(vals[k], gvals[k])
    return local.errors(relative), bool(local.rank_deficient.any())


def _exhaustive(grams, target, vals, gvals, n_max, relative):
    history = [_Local(grams, target).errors(relative)]
    selected = []
    deficient = False
    for n in range(1, n_max + 1):
        best, best_err, best_def = None, None, False
        for subset in itertools.combinations(range(len(vals)), n):
            err, dfc = _subset_errors(grams, target, vals, gvals, subset, relative)
            if best_err is None or err.max() < best_err.max():
                best, best_err, best_def = subset, err, dfc
        history.append(best_err)
        selected.append(list(best))
        deficient |= best_def
    return history, selected, deficient


def sectional_greedy(target, dictionary, mus, grams, n_max, tol=0.0, mode="greedy",
                     rule="minmax", relative=True, q_b=1):
    """Sectional N-width surrogate of ``target`` over the training set ``mus``.

    Parameters
    ----------
    target : Section or (ndof, S) array
        Values to approximate; arrays are taken as already evaluated.
    dictionary : SectionDictionary or list of sections / arrays
        Arrays have shape ``(ndof, S)`` or ``(ndof, 1)`` (constant).
    grams : GramFamily
        One Gram per training parameter.
    mode : {"greedy", "exhaustive"}
        Exhaustive subset search is limited to ``n_max <= 3`` and at most
        12 sections.
    rule : {"minmax", "worst"}
        Greedy selection: minimize the worst error after adding a section,
        or minimize the error at the currently worst parameter.

    Returns
    -------
    SectionalDecayReport
        ``errors[n]`` is the worst (relative) error with ``n`` sections.
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}; use one of {RULES}")
    if mode not in ("greedy", "exhaustive"):
        raise ValueError(f"unknown mode {mode!r}")
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    sections = list(dictionary)
    dict_id = dictionary.id if isinstance(dictionary, SectionDictionary) else "custom"
    t = target.evaluate(mus) if isinstance(target, Section) else np.asarray(target, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    if t.shape[1] == 1 and len(grams) > 1:
        t = np.repeat(t, len(grams), axis=1)
    if len(grams) != t.shape[1]:
        raise ValueError(f"{len(grams)} Gram matrices for {t.shape[1]} training parameters")
    vals = _evaluate_all(sections, mus)
    for v in vals:
        if v.shape[0] != t.shape[0] or v.shape[1] not in (1, t.shape[1]):
            raise ValueError(f"section values of shape {v.shape} do not match the target {t.shape}")
    local = _Local(grams, t)
    gvals = [local.apply(v) for v in vals]
    flags = []
    if mode == "exhaustive":
        if n_max > EXHAUSTIVE_MAX_N or len(vals) > EXHAUSTIVE_MAX_DICT:
            raise ValueError(f"exhaustive search needs N <= {EXHAUSTIVE_MAX_N} and at most "
                             f"{EXHAUSTIVE_MAX_DICT} sections")
        n_max = min(n_max, len(vals))
        history, selected, deficient = _exhaustive(grams, t, vals, gvals, n_max, relative)
        reason = "n_max"
    else:
        history, selected, reason = _greedy(local, vals, gvals, n_max, tol, rule, relative)
        deficient = bool(local.rank_deficient.any())
    if deficient:
        flags.append("dependent section values at some parameters; minimum-norm fallback")
    if reason == "dictionary exhausted":
        flags.append("dictionary exhausted before reaching the tolerance")
    hist = np.array(history)
    errors = np.minimum.accumulate(hist.max(axis=1))
    n_values = list(range(len(errors)))
    fit_n = n_values[1:] if len(n_values) > 2 else n_values
    alpha, beta, r2, pts, fit_flags = fit_decay(fit_n, errors[len(errors) - len(fit_n):], q_b)
    return SectionalDecayReport(dict_id, n_values, [float(e) for e in errors], selected, alpha,
                                beta, int(q_b), r2, pts, mode, rule, flags + fit_flags, hist)


def sectional_coefficients(target, dictionary, selected, mus, grams, j):
    """Coefficients of the best approximation at training parameter ``j``."""
    mus = np.atleast_2d(mus)
    t = target.evaluate(mus) if isinstance(target, Section) else np.asarray(target, dtype=float)
    vals = _evaluate_all([list(dictionary)[k] for k in selected], mus)
    return _coefficients(grams, t, vals, j)


@dataclass
class ComparisonReport:
    reports: list
    violations: list

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        return {"reports": [r.to_dict() for r in self.reports], "violations": self.violations,
                "passed": self.passed}


def dictionary_compare(target, dictionaries, mus, grams, n_max, mode="greedy", rule="minmax",
                       slack=1e-10):
    """Run the sectional search per dictionary; check inclusion monotonicity.

    For exhaustive runs, ``Gamma_1`` contained in ``Gamma_2`` must give
    ``e_N(Gamma_2) <= e_N(Gamma_1) + slack``; violations are listed.
    """
    if len(dictionaries) < 2:
        raise ValueError("at least two dictionaries are required")
    mus = np.atleast_2d(mus)
    t = target.evaluate(mus) if isinstance(target, Section) else target
    reports = [sectional_greedy(t, d, mus, grams, n_max, mode=mode, rule=rule) for d in dictionaries]
    violations = []
    if mode == "exhaustive":
        for (a, ra), (b, rb) in itertools.permutations(zip(dictionaries, reports), 2):
            if b.includes(a):
                for n in range(min(len(ra.errors), len(rb.errors))):
                    if rb.errors[n] > ra.errors[n] + slack:
                        violations.append({"smaller": a.id, "larger": b.id, "N": n,
                                           "e_small": ra.errors[n], "e_large": rb.errors[n]})
    return ComparisonReport(reports, violations)


def norm_family(grams, count):
    """A ``GramFamily`` from a single matrix (broadcast) or an existing family."""
    if isinstance(grams, GramFamily):
        return grams
    return GramFamily.constant(grams, count)


__all__ = [
    "ShiftTransform", "Section", "SectionDictionary", "constant_section", "constant_dictionary",
    "shift_dictionary", "solution_section", "SectionalDecayReport", "sectional_greedy",
    "sectional_coefficients", "ComparisonReport", "dictionary_compare", "norm_family",
]
