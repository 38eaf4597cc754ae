"""Snapshots, graph-norm POD, strong greedy and N-width decay fits."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import discretization as disc
from .errors import ConvergenceError, FsmorError, SingularMatrixError, StructureError
from .numerics import cholesky, least_squares, solve_lower, solve_upper, sparse_solve, svd, sym_eig

DEPENDENCE_TOL = 1e-8
ERROR_FLOOR = 1e-13
POD_LITERAL_MAX_DOF = 400


# --------------------------------------------------------------------------
# Gram families
# --------------------------------------------------------------------------

class GramFamily:
    """Per-parameter Gram matrices ``G_j = sum_i weights[j, i] * matrices[i]``.

    An explicit list of matrices is the special case ``weights = I``.
    """

    def __init__(self, matrices, weights):
        self.matrices = [sp.csr_matrix(m) for m in matrices]
        self.weights = np.atleast_2d(np.asarray(weights, dtype=float))
        if self.weights.shape[1] != len(self.matrices):
            raise ValueError("one weight per matrix is required")

    @classmethod
    def constant(cls, matrix, count):
        return cls([matrix], np.ones((count, 1)))

    @classmethod
    def explicit(cls, matrices):
        return cls(matrices, np.eye(len(matrices)))

    @classmethod
    def affine(cls, matrices, weight_fn, mus):
        return cls(matrices, np.array([weight_fn(mu) for mu in np.atleast_2d(mus)]))

    def __len__(self):
        return self.weights.shape[0]

    @property
    def is_constant(self):
        return len(self.matrices) == 1 and np.all(self.weights == self.weights[0])

    def matrix(self, j):
        out = None
        for w, m in zip(self.weights[j], self.matrices):
            if w != 0.0:
                out = m * w if out is None else out + m * w
        return (out if out is not None else self.matrices[0] * 0.0).tocsr()

    def apply(self, j, x):
        out = 0.0
        for w, m in zip(self.weights[j], self.matrices):
            if w != 0.0:
                out = out + w * (m @ x)
        return out

    def sq_norms(self, vectors):
        """``v_j^T G_j v_j`` for the columns ``v_j`` of ``vectors`` (one per parameter)."""
        out = np.zeros(vectors.shape[1])
        for i, m in enumerate(self.matrices):
            w = self.weights[:, i]
            if np.any(w):
                out += w * np.einsum("ij,ij->j", vectors, m @ vectors)
        return out

    def subset(self, idx):
        return GramFamily(self.matrices, self.weights[np.asarray(idx)])


def gram_family(sys, space, mus):
    """Graph-norm Gram family over ``mus``, affine when an expansion exists."""
    mus = np.atleast_2d(mus)
    if sys.expansion is not None:
        mats, weight_fn = disc.affine_gram(sys, space)
        return GramFamily.affine(mats, weight_fn, mus)
    return GramFamily.explicit([disc.graph_gram(sys, space, mu) for mu in mus])


def reference_gram(sys, space, choice="auto"):
    """Reference Gram: the N1 norm when available (``auto``/``g0``), else L2."""
    if choice not in ("auto", "g0", "l2"):
        raise ValueError(f"unknown reference norm {choice!r}")
    if choice == "l2" or (choice == "auto" and not sys.n1_structure):
        return disc.mass_matrix(space)
    return disc.reference_gram(sys, space)


# --------------------------------------------------------------------------
# Snapshots
# --------------------------------------------------------------------------

@dataclass
class SnapshotSet:
    mus: np.ndarray
    vectors: np.ndarray            # (ndof, S)
    grams: GramFamily
    g_ref: sp.csr_matrix
    residuals: np.ndarray
    system_id: str = ""

    @property
    def count(self):
        return self.vectors.shape[1]

    @property
    def ndof(self):
        return self.vectors.shape[0]


class SweepError(FsmorError):
    """A snapshot solve failed; ``partial`` holds the solutions computed so far."""

    def __init__(self, message, mu, partial):
        super().__init__(message)
        self.mu = mu
        self.partial = partial


def solve(sys, space, mu, operator=None):
    """Solve the DG system at ``mu``; returns ``(u, relative residual)``."""
    if not sys.solve_supported:
        raise StructureError(f"{sys.id} is marked as not solvable")
    if operator is not None:
        b = operator.matrix(mu)
        f = disc.load_vector(sys, space, mu)
    else:
        b, f = disc.assemble_system(sys, space, mu)
    u = sparse_solve(b, f, block=space.block)
    fn = np.linalg.norm(f)
    res = float(np.linalg.norm(b @ u - f) / fn) if fn > 0 else 0.0
    return u, res


def sweep(sys, space, mus, threads=1, g_ref="auto", separable=True):
    """Solve at every parameter in ``mus`` (order preserved).

    Parameters
    ----------
    threads : int
        Worker threads; 0 picks the CPU count.
    separable : bool
        Use the precomputed affine operator when the flux is separable.

    Raises
    ------
    SweepError
        On the first failing parameter, carrying the solutions before it.
    """
    if not sys.solve_supported:
        raise StructureError(f"{sys.id} is marked as not solvable")
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    if mus.shape[1] != sys.params.dim:
        mus = mus.reshape(-1, sys.params.dim)
    operator = None
    if separable and disc.flux_separable(sys):
        operator = disc.separable_operator(sys, space)

    def work(mu):
        return solve(sys, space, mu, operator)

    workers = None if threads == 0 else max(1, int(threads))
    results = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(work, mu) for mu in mus]
        for mu, fut in zip(mus, futures):
            try:
                results.append(fut.result())
            except (SingularMatrixError, ConvergenceError, StructureError, ValueError) as exc:
                for f in futures:
                    f.cancel()
                partial = np.array([r[0] for r in results]).T if results else np.zeros((space.ndof, 0))
                raise SweepError(f"solve failed at mu={mu.tolist()}: {exc}", mu.tolist(), partial) from exc
    vectors = np.array([r[0] for r in results]).T
    residuals = np.array([r[1] for r in results])
    return SnapshotSet(mus, vectors, gram_family(sys, space, mus), reference_gram(sys, space, g_ref),
                       residuals, sys.id)


# --------------------------------------------------------------------------
# Reduced bases
# --------------------------------------------------------------------------

@dataclass
class ReducedBasis:
    vectors: np.ndarray            # (ndof, N), orthonormal in g_ref
    selected: list = field(default_factory=list)
    energies: np.ndarray = None
    rank_deficient: bool = False

    @property
    def size(self):
        return self.vectors.shape[1]


def _orthonormalize(vec, basis, g_ref):
    """Two-pass modified Gram-Schmidt in ``g_ref``; returns (vector, kept norm ratio)."""
    v = np.array(vec, dtype=float)
    start = float(np.sqrt(max(v @ (g_ref @ v), 0.0)))
    if start == 0.0:
        return v, 0.0
    for _ in range(2):
        for j in range(basis.shape[1]):
            b = basis[:, j]
            v -= (b @ (g_ref @ v)) * b
    nrm = float(np.sqrt(max(v @ (g_ref @ v), 0.0)))
    return (v / nrm if nrm > 0 else v), nrm / start


def pod(snaps, n):
    """Reference-norm POD of the snapshot matrix.

    For small problems the Cholesky factor ``L`` of ``G_ref`` is formed and
    the SVD of ``L^T U`` gives the modes ``L^{-T} phi``; otherwise the
    equivalent correlation eigenproblem ``U^T G_ref U`` is solved.

    Returns
    -------
    basis : ReducedBasis
        Up to ``n`` modes; ``rank_deficient`` is set when fewer exist.
    spectrum : ndarray
        All singular values of the weighted snapshot matrix, non-increasing.
    """
    if n > snaps.count:
        raise ValueError(f"N={n} exceeds the snapshot count {snaps.count}")
    u = snaps.vectors
    g = snaps.g_ref
    if snaps.ndof <= POD_LITERAL_MAX_DOF:
        low = cholesky(g.toarray())
        lu, s, _ = svd(low.T @ u)
        modes = _back_transpose(low, lu)
    else:
        corr = u.T @ (g @ u)
        lam, psi = sym_eig(0.5 * (corr + corr.T))
        lam, psi = lam[::-1], psi[:, ::-1]
        s = np.sqrt(np.clip(lam, 0.0, None))
        keep = s > 0
        modes = np.zeros((snaps.ndof, len(s)))
        modes[:, keep] = (u @ psi[:, keep]) / s[keep]
    tol = max(snaps.count, snaps.ndof) * np.finfo(float).eps * (s[0] if s.size else 0.0) * 10
    rank = int(np.sum(s > tol))
    take = min(n, rank)
    vecs = np.zeros((snaps.ndof, 0))
    for j in range(take):
        v, ratio = _orthonormalize(modes[:, j], vecs, g)
        if ratio < DEPENDENCE_TOL:
            take = j
            break
        vecs = np.column_stack([vecs, v])
    basis = ReducedBasis(vecs, energies=s[:vecs.shape[1]] ** 2, rank_deficient=vecs.shape[1] < n)
    return basis, s


def _back_transpose(low, x):
    # solve L^T y = x for lower-triangular L
    return solve_upper(low.T, x)


class ProjectionErrors:
    """Best-approximation errors of every snapshot in its own norm ``G_j``.

    Products ``G_i U`` are computed once; each call projects onto the
    given basis and measures the explicit residual ``U - V C``.
    """

    def __init__(self, snaps):
        self.snaps = snaps
        grams = snaps.grams
        self.gu = [m @ snaps.vectors for m in grams.matrices]
        self.norms = np.sqrt(np.maximum(grams.sq_norms(snaps.vectors), 0.0))

    def __call__(self, basis_vectors, relative=True):
        snaps, grams = self.snaps, self.snaps.grams
        n = basis_vectors.shape[1]
        if n == 0:
            err = self.norms.copy()
        else:
            vgv = np.array([basis_vectors.T @ (m @ basis_vectors) for m in grams.matrices])
            vgu = np.array([basis_vectors.T @ x for x in self.gu])          # (J, n, S)
            coef = np.empty((n, snaps.count))
            for j in range(snaps.count):
                w = grams.weights[j]
                a = np.tensordot(w, vgv, axes=1)
                low = cholesky(0.5 * (a + a.T))
                rhs = np.tensordot(w, vgu[:, :, j], axes=1)
                coef[:, j] = _back_transpose(low, solve_lower(low, rhs))
            resid = snaps.vectors - basis_vectors @ coef
            err = np.sqrt(np.maximum(grams.sq_norms(resid), 0.0))
        if not relative:
            return err
        safe = np.where(self.norms > 0, self.norms, 1.0)
        return np.where(self.norms > 0, err / safe, 0.0)


def projection_errors(snaps, basis_vectors, relative=True):
    """Per-snapshot (relative) best-approximation error in ``G_j``."""
    return ProjectionErrors(snaps)(basis_vectors, relative)


@dataclass
class GreedyResult:
    basis: ReducedBasis
    errors: np.ndarray             # e_0 .. e_N (max over snapshots)
    rms_errors: np.ndarray
    selected: list
    stop_reason: str
    per_snapshot: np.ndarray = None

    def to_rows(self, mus):
        rows = []
        for n in range(1, len(self.errors)):
            rows.append({"N": n, "e_N": float(self.errors[n]), "rms": float(self.rms_errors[n]),
                         "selected_mu": np.atleast_1d(mus[self.selected[n - 1]]).tolist()})
        return rows


def strong_greedy(snaps, n_max, tol=0.0, relative=True):
    """Strong greedy over the snapshot set.

    Each step adds the snapshot with the largest best-approximation error
    in its own norm ``G_j``; the basis is orthonormalized in ``G_ref``.
    Stops when the worst error is ``<= tol``, after ``n_max`` vectors, or
    when the next candidate is linearly dependent on the basis.
    """
    if n_max > snaps.count:
        raise ValueError(f"n_max={n_max} exceeds the snapshot count {snaps.count}")
    vecs = np.zeros((snaps.ndof, 0))
    errors_of = ProjectionErrors(snaps)
    err = errors_of(vecs, relative)
    history = [err]
    selected = []
    reason = "n_max"
    while True:
        if err.max() <= tol:
            reason = "tolerance"
            break
        if len(selected) >= n_max:
            break
        j = int(np.argmax(err))
        v, ratio = _orthonormalize(snaps.vectors[:, j], vecs, snaps.g_ref)
        if ratio < DEPENDENCE_TOL:
            reason = "dependent"
            break
        vecs = np.column_stack([vecs, v])
        selected.append(j)
        # nested spaces: the exact error cannot grow, clamp rounding noise
        err = np.minimum(errors_of(vecs, relative), err)
        history.append(err)
    hist = np.array(history)
    basis = ReducedBasis(vecs, selected=list(selected))
    return GreedyResult(basis, hist.max(axis=1), np.sqrt(np.mean(hist ** 2, axis=1)),
                        list(selected), reason, hist)


# --------------------------------------------------------------------------
# Decay reports
# --------------------------------------------------------------------------

@dataclass
class DecayReport:
    n_values: list
    errors: list
    alpha: float
    beta: float
    q_b: int
    r_squared: float
    fit_points: int
    flags: list = field(default_factory=list)
    method: str = "pod"

    def to_dict(self):
        return {"N": list(self.n_values), "e_N": [float(e) for e in self.errors],
                "alpha": _json_float(self.alpha), "beta": _json_float(self.beta), "Q_b": self.q_b,
                "r_squared": _json_float(self.r_squared), "fit_points": self.fit_points,
                "flags": list(self.flags), "method": self.method}


def _json_float(x):
    x = float(x)
    if np.isnan(x):
        return None
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def fit_decay(n_values, errors, q_b=1, floor=ERROR_FLOOR):
    """Least-squares fit of ``log e_N = log alpha - beta * N^(1/Q_b)``.

    Errors at or below ``floor`` are excluded.  Returns
    ``(alpha, beta, r_squared, points, flags)``; with no usable errors the
    rate is reported as ``+inf``.
    """
    n = np.asarray(n_values, dtype=float)
    e = np.asarray(errors, dtype=float)
    use = e > floor
    flags = []
    if not use.any():
        return 0.0, np.inf, np.nan, 0, ["all errors at or below the floor; rate reported as +inf"]
    if use.sum() < 2:
        flags.append("fewer than two errors above the floor; fit undetermined")
        return float(e[use][0]), np.nan, np.nan, int(use.sum()), flags
    if (~use).any():
        flags.append(f"{int((~use).sum())} errors at or below {floor:g} excluded from the fit")
    x = n[use] ** (1.0 / q_b)
    y = np.log(e[use])
    a = np.column_stack([np.ones_like(x), -x])
    res = least_squares(a, y)
    log_alpha, beta = res.x
    ss_res = res.residual ** 2
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(np.exp(log_alpha)), float(beta), float(r2), int(use.sum()), flags


def nwidth_estimate(snaps, n_values, q_b=1, method="pod"):
    """Worst-case relative error of POD-N spaces (or greedy) on the training set.

    Errors are measured per parameter in ``G_j``; the sequence is fitted
    to ``alpha * exp(-beta * N^(1/Q_b))``.
    """
    n_values = [int(n) for n in n_values]
    if not n_values or min(n_values) < 1:
        raise ValueError("N values must be positive")
    n_top = max(n_values)
    flags = []
    if method == "pod":
        basis, _ = pod(snaps, min(n_top, snaps.count))
        avail = basis.size
        errors_of = ProjectionErrors(snaps)
        errors = [float(errors_of(basis.vectors[:, :min(n, avail)]).max()) for n in n_values]
        if basis.rank_deficient:
            flags.append(f"POD rank {avail} below requested N={n_top}")
    elif method == "greedy":
        res = strong_greedy(snaps, min(n_top, snaps.count))
        traj = res.errors
        errors = [float(traj[min(n, len(traj) - 1)]) for n in n_values]
        if res.stop_reason != "n_max":
            flags.append(f"greedy stopped early: {res.stop_reason}")
    else:
        raise ValueError(f"unknown method {method!r}")
    errors = list(np.minimum.accumulate(np.array(errors)))
    alpha, beta, r2, pts, fit_flags = fit_decay(n_values, errors, q_b)
    return DecayReport(n_values, errors, alpha, beta, int(q_b), r2, pts, flags + fit_flags, method)


def q_b_of(sys):
    return sys.expansion.size if sys.expansion is not None else 1


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------

def format_float(x):
    """Locale-independent 17-significant-digit float text."""
    return format(float(x), ".17g")


def rows_to_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def trajectory_csv(n_values, columns, selected_mu=None):
    """CSV text with an ``N`` column, named error columns and optional ``selected_mu``."""
    header = ["N"] + list(columns)
    if selected_mu is not None:
        header.append("selected_mu")
    rows = []
    for i, n in enumerate(n_values):
        row = [int(n)] + [float(columns[c][i]) for c in columns]
        if selected_mu is not None:
            mu = selected_mu[i]
            row.append(" ".join(format_float(v) for v in np.atleast_1d(mu)) if mu is not None else "")
        rows.append(row)
    return rows_to_csv(header, rows)


def report_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


__all__ = [
    "GramFamily", "gram_family", "reference_gram", "SnapshotSet", "SweepError", "solve", "sweep",
    "ReducedBasis", "pod", "ProjectionErrors", "projection_errors", "GreedyResult", "strong_greedy", "DecayReport",
    "fit_decay", "nwidth_estimate", "q_b_of", "format_float", "rows_to_csv", "trajectory_csv",
    "report_json",
]
