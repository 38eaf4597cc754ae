"""Dense and sparse linear-algebra kernels.

The dense routines (SVD, symmetric eigenproblem, Cholesky, triangular
solves, least squares) are implemented here on top of plain numpy array
arithmetic so that results do not depend on the LAPACK build.  Sparse LU
is delegated to SuperLU through :mod:`scipy.sparse.linalg`.

All kernels are pure functions of their inputs.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    ConvergenceError,
    NotPositiveDefiniteError,
    SingularMatrixError,
    SymmetryError,
)

EPS = np.finfo(float).eps

SYMMETRY_RTOL = 1e-12
SOLVE_RTOL = 1e-10
JACOBI_MAX_SWEEPS = 60


def _as_matrix(m, name="matrix"):
    a = np.array(m, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _householder(x):
    """Return ``(v, beta, alpha)`` with ``(I - beta v v^T) x = alpha e_1``.

    ``v`` is formed from ``x / max|x|``; the reflector does not depend on
    the scaling and tiny vectors no longer underflow ``v^T v``.
    """
    scale = float(np.abs(x).max()) if x.size else 0.0
    if scale == 0.0:
        return x.copy(), 0.0, 0.0
    v = x / scale
    nrm = math.sqrt(float(v @ v))
    alpha = -math.copysign(nrm, v[0])
    v[0] -= alpha
    return v, 2.0 / float(v @ v), alpha * scale


def _givens(f, g):
    if g == 0.0:
        return 1.0, 0.0, f
    r = math.hypot(f, g)
    return f / r, g / r, r


def _rotate_rows(xt, i, j, c, s):
    # columns i, j of X (stored as rows of X^T): x_i <- c x_i + s x_j, x_j <- -s x_i + c x_j
    xi = xt[i].copy()
    xt[i] *= c
    xt[i] += s * xt[j]
    xt[j] *= c
    xt[j] -= s * xi


# --------------------------------------------------------------------------
# SVD
# --------------------------------------------------------------------------

def _bidiagonalize(a, want_uv):
    m, n = a.shape
    a = a.copy()
    left, right = [], []
    for k in range(n):
        v, beta, alpha = _householder(a[k:, k])
        if beta:
            a[k:, k:] -= beta * np.outer(v, v @ a[k:, k:])
        a[k, k] = alpha
        a[k + 1:, k] = 0.0
        left.append((v, beta))
        if k < n - 2:
            v, beta, alpha = _householder(a[k, k + 1:])
            if beta:
                a[k:, k + 1:] -= beta * np.outer(a[k:, k + 1:] @ v, v)
            a[k, k + 1] = alpha
            a[k, k + 2:] = 0.0
            right.append((v, beta))
    d = np.diag(a).copy()
    e = np.diag(a, 1).copy() if n > 1 else np.zeros(0)
    if not want_uv:
        return d, e, None, None
    u = np.eye(m, n)
    for k in range(n - 1, -1, -1):
        v, beta = left[k]
        if beta:
            u[k:, k:] -= beta * np.outer(v, v @ u[k:, k:])
    w = np.eye(n)
    for k in range(len(right) - 1, -1, -1):
        v, beta = right[k]
        if beta:
            w[k + 1:, k + 1:] -= beta * np.outer(v, v @ w[k + 1:, k + 1:])
    return d, e, np.ascontiguousarray(u.T), np.ascontiguousarray(w.T)


def _bidiagonal_qr(d, e, ut, vt, max_iter):
    """Implicit-shift QR on the upper bidiagonal (d, e), in place."""
    n = d.size
    if n == 0:
        return 0
    thresh = EPS * max(np.abs(d).max(), np.abs(e).max() if e.size else 0.0)
    iterations = 0
    hi = n - 1
    while hi > 0:
        # deflate converged trailing superdiagonal entries
        if abs(e[hi - 1]) <= EPS * (abs(d[hi - 1]) + abs(d[hi])) or abs(e[hi - 1]) <= thresh:
            e[hi - 1] = 0.0
            hi -= 1
            continue
        lo = hi - 1
        while lo > 0:
            if abs(e[lo - 1]) <= EPS * (abs(d[lo - 1]) + abs(d[lo])) or abs(e[lo - 1]) <= thresh:
                e[lo - 1] = 0.0
                break
            lo -= 1

        iterations += 1
        if iterations > max_iter:
            raise ConvergenceError(
                f"bidiagonal QR did not converge after {max_iter} iterations "
                f"(active block [{lo}, {hi}], |e| = {abs(e[hi - 1]):.3e})",
                iterations=iterations - 1,
                residual=float(np.abs(e).max()),
            )

        zero_at = -1
        for k in range(lo, hi + 1):
            if abs(d[k]) <= thresh:
                d[k] = 0.0
                zero_at = k
                break
        if zero_at >= 0:
            k = zero_at
            if k < hi:
                bulge = e[k]
                e[k] = 0.0
                for j in range(k + 1, hi + 1):
                    c, s, r = _givens(d[j], bulge)
                    d[j] = r
                    if j < hi:
                        bulge = -s * e[j]
                        e[j] = c * e[j]
                    if ut is not None:
                        _rotate_rows(ut, j, k, c, s)
            else:
                bulge = e[hi - 1]
                e[hi - 1] = 0.0
                for j in range(hi - 1, lo - 1, -1):
                    c, s, r = _givens(d[j], bulge)
                    d[j] = r
                    if j > lo:
                        bulge = -s * e[j - 1]
                        e[j - 1] = c * e[j - 1]
                    if vt is not None:
                        _rotate_rows(vt, j, hi, c, s)
            continue

        # Wilkinson shift from the trailing 2x2 block of B^T B
        dm, dn, em = d[hi - 1], d[hi], e[hi - 1]
        el = e[hi - 2] if hi - 1 > lo else 0.0
        t11 = dm * dm + el * el
        t12 = dm * em
        t22 = dn * dn + em * em
        delta = 0.5 * (t11 - t22)
        denom = delta + math.copysign(math.hypot(delta, t12), delta)
        shift = t22 - t12 * t12 / denom if denom != 0.0 else t22

        y = d[lo] * d[lo] - shift
        z = d[lo] * e[lo]
        for k in range(lo, hi):
            c, s, r = _givens(y, z)
            if k > lo:
                e[k - 1] = r
            dk, ek, dk1 = d[k], e[k], d[k + 1]
            y = c * dk + s * ek
            e[k] = -s * dk + c * ek
            z = s * dk1
            d[k + 1] = c * dk1
            if vt is not None:
                _rotate_rows(vt, k, k + 1, c, s)
            c, s, r = _givens(y, z)
            d[k] = r
            ek, dk1 = e[k], d[k + 1]
            y = c * ek + s * dk1
            d[k + 1] = -s * ek + c * dk1
            if k < hi - 1:
                z = s * e[k + 1]
                e[k + 1] = c * e[k + 1]
            if ut is not None:
                _rotate_rows(ut, k, k + 1, c, s)
        e[hi - 1] = y
    return iterations


def svd(m, compute_uv=True, max_iter=None):
    """Thin singular value decomposition ``m = U @ diag(s) @ Vt``.

    Householder bidiagonalization followed by implicit-shift (Golub-Kahan)
    QR on the bidiagonal.  Singular values are returned non-negative and
    sorted in non-increasing order.

    Parameters
    ----------
    m : (r, c) array_like
    compute_uv : bool
        If False only ``s`` is returned, which skips all rotation
        accumulation and is several times cheaper.
    max_iter : int, optional
        Cap on QR sweeps; defaults to ``100 * min(r, c) + 100``.

    Raises
    ------
    ConvergenceError
        If the sweep cap is reached.
    """
    a = _as_matrix(m)
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    rows, cols = a.shape
    if cols == 0:
        s = np.zeros(0)
        if not compute_uv:
            return s
        u, vt = np.zeros((rows, 0)), np.zeros((0, cols))
        return (vt.T, s, u.T) if transposed else (u, s, vt)

    scale = float(np.abs(a).max())
    if scale == 0.0:
        s = np.zeros(cols)
        if not compute_uv:
            return s
        u, vt = np.eye(rows, cols), np.eye(cols)
        return (vt.T, s, u.T) if transposed else (u, s, vt)

    d, e, ut, vt = _bidiagonalize(a / scale, compute_uv)
    if max_iter is None:
        max_iter = 100 * cols + 100
    _bidiagonal_qr(d, e, ut, vt, max_iter)

    neg = d < 0
    d[neg] = -d[neg]
    if vt is not None:
        vt[neg] *= -1.0
    order = np.argsort(-d, kind="stable")
    s = d[order] * scale
    if not compute_uv:
        return s
    u = ut[order].T
    vt = vt[order]
    if transposed:
        return vt.T, s, u.T
    return u, s, vt


# --------------------------------------------------------------------------
# Symmetric eigenproblem
# --------------------------------------------------------------------------

def _check_symmetric(a, rtol):
    if a.shape[-1] != a.shape[-2]:
        raise ValueError(f"matrix must be square, got shape {a.shape}")
    diff = np.sqrt(np.sum((a - np.swapaxes(a, -1, -2)) ** 2, axis=(-2, -1)))
    size = np.sqrt(np.sum(a * a, axis=(-2, -1)))
    bad = diff > rtol * np.maximum(size, np.finfo(float).tiny)
    if np.any(bad):
        raise SymmetryError(
            f"matrix is not symmetric: |m - m^T| = {float(np.max(diff)):.3e} "
            f"exceeds {rtol:g} relative"
        )


def _tridiagonalize(a):
    n = a.shape[0]
    a = a.copy()
    q = np.eye(n)
    for k in range(n - 2):
        v, beta, alpha = _householder(a[k + 1:, k])
        if not beta:
            continue
        a22 = a[k + 1:, k + 1:]
        p = beta * (a22 @ v)
        w = p - (0.5 * beta * float(p @ v)) * v
        a22 -= np.outer(v, w) + np.outer(w, v)
        a[k + 1, k] = a[k, k + 1] = alpha
        a[k + 2:, k] = 0.0
        a[k, k + 2:] = 0.0
        q[:, k + 1:] -= beta * np.outer(q[:, k + 1:] @ v, v)
    d = np.diag(a).copy()
    e = np.zeros(n)
    e[:-1] = np.diag(a, -1)
    return d, e, q


def _tridiagonal_ql(d, e, zt, max_iter):
    """Implicit QL with Wilkinson-type shifts; ``e[i]`` couples d[i], d[i+1]."""
    n = d.size
    # absolute floor so clusters of near-zero eigenvalues still deflate
    floor = EPS * max(float(np.abs(d).max(initial=0.0)), float(np.abs(e).max(initial=0.0)))
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                if abs(e[m]) <= EPS * (abs(d[m]) + abs(d[m + 1])) or abs(e[m]) <= floor:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_iter:
                raise ConvergenceError(
                    f"tridiagonal QL did not converge for eigenvalue {l} "
                    f"after {max_iter} iterations (|e| = {abs(e[l]):.3e})",
                    iterations=it - 1,
                    residual=abs(e[l]),
                )
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            deflated = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                if zt is not None:
                    zi1 = zt[i + 1].copy()
                    zt[i + 1] *= c
                    zt[i + 1] += s * zt[i]
                    zt[i] *= c
                    zt[i] -= s * zi1
                i -= 1
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0


def _jacobi_batched(a, max_sweeps):
    k = a.shape[-1]
    batch = a.reshape(-1, k, k).copy()
    vecs = np.broadcast_to(np.eye(k), batch.shape).copy()
    if k == 1:
        return batch[:, 0, :], vecs
    size = np.sqrt(np.sum(batch * batch, axis=(1, 2)))
    offmask = ~np.eye(k, dtype=bool)
    for sweep in range(max_sweeps + 1):
        off = np.sqrt(np.sum(batch[:, offmask] ** 2, axis=1))
        if np.all(off <= EPS * size):
            break
        if sweep == max_sweeps:
            raise ConvergenceError(
                f"Jacobi eigen-iteration did not converge in {max_sweeps} sweeps "
                f"(max off-diagonal norm {float(off.max()):.3e})",
                iterations=max_sweeps,
                residual=float(off.max()),
            )
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = batch[:, p, q]
                active = np.abs(apq) > EPS * 1e-3 * np.maximum(size, np.finfo(float).tiny)
                if not np.any(active):
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (batch[:, q, q] - batch[:, p, p]) / (2.0 * safe)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c = np.where(active, c, 1.0)[:, None]
                s = np.where(active, s, 0.0)[:, None]
                cp, cq = batch[:, :, p].copy(), batch[:, :, q].copy()
                batch[:, :, p] = c * cp - s * cq
                batch[:, :, q] = s * cp + c * cq
                rp, rq = batch[:, p, :].copy(), batch[:, q, :].copy()
                batch[:, p, :] = c * rp - s * rq
                batch[:, q, :] = s * rp + c * rq
                vp, vq = vecs[:, :, p].copy(), vecs[:, :, q].copy()
                vecs[:, :, p] = c * vp - s * vq
                vecs[:, :, q] = s * vp + c * vq
    return np.diagonal(batch, axis1=1, axis2=2).copy(), vecs


def sym_eig(m, compute_vectors=True, symmetry_rtol=SYMMETRY_RTOL, max_iter=60):
    """Eigen-decomposition of a real symmetric matrix (or a stack of them).

    A single matrix is reduced to tridiagonal form by Householder
    reflections and diagonalized by implicit QL.  Stacks of small matrices
    of shape ``(..., k, k)`` use a batched cyclic Jacobi iteration.

    Returns
    -------
    values : ndarray
        Eigenvalues in ascending order, shape ``(..., k)``.
    vectors : ndarray
        Orthonormal eigenvectors as columns, shape ``(..., k, k)``; only
        when ``compute_vectors`` is true.
    """
    a = np.array(m, dtype=float)
    if a.ndim < 2:
        raise ValueError("sym_eig expects a matrix or a stack of matrices")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    _check_symmetric(a, symmetry_rtol)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    # unit scaling keeps reflectors and rotations away from subnormal range
    scale = np.abs(a).max(axis=(-2, -1), keepdims=True) if a.size else np.ones(a.shape[:-2] + (1, 1))
    scale = np.where(scale > 0, scale, 1.0)
    a = a / scale

    if a.ndim > 2:
        vals, vecs = _jacobi_batched(a, JACOBI_MAX_SWEEPS)
        order = np.argsort(vals, axis=1, kind="stable")
        vals = np.take_along_axis(vals, order, axis=1)
        vecs = np.take_along_axis(vecs, order[:, None, :], axis=2)
        k = a.shape[-1]
        vals = vals.reshape(a.shape[:-1]) * scale[..., 0]
        if not compute_vectors:
            return vals
        return vals, vecs.reshape(a.shape[:-2] + (k, k))

    n = a.shape[0]
    if n == 0:
        return (np.zeros(0), np.zeros((0, 0))) if compute_vectors else np.zeros(0)
    d, e, q = _tridiagonalize(a)
    zt = np.ascontiguousarray(q.T) if compute_vectors else None
    _tridiagonal_ql(d, e, zt, max_iter)
    d *= float(scale[0, 0])
    order = np.argsort(d, kind="stable")
    if not compute_vectors:
        return d[order]
    return d[order], zt[order].T


# --------------------------------------------------------------------------
# Cholesky, triangular solves, least squares
# --------------------------------------------------------------------------

def cholesky(m, symmetry_rtol=SYMMETRY_RTOL):
    """Lower-triangular ``L`` with ``L @ L.T == m``.

    Raises
    ------
    NotPositiveDefiniteError
        On the first pivot that is not strictly positive; ``err.pivot``
        holds its index.
    """
    a = _as_matrix(m)
    _check_symmetric(a, symmetry_rtol)
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        row = low[j, :j]
        piv = a[j, j] - float(row @ row)
        if not piv > 0.0:
            raise NotPositiveDefiniteError(
                f"matrix is not positive definite: pivot {j} equals {piv:.3e}", pivot=j
            )
        ljj = math.sqrt(piv)
        low[j, j] = ljj
        if j + 1 < n:
            low[j + 1:, j] = (a[j + 1:, j] - low[j + 1:, :j] @ row) / ljj
    return low


def solve_lower(low, b):
    """Forward substitution ``low @ x = b`` (b may be a matrix)."""
    low = np.asarray(low, dtype=float)
    x = np.array(b, dtype=float)
    for i in range(low.shape[0]):
        if i:
            x[i] -= low[i, :i] @ x[:i]
        x[i] /= low[i, i]
    return x


def solve_upper(up, b):
    """Back substitution ``up @ x = b`` (b may be a matrix)."""
    up = np.asarray(up, dtype=float)
    x = np.array(b, dtype=float)
    n = up.shape[0]
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            x[i] -= up[i, i + 1:] @ x[i + 1:]
        x[i] /= up[i, i]
    return x


class LstsqResult(NamedTuple):
    x: np.ndarray
    residual: float
    rank: int
    rank_deficient: bool


def least_squares(a, b, rcond=None):
    """Minimize ``|a @ x - b|_2`` through the SVD of ``a``.

    Rank-deficient problems get the minimum-norm minimizer and
    ``rank_deficient=True`` in the result.

    Raises
    ------
    SingularMatrixError
        If the minimizer is not representable in floating point.
    """
    a = _as_matrix(a, "a")
    b = np.asarray(b, dtype=float)
    rows, cols = a.shape
    if rows < cols:
        raise ValueError(f"least_squares needs rows >= cols, got {a.shape}")
    if b.shape[0] != rows:
        raise ValueError(f"right-hand side has length {b.shape[0]}, expected {rows}")
    u, s, vt = svd(a)
    if rcond is None:
        rcond = max(rows, cols) * EPS
    cut = rcond * s[0] if s.size and s[0] > 0 else 0.0
    rank = int(np.sum(s > cut)) if s.size and s[0] > 0 else 0
    with np.errstate(over="ignore", invalid="ignore"):
        coef = (u[:, :rank].T @ b) / (s[:rank] if b.ndim == 1 else s[:rank, None])
        x = vt[:rank].T @ coef
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError(f"least-squares solution overflows (smallest kept singular value "
                                  f"{s[rank - 1]:.3e})")
    residual = float(np.linalg.norm(a @ x - b))
    return LstsqResult(x, residual, rank, rank < cols)


# --------------------------------------------------------------------------
# Sparse
# --------------------------------------------------------------------------

class _LevelSolver:
    """Block forward elimination for matrices whose block graph is acyclic.

    Ordering the blocks topologically makes the matrix block lower
    triangular, so its LU factors are the matrix itself with pivoting
    confined to the diagonal blocks.  Blocks of one level do not couple and
    are eliminated together.
    """

    def __init__(self, a, block, levels):
        self.a = a
        self.block = block
        n = a.shape[0] // block
        idx = np.arange(n)
        diag = np.empty((n, block, block))
        for r in range(block):
            rows = a[idx * block + r]
            for c in range(block):
                diag[:, r, c] = np.asarray(rows[:, idx * block + c].diagonal()).ravel()
        self.diag = diag
        self.groups = []
        order = np.argsort(levels, kind="stable")
        bounds = np.searchsorted(levels[order], np.arange(levels.max() + 2))
        for lev in range(levels.max() + 1):
            blocks = order[bounds[lev]:bounds[lev + 1]]
            rows = (blocks[:, None] * block + np.arange(block)).ravel()
            self.groups.append((blocks, rows, a[rows]))

    def solve(self, b):
        x = np.zeros_like(b)
        for blocks, rows, arows in self.groups:
            # diagonal blocks of this level see x == 0 on their own rows
            rhs = (b[rows] - arows @ x).reshape(len(blocks), self.block, -1)
            x[rows] = np.linalg.solve(self.diag[blocks], rhs).reshape(x[rows].shape)
        return x


def _block_levels(a, block):
    """Topological levels of the block graph, or None if it has a cycle."""
    n = a.shape[0] // block
    coo = a.tocoo()
    keep = coo.data != 0.0
    br, bc = coo.row[keep] // block, coo.col[keep] // block
    off = br != bc
    graph = sp.csr_matrix((np.ones(int(off.sum())), (bc[off], br[off])), shape=(n, n))
    graph.data[:] = 1.0
    graph.sum_duplicates()
    graph.data[:] = 1.0
    indeg = np.asarray(graph.sum(axis=0)).ravel()
    levels = np.full(n, -1)
    frontier = np.flatnonzero(indeg == 0)
    lev = 0
    while frontier.size:
        levels[frontier] = lev
        indeg = indeg - np.asarray(graph[frontier].sum(axis=0)).ravel()
        frontier = np.flatnonzero((indeg == 0) & (levels < 0))
        lev += 1
    return levels if np.all(levels >= 0) else None


def _lu_solver(a, block):
    if block and block > 0 and a.shape[0] % block == 0:
        levels = _block_levels(a, block)
        if levels is not None:
            return _LevelSolver(sp.csr_matrix(a), block, levels)
    lu = spla.splu(sp.csc_matrix(a), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=1.0)
    return lu


def sparse_solve(a, b, rtol=SOLVE_RTOL, block=None):
    """Solve ``a @ x = b`` by sparse LU with partial pivoting.

    Parameters
    ----------
    block : int, optional
        Size of the dense diagonal blocks (e.g. DOFs per DG cell).  When the
        coupling graph between blocks is acyclic, as for upwind transport,
        the system is eliminated block by block in topological order with
        no fill-in; otherwise SuperLU is used.

    A single step of iterative refinement is taken when the first solve
    misses ``rtol``; if the relative residual still exceeds ``rtol`` the
    matrix is treated as numerically singular.
    """
    if not sp.issparse(a):
        a = sp.csr_matrix(np.asarray(a, dtype=float))
    rows, cols = a.shape
    if rows != cols:
        raise ValueError(f"sparse_solve needs a square matrix, got {a.shape}")
    b = np.asarray(b, dtype=float)
    if b.shape[0] != rows:
        raise ValueError(f"right-hand side has length {b.shape[0]}, expected {rows}")
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b)
    try:
        lu = _lu_solver(a, block)
        x = lu.solve(b)
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        raise SingularMatrixError(f"sparse LU failed: {exc}") from exc
    r = b - a @ x
    rel = float(np.linalg.norm(r)) / bnorm
    if not rel <= rtol:
        x = x + lu.solve(r)
        r = b - a @ x
        rel = float(np.linalg.norm(r)) / bnorm
    if not (np.all(np.isfinite(x)) and rel <= rtol):
        raise SingularMatrixError(
            f"relative residual {rel:.3e} exceeds {rtol:g}; matrix is singular to tolerance"
        )
    return x
