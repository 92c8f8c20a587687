"""Linear-algebra kernels: SPD solves, KKT solves and symmetric eigenproblems."""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import SolverError

SPD_RTOL = 1e-10
SADDLE_RTOL = 1e-9
EIG_RTOL = 1e-10
DENSE_EIG_LIMIT = 2000


def _as_sparse(A) -> sp.csc_matrix:
    return sp.csc_matrix(A) if not sp.issparse(A) else A.tocsc()


def solve_spd(A, b, rtol: float = SPD_RTOL) -> np.ndarray:
    """Direct solve of a symmetric positive definite system with a residual check."""
    b = np.asarray(b, dtype=float)
    if sp.issparse(A):
        x = spla.splu(_as_sparse(A)).solve(b)
    else:
        x = sla.cho_solve(sla.cho_factor(np.asarray(A, dtype=float)), b)
    res = np.linalg.norm(A @ x - b)
    bnorm = np.linalg.norm(b)
    if res > rtol * max(bnorm, np.finfo(float).tiny):
        if bnorm == 0.0 and res == 0.0:
            return x
        raise SolverError(f"SPD solve residual {res:.3e} exceeds {rtol:.1e} * |b| = {rtol * bnorm:.3e}", res)
    return x


class SaddleSolver:
    """Factor ``[[A, B^T], [B, 0]]`` once and solve for many right-hand sides.

    The bordered matrix is factored by sparse LU with partial pivoting; if the
    factorization reports exact singularity, the multiplier block is shifted
    to ``-eps I`` with ``eps = 1e-12 ||A||`` and factored again.  Each solve
    does up to ``refine`` steps of iterative refinement against the
    unregularized system.
    """

    def __init__(self, A, B, check_rank: bool = True, refine: int = 3):
        A = _as_sparse(A)
        B = sp.csr_matrix(B)
        self.n, self.m = A.shape[0], B.shape[0]
        if check_rank:
            _check_full_row_rank(B)
        self.A, self.B, self.refine = A, B, refine
        self.K = sp.bmat([[A, B.T], [B, None]], format="csc")
        try:
            self._lu = spla.splu(self.K)
        except RuntimeError:
            eps = 1e-12 * abs(A).max()
            Kreg = sp.bmat([[A, B.T], [B, -eps * sp.identity(self.m)]], format="csc")
            try:
                self._lu = spla.splu(Kreg)
            except RuntimeError as err:
                raise SolverError(f"KKT factorization failed even with regularization: {err}") from err

    def solve(self, b, g):
        """Return ``(x, mu)`` and enforce the residual contract."""
        b = np.asarray(b, dtype=float)
        g = np.asarray(g, dtype=float)
        rhs = np.concatenate([b, g], axis=0)
        sol = self._lu.solve(rhs)
        for _ in range(self.refine):
            r = rhs - self.K @ sol
            if np.all(np.abs(r) <= 1e-15 * (np.abs(rhs).max() + 1e-300)):
                break
            sol = sol + self._lu.solve(r)
        x, mu = sol[: self.n], sol[self.n :]
        self.check(x, mu, b, g)
        return x, mu

    def residuals(self, x, mu, b, g):
        r1 = self.A @ x + self.B.T @ mu - b
        r2 = self.B @ x - g
        return np.linalg.norm(r1, axis=0), np.linalg.norm(r2, axis=0)

    def check(self, x, mu, b, g):
        r1, r2 = self.residuals(x, mu, b, g)
        bn = np.linalg.norm(b, axis=0)
        gn = np.linalg.norm(g, axis=0)
        tol1 = SADDLE_RTOL * (bn + gn)
        tol2 = np.where(gn > 0, SADDLE_RTOL * gn, 1e-12)
        # stationarity is measured against the stiffness scale when b = g = 0
        tol1 = np.where(tol1 > 0, tol1, 1e-12 * max(abs(self.A).max(), 1.0))
        bad = (r1 > tol1) | (r2 > tol2)
        if np.any(bad):
            raise SolverError(
                f"KKT residuals {np.max(r1):.3e} / {np.max(r2):.3e} exceed tolerance",
                residual=(float(np.max(r1)), float(np.max(r2))),
            )


def _check_full_row_rank(B: sp.csr_matrix):
    G = (B @ B.T).toarray()
    d = np.sqrt(np.diag(G))
    if np.any(d == 0):
        raise SolverError("constraint matrix has a zero row (rank deficient)")
    G = G / np.outer(d, d)
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as err:
        raise SolverError("constraint matrix is rank deficient") from err
    if np.min(np.diag(L)) ** 2 < 1e-13:
        raise SolverError("constraint matrix is numerically rank deficient")


def solve_saddle(A, B, b, g):
    """Minimize ``x^T A x / 2 - b^T x`` subject to ``B x = g``.

    Returns ``(x, mu)`` solving ``[[A, B^T], [B, 0]] [x; mu] = [b; g]``.
    """
    return SaddleSolver(A, B).solve(b, g)


def dense_generalized_eig(A, M, check: bool = True):
    """Eigenpairs of ``A v = lam M v`` with ``lam`` ascending and ``V^T M V = I``."""
    A = np.asarray(A, dtype=float)
    M = np.asarray(M, dtype=float)
    A = 0.5 * (A + A.T)
    M = 0.5 * (M + M.T)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as err:
        raise SolverError("mass matrix is not symmetric positive definite") from err
    lam, V = sla.eigh(A, M)
    if check:
        scale = max(np.abs(A).max(), np.abs(M).max() * np.abs(lam).max(), np.finfo(float).tiny)
        res = np.abs(A @ V - (M @ V) * lam).max()
        orth = np.abs(V.T @ M @ V - np.eye(len(lam))).max()
        if res > EIG_RTOL * scale * 10 or orth > 1e-9:
            raise SolverError(f"generalized eigen-solve inaccurate (residual {res:.2e}, orthogonality {orth:.2e})")
    return lam, V


def extreme_generalized_eigenvalue(A, M, which: str = "max"):
    """Largest or smallest eigenpair of ``A v = lam M v`` (A sym. PSD, M SPD)."""
    if which not in ("max", "min"):
        raise ValueError("which must be 'max' or 'min'")
    n = A.shape[0]
    if n <= DENSE_EIG_LIMIT:
        Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
        Md = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
        # full spectrum: the index-subset driver can return nothing for a degenerate cluster
        lam, V = sla.eigh(0.5 * (Ad + Ad.T), 0.5 * (Md + Md.T))
        idx = n - 1 if which == "max" else 0
        return float(lam[idx]), V[:, idx]
    A = _as_sparse(A)
    M = _as_sparse(M)
    try:
        if which == "max":
            Mlu = spla.splu(M)
            Minv = spla.LinearOperator(M.shape, matvec=Mlu.solve, dtype=float)
            lam, V = spla.eigsh(A, k=1, M=M, Minv=Minv, which="LA", tol=1e-12, maxiter=20 * n)
        else:
            lam, V = spla.eigsh(A, k=1, M=M, sigma=-1e-8 * abs(A).max(), which="LM", tol=1e-12, maxiter=20 * n)
    except spla.ArpackNoConvergence as err:
        raise SolverError(f"eigen-solve did not converge: {len(err.eigenvalues)} of 1 pairs found") from err
    return float(lam[0]), V[:, 0]
