"""Splitting of the multicontinuum space into slow (explicit) and fast
(implicit) components.

The rank-4 block tensor ``A[k, m, l, n]`` is reduced to an ``N x N`` matrix of
directional maxima, and the generalized eigenproblem ``A_red v = lam M v``
orders mixed continua from slow to fast.  When the eigenvectors violate the
mixing assumption the split falls back to the best subset of natural
continua.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .exceptions import ConfigurationError, ContinuumError, SolverError
from .linalg import dense_generalized_eig

SUBSET_LIMIT = 12
MIXING_RTOL = 1e-9
POLICIES = ("gap", "threshold", "target_tau", "fixed")


def _sym4(A):
    A = np.asarray(A, dtype=float)
    return 0.5 * (A + A.transpose(2, 3, 0, 1))


def _blocks(A):
    """``A^{kl}[m, n] = A[k, m, l, n]`` as an array of shape (N, N, 2, 2)."""
    return np.asarray(A).transpose(0, 2, 1, 3)


def _max_eig_2x2(S):
    """Largest eigenvalue of symmetric 2x2 matrices stacked on the leading axes."""
    a, b, c = S[..., 0, 0], 0.5 * (S[..., 0, 1] + S[..., 1, 0]), S[..., 1, 1]
    return 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)


def reduce_tensor(A) -> np.ndarray:
    """Rank-reduced matrix ``A_red[k, l] = max eig`` of the 2x2 block ``A^{kl}``.

    Each block is symmetrized before its eigenvalue is taken, which guards
    against quadrature asymmetry and makes the off-diagonal entries
    well-defined.

    Parameters
    ----------
    A : ndarray, shape (N, 2, N, 2)

    Returns
    -------
    ndarray, shape (N, N), symmetric
    """
    blk = _blocks(_sym4(A))
    red = _max_eig_2x2(0.5 * (blk + blk.swapaxes(-1, -2)))
    return 0.5 * (red + red.T)


@dataclass
class BlockAggregate:
    """Domain-level split data built from per-block tensors.

    ``A_red`` and ``C`` are entry-wise maxima over blocks, ``M`` the mean.
    The per-block arrays are kept for the assumption check and the subset
    search, which are evaluated on every block.
    """

    A_red: np.ndarray
    M: np.ndarray
    C: np.ndarray
    A_blocks: np.ndarray = dc_field(repr=False)  # (nb, N, 2, N, 2)
    M_blocks: np.ndarray = dc_field(repr=False)
    C_blocks: np.ndarray = dc_field(repr=False)
    A_red_blocks: np.ndarray = dc_field(repr=False)

    @property
    def N(self) -> int:
        return self.M.shape[0]


def aggregate(A_blocks, M_blocks, C_blocks) -> BlockAggregate:
    """Combine stacked per-block ``A``, ``M``, ``C`` into a :class:`BlockAggregate`."""
    A_blocks = _sym4_stack(np.asarray(A_blocks, dtype=float))
    M_blocks = np.asarray(M_blocks, dtype=float)
    C_blocks = np.asarray(C_blocks, dtype=float)
    red = np.stack([reduce_tensor(a) for a in A_blocks])
    M = M_blocks.mean(axis=0)
    M = 0.5 * (M + M.T)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as err:
        raise SolverError("aggregated mass matrix is not positive definite") from err
    return BlockAggregate(
        A_red=red.max(axis=0),
        M=M,
        C=C_blocks.max(axis=0),
        A_blocks=A_blocks,
        M_blocks=M_blocks,
        C_blocks=C_blocks,
        A_red_blocks=red,
    )


def _sym4_stack(A):
    return 0.5 * (A + A.transpose(0, 3, 4, 1, 2))


@dataclass(frozen=True)
class SelectionPolicy:
    """How many slow modes go to the explicit component.

    kind
        ``"gap"``: split at the largest ratio ``lam[k] / lam[k-1]`` provided it
        reaches ``gap_ratio``, else ``i0 = 0``.  ``"threshold"``: count of
        ``lam <= lam_cut``.  ``"target_tau"``: count of ``lam <= H^2 / (C1 tau)``.
        ``"fixed"``: ``i0`` as given.
    """

    kind: str = "gap"
    gap_ratio: float = 100.0
    lam_cut: float | None = None
    tau: float | None = None
    C1: float | None = None
    H: float | None = None
    i0: int | None = None

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ConfigurationError(f"unknown selection policy {self.kind!r}; expected one of {POLICIES}")
        need = {"threshold": ("lam_cut",), "target_tau": ("tau", "C1", "H"), "fixed": ("i0",)}.get(self.kind, ())
        missing = [n for n in need if getattr(self, n) is None]
        if missing:
            raise ConfigurationError(f"policy {self.kind!r} needs {', '.join(missing)}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("kind", "gap_ratio", "lam_cut", "tau", "C1", "H", "i0")}


def select_i0(lam: Sequence[float], policy: SelectionPolicy = SelectionPolicy()) -> int:
    """Number of small eigenvalues under ``policy`` (``lam`` ascending)."""
    lam = np.asarray(lam, dtype=float)
    N = lam.size
    if N == 0:
        raise ValueError("empty eigenvalue list")
    if policy.kind == "gap":
        if N < 2:
            return 0
        lo = np.maximum(lam[:-1], np.finfo(float).tiny)
        ratios = lam[1:] / lo
        k = int(np.argmax(ratios))
        return k + 1 if ratios[k] >= policy.gap_ratio else 0
    if policy.kind == "threshold":
        return int(np.sum(lam <= policy.lam_cut))
    if policy.kind == "target_tau":
        return int(np.sum(lam <= policy.H**2 / (policy.C1 * policy.tau)))
    i0 = int(policy.i0)
    if not 0 <= i0 <= N:
        raise ConfigurationError(f"fixed i0={i0} outside [0, {N}]")
    return i0


def dual_matrix(v) -> np.ndarray:
    """``v_hat = (v^T)^{-1}``, so that ``v_hat^T v = I``."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ContinuumError(f"mixing matrix must be square, got shape {v.shape}")
    if np.linalg.cond(v) > 1e12:
        raise ContinuumError("mixing matrix is singular")
    v_hat = np.linalg.solve(v.T, np.eye(v.shape[0]))
    if np.abs(v_hat.T @ v - np.eye(v.shape[0])).max() > 1e-9:
        raise ContinuumError("mixing matrix is too ill-conditioned to invert")
    return v_hat


@dataclass
class MixingVerdict:
    """Both sides of the mixing inequality for one slow pair ``(i, j)``.

    ``termwise`` is ``sum_{k,l} max eig(v_ik A^{kl} v_jl)``, kept as a
    diagnostic; it equals ``rhs`` exactly when all products ``v_ik v_jl``
    are nonnegative.
    """

    i: int
    j: int
    lhs: float
    rhs: float
    termwise: float
    passed: bool

    def to_dict(self) -> dict:
        return {"i": self.i, "j": self.j, "lhs": self.lhs, "rhs": self.rhs, "termwise": self.termwise, "passed": self.passed}


def _mixing_sides(A, v, i, j):
    blk = _blocks(_sym4(A))
    scaled = np.outer(v[i], v[j])[:, :, None, None] * blk
    summed = scaled.sum(axis=(0, 1))
    lhs = float(_max_eig_2x2(0.5 * (summed + summed.T)))
    rhs = float(v[i] @ reduce_tensor(A) @ v[j])
    termwise = float(np.sum(_max_eig_2x2(0.5 * (scaled + scaled.swapaxes(-1, -2)))))
    return lhs, rhs, termwise


def verify_mixing_assumption(A, v, i0: int, rtol: float = MIXING_RTOL) -> list[MixingVerdict]:
    """Check the mixing inequality for every slow pair ``i, j < i0``.

    The left side is the largest eigenvalue of the contracted 2x2 block
    ``sum_{k,l} v_ik A^{kl} v_jl``, the right side ``v_i^T A_red v_j``; a
    pair passes when ``lhs <= rhs + rtol * scale`` with ``scale`` the size
    of the terms involved.  ``A`` may be a single tensor or a stack over
    blocks, in which case a pair must pass on every block and the reported
    sides are those of the worst block.
    """
    A = np.asarray(A, dtype=float)
    stack = A[None] if A.ndim == 4 else A
    v = np.asarray(v, dtype=float)
    out = []
    for i in range(i0):
        for j in range(i0):
            worst = None
            for Ab in stack:
                lhs, rhs, tw = _mixing_sides(Ab, v, i, j)
                scale = np.abs(np.outer(v[i], v[j])[:, :, None, None] * _blocks(Ab)).sum()
                margin = (rhs + rtol * scale) - lhs
                if worst is None or margin < worst[0]:
                    worst = (margin, lhs, rhs, tw)
            out.append(MixingVerdict(i, j, worst[1], worst[2], worst[3], bool(worst[0] >= 0)))
    return out


def subset_value(A, M, subset: Sequence[int]) -> float:
    """Largest generalized eigenvalue of ``(A|_S, (M kron I2)|_S)`` for one tensor."""
    S = list(subset)
    A = _sym4(A)
    As = A[np.ix_(S, [0, 1], S, [0, 1])].reshape(2 * len(S), 2 * len(S))
    Ms = np.kron(np.asarray(M, dtype=float)[np.ix_(S, S)], np.eye(2))
    lam = sla.eigh(0.5 * (As + As.T), 0.5 * (Ms + Ms.T), eigvals_only=True)
    return float(lam[-1])


def subset_split(agg: BlockAggregate, i: int) -> tuple[tuple[int, ...], float]:
    """Best ``i``-subset of natural continua (0-based indices) and its value.

    The value of a subset is the worst block's largest Rayleigh quotient of
    the restricted tensor against ``M kron I``; the subset with the smallest
    value wins, ties going to the lexicographically smallest subset.
    """
    N = agg.N
    if N > SUBSET_LIMIT:
        raise ConfigurationError(f"subset enumeration limited to N <= {SUBSET_LIMIT}, got N={N}")
    if not 1 <= i <= N:
        raise ConfigurationError(f"subset size must be in [1, {N}], got {i}")
    best, best_val = None, np.inf
    for S in itertools.combinations(range(N), i):
        val = max(subset_value(a, m, S) for a, m in zip(agg.A_blocks, agg.M_blocks))
        if val < best_val * (1 - 1e-12):
            best, best_val = S, val
    return best, best_val


def _m_gram_schmidt(vectors, M):
    out = []
    for x in vectors:
        x = np.array(x, dtype=float)
        for _ in range(2):
            for q in out:
                x = x - (q @ M @ x) * q
        nrm = np.sqrt(x @ M @ x)
        if nrm < 1e-12:
            raise ContinuumError("mixing vectors are linearly dependent")
        out.append(x / nrm)
    return np.array(out)


@dataclass
class SplitPlan:
    """Mixing of continua into slow (first ``i0`` rows) and fast components.

    Attributes
    ----------
    eigenvalues : ndarray, shape (N,)
        Ascending generalized eigenvalues of ``(A_red, M)``.
    v : ndarray, shape (N, N)
        Row ``i`` holds the coefficients of mixed continuum ``i``.
    v_hat : ndarray, shape (N, N)
        ``(v^T)^{-1}``.
    i0 : int
        Size of the slow (explicit) component.
    method : str
        ``"spectral"``, ``"subset"`` or ``"manual"``.
    eigenvectors : ndarray, shape (N, N) or None
        M-orthonormal eigenvectors of ``(A_red, M)`` as rows, kept even when
        the plan falls back to a subset split.
    critical : float
        Rate entering the time-step bound: ``eigenvalues[i0-1]`` for the
        spectral method, the subset value for the subset method.
    """

    eigenvalues: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray
    i0: int
    method: str
    critical: float = 0.0
    verdicts: list = dc_field(default_factory=list)
    subset: tuple[int, ...] | None = None
    fallback_from: str | None = None
    eigenvectors: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.v.shape[0]

    @property
    def assumption_passed(self) -> bool:
        return all(vd.passed for vd in self.verdicts)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "i0": int(self.i0),
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "critical": float(self.critical),
            "v": np.asarray(self.v).tolist(),
            "v_hat": np.asarray(self.v_hat).tolist(),
            "subset": None if self.subset is None else [int(s) for s in self.subset],
            "fallback_from": self.fallback_from,
            "eigenvectors": None if self.eigenvectors is None else np.asarray(self.eigenvectors).tolist(),
            "assumption_passed": self.assumption_passed,
            "verdicts": [vd.to_dict() for vd in self.verdicts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        verdicts = [MixingVerdict(**x) for x in d.get("verdicts", [])]
        return cls(
            eigenvalues=np.asarray(d["eigenvalues"], dtype=float),
            v=np.asarray(d["v"], dtype=float),
            v_hat=np.asarray(d["v_hat"], dtype=float),
            i0=int(d["i0"]),
            method=d["method"],
            critical=float(d.get("critical", 0.0)),
            verdicts=verdicts,
            subset=None if d.get("subset") is None else tuple(d["subset"]),
            fallback_from=d.get("fallback_from"),
            eigenvectors=None if d.get("eigenvectors") is None else np.asarray(d["eigenvectors"], dtype=float),
        )


def _fix_signs(V):
    """Make the largest-magnitude entry of each row positive (deterministic output)."""
    V = np.array(V, dtype=float)
    for r in V:
        k = np.argmax(np.abs(r))
        if r[k] < 0:
            r *= -1
    return V


def spectral_split(agg: BlockAggregate, policy: SelectionPolicy = SelectionPolicy(), fallback: bool = True) -> SplitPlan:
    """Eigen-split of ``(A_red, M)`` with the mixing check and subset fallback.

    Rows of ``v`` are M-orthonormal eigenvectors in ascending eigenvalue
    order.  If any slow pair fails the mixing check and ``fallback`` is set,
    the plan is rebuilt by :func:`subset_plan` with the same ``i0``.
    """
    lam, V = dense_generalized_eig(agg.A_red, agg.M)
    v = _fix_signs(V.T)
    i0 = select_i0(lam, policy)
    plan = SplitPlan(
        eigenvalues=lam,
        v=v,
        v_hat=dual_matrix(v),
        i0=i0,
        method="spectral",
        critical=float(lam[i0 - 1]) if i0 else 0.0,
        verdicts=verify_mixing_assumption(agg.A_blocks, v, i0),
        eigenvectors=v,
    )
    if fallback and not plan.assumption_passed:
        sub = subset_plan(agg, i0)
        sub.eigenvectors = v
        sub.fallback_from = "spectral"
        sub.verdicts = plan.verdicts
        return sub
    return plan


def subset_plan(agg: BlockAggregate, i0: int) -> SplitPlan:
    """Plan whose slow space is spanned by the best ``i0`` natural continua.

    The basis is completed M-orthonormally: chosen continua first, then the
    rest, both in natural order.
    """
    N = agg.N
    lam = dense_generalized_eig(agg.A_red, agg.M)[0]
    if i0 == 0:
        S, val = (), 0.0
    else:
        S, val = subset_split(agg, i0)
    order = list(S) + [k for k in range(N) if k not in S]
    v = _m_gram_schmidt(np.eye(N)[order], agg.M)
    return SplitPlan(eigenvalues=lam, v=v, v_hat=dual_matrix(v), i0=i0, method="subset", critical=float(val), subset=tuple(S))


def manual_plan(N: int, slow: Sequence[int], agg: BlockAggregate | None = None) -> SplitPlan:
    """Plan that permutes natural continua: ``slow`` (0-based) first, unchanged otherwise.

    With ``agg`` the eigenvalues of ``(A_red, M)`` are recorded and the
    critical rate is the subset value of ``slow``.
    """
    slow = list(dict.fromkeys(int(s) for s in slow))
    if any(not 0 <= s < N for s in slow):
        raise ConfigurationError(f"slow indices {slow} out of range for N={N}")
    order = slow + [k for k in range(N) if k not in slow]
    v = np.eye(N)[order]
    lam, critical = np.full(N, np.nan), float("nan")
    if agg is not None:
        lam = dense_generalized_eig(agg.A_red, agg.M)[0]
        if slow:
            critical = max(subset_value(a, m, slow) for a, m in zip(agg.A_blocks, agg.M_blocks))
    return SplitPlan(
        eigenvalues=lam, v=v, v_hat=dual_matrix(v), i0=len(slow), method="manual", critical=critical, subset=tuple(slow)
    )


def split_coordinates(plan: SplitPlan, M, C, A=None):
    """Transform (possibly block-stacked) tensors to split coordinates.

    Returns ``v M v^T``, ``v C v^T`` and, if given, ``A`` contracted with
    ``v`` on both continuum slots.
    """
    v = plan.v
    out = [np.einsum("ik,...kl,jl->...ij", v, M, v), np.einsum("ik,...kl,jl->...ij", v, C, v)]
    if A is not None:
        out.append(np.einsum("ik,...kmln,jl->...imjn", v, A, v))
    return tuple(out)
