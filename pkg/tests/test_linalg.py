import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, strategies as st

from mcsplit.exceptions import SolverError
from mcsplit.linalg import dense_generalized_eig, extreme_generalized_eigenvalue, solve_saddle, solve_spd
from mcsplit.macrosystem import coarse_q1_matrices


def nullspace_qp(A, B, b, g):
    """Dense null-space method: x = xp + Z (Z^T A Z)^{-1} Z^T (b - A xp)."""
    xp = np.linalg.lstsq(B, g, rcond=None)[0]
    Z = sla.null_space(B)
    y = np.linalg.solve(Z.T @ A @ Z, Z.T @ (b - A @ xp))
    return xp + Z @ y


def random_kkt(rng, n=30, m=6, semidefinite=True):
    G = rng.standard_normal((n, n))
    A = G @ G.T
    if semidefinite:
        # remove a direction so A is only PSD; constraints must fix it
        w, Q = np.linalg.eigh(A)
        w[0] = 0.0
        A = (Q * w) @ Q.T
        A = 0.5 * (A + A.T)
    B = rng.standard_normal((m, n))
    return A, B


def test_spd_identity_and_diagonal(rng):
    b = rng.standard_normal(5)
    assert np.allclose(solve_spd(sp.identity(5), b), b)
    d = rng.uniform(1, 3, 5)
    assert np.allclose(solve_spd(sp.diags(d), b), b / d)


def test_spd_random_dense_oracle(rng):
    G = rng.standard_normal((50, 50))
    A = G.T @ G + np.eye(50)
    b = rng.standard_normal(50)
    x = solve_spd(sp.csr_matrix(A), b)
    assert np.allclose(x, sla.cho_solve(sla.cho_factor(A), b), atol=1e-8)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_saddle_mean_projection():
    n, c = 8, 2.5
    x, mu = solve_saddle(sp.identity(n), np.ones((1, n)) / n, np.zeros(n), np.array([c]))
    assert np.allclose(x, c)


def test_saddle_zero_data(rng):
    A, B = random_kkt(rng, 10, 3)
    x, mu = solve_saddle(A, B, np.zeros(10), np.zeros(3))
    assert np.all(x == 0) and np.all(mu == 0)


@pytest.mark.parametrize("seed", range(5))
def test_saddle_nullspace_oracle(seed):
    rng = np.random.default_rng(seed)
    A, B = random_kkt(rng)
    b, g = rng.standard_normal(30), rng.standard_normal(6)
    x, mu = solve_saddle(sp.csr_matrix(A), sp.csr_matrix(B), b, g)
    assert np.allclose(x, nullspace_qp(A, B, b, g), atol=1e-8)
    assert np.linalg.norm(A @ x + B.T @ mu - b) <= 1e-9 * (np.linalg.norm(b) + np.linalg.norm(g))
    assert np.linalg.norm(B @ x - g) <= 1e-9 * np.linalg.norm(g)


@given(st.integers(0, 10_000))
def test_saddle_energy_optimality(seed):
    rng = np.random.default_rng(seed)
    A, B = random_kkt(rng, 12, 4)
    b, g = rng.standard_normal(12), rng.standard_normal(4)
    x, _ = solve_saddle(A, B, b, g)
    J = lambda y: 0.5 * y @ A @ y - b @ y
    Z = sla.null_space(B)
    for _ in range(10):
        d = Z @ rng.standard_normal(Z.shape[1])
        assert J(x + d) >= J(x) - 1e-9


def test_saddle_rank_deficient_rejected(rng):
    A, B = random_kkt(rng, 10, 3)
    B[2] = B[0] + B[1]
    with pytest.raises(SolverError):
        solve_saddle(A, B, np.zeros(10), np.ones(3))


def test_eig_identity_and_diagonal():
    lam, V = dense_generalized_eig(np.eye(3), np.eye(3))
    assert np.allclose(lam, 1)
    assert np.allclose(V.T @ V, np.eye(3))
    lam, V = dense_generalized_eig(np.diag([2.0, 5.0]), np.eye(2))
    assert np.allclose(lam, [2, 5])
    assert np.allclose(np.abs(V), np.eye(2))


def _charpoly_roots(A, M):
    """Roots of det(A - t M) via interpolation of the degree-n polynomial."""
    n = len(A)
    ts = np.linspace(-1, 1, n + 1) * 3
    dets = [np.linalg.det(A - t * M) for t in ts]
    coef = np.polyfit(ts, dets, n)
    return np.sort(np.roots(coef).real)


@pytest.mark.parametrize("seed", range(5))
def test_eig_random_pair(seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((4, 4))
    A = 0.5 * (G + G.T)
    H = rng.standard_normal((4, 4))
    M = H @ H.T + 4 * np.eye(4)
    lam, V = dense_generalized_eig(A, M)
    assert np.all(np.diff(lam) >= 0)
    assert np.abs(A @ V - M @ V * lam).max() <= 1e-10 * np.abs(A).max() * 10
    assert np.abs(V.T @ M @ V - np.eye(4)).max() <= 1e-10
    assert np.allclose(lam, _charpoly_roots(A, M), atol=1e-8)


def test_eig_rejects_indefinite_mass():
    with pytest.raises(SolverError):
        dense_generalized_eig(np.eye(2), np.diag([1.0, -1.0]))


def test_extreme_trivial():
    n = 7
    M = sp.identity(n)
    assert extreme_generalized_eigenvalue(M, M)[0] == pytest.approx(1.0)
    assert extreme_generalized_eigenvalue(sp.diags(np.arange(1.0, n + 1)), M)[0] == pytest.approx(n)
    assert extreme_generalized_eigenvalue(sp.diags(np.arange(1.0, n + 1)), M, "min")[0] == pytest.approx(1.0)


def test_extreme_degenerate_pencil():
    # A = a^2 M M^-1 M / 0.7 up to roundoff: a fully degenerate cluster
    _, M = coarse_q1_matrices(6)
    M = M.toarray()
    A = (0.09 * M) @ np.linalg.solve(0.7 * M, 0.09 * M)
    A = 0.5 * (A + A.T)
    for which in ("max", "min"):
        lam, v = extreme_generalized_eigenvalue(A, M, which)
        assert lam == pytest.approx(0.09**2 / 0.7, rel=1e-10) and v.shape == (25,)


def test_extreme_coarse_pair_vs_dense():
    K, M = coarse_q1_matrices(10)  # 9 x 9 interior nodes
    lam_max = extreme_generalized_eigenvalue(K, M, "max")[0]
    lam_min = extreme_generalized_eigenvalue(K, M, "min")[0]
    ref = dense_generalized_eig(K.toarray(), M.toarray())[0]
    assert lam_max == pytest.approx(ref[-1], rel=1e-8)
    assert lam_min == pytest.approx(ref[0], rel=1e-8)


def test_extreme_sparse_path(monkeypatch):
    import mcsplit.linalg as la

    K, M = coarse_q1_matrices(12)
    dense = extreme_generalized_eigenvalue(K, M, "max")[0]
    dense_min = extreme_generalized_eigenvalue(K, M, "min")[0]
    monkeypatch.setattr(la, "DENSE_EIG_LIMIT", 10)
    assert la.extreme_generalized_eigenvalue(K, M, "max")[0] == pytest.approx(dense, rel=1e-6)
    assert la.extreme_generalized_eigenvalue(K, M, "min")[0] == pytest.approx(dense_min, rel=1e-6)
