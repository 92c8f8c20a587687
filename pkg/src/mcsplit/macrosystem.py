"""Coarse macroscopic system in split coordinates and its time steppers.

Unknowns are coarse Q1 nodal values (zero trace on the boundary) of the
mixed continua, stacked continuum-major: entries ``i * n_int : (i+1) * n_int``
belong to split index ``i``.  Split indices ``< i0`` form the slow,
explicitly treated component (called component 2); the rest form the fast,
implicit component 1.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import element_directional_stiffness, element_gradient_mass, element_mass, element_stiffness
from .exceptions import ConfigurationError, SolverError
from .geometry import MeshHierarchy
from .linalg import dense_generalized_eig, extreme_generalized_eigenvalue
from .split import BlockAggregate, SplitPlan, split_coordinates

logger = logging.getLogger(__name__)

SCHEMES = ("implicit", "explicit", "scheme1", "scheme2")
MASS_FORMS = ("constant", "full")
DIVERGENCE_FACTOR = 1e12


# ---------------------------------------------------------------------------
# coarse Q1 space


def coarse_nodes(coarse_n: int):
    """Corner node ids ``(n_blocks, 4)`` and interior numbering of the coarse grid.

    Returns ``(corners, interior)`` where ``interior[node]`` is the unknown
    index of a coarse node or ``-1`` on the boundary.
    """
    nn = coarse_n + 1
    by, bx = np.divmod(np.arange(coarse_n * coarse_n), coarse_n)
    base = by * nn + bx
    corners = np.stack([base, base + 1, base + nn, base + nn + 1], axis=1)
    iy, ix = np.divmod(np.arange(nn * nn), nn)
    inside = (ix > 0) & (ix < coarse_n) & (iy > 0) & (iy < coarse_n)
    interior = np.full(nn * nn, -1)
    interior[inside] = np.arange(inside.sum())
    return corners, interior


def _assemble_blocks(local, coarse_n, zero_trace=True):
    """Scatter ``local[b, i, a, j, c]`` (block, continuum, corner) into a sparse matrix."""
    nb, N, _, _, _ = local.shape
    corners, interior = coarse_nodes(coarse_n)
    if not zero_trace:
        interior = np.arange(len(interior))
    n = int(interior.max()) + 1
    dof = interior[corners]  # (nb, 4)
    ci = np.arange(N)
    rows = (ci[None, :, None] * n + dof[:, None, :])  # (nb, N, 4)
    R = np.broadcast_to(rows[:, :, :, None, None], local.shape)
    C = np.broadcast_to(rows[:, None, None, :, :], local.shape)
    keep = (np.broadcast_to(dof[:, None, :, None, None], local.shape) >= 0) & (
        np.broadcast_to(dof[:, None, None, None, :], local.shape) >= 0
    )
    # boundary rows carry dof -1; drop them before the continuum offset
    R = np.where(keep, R, 0)
    C = np.where(keep, C, 0)
    return sp.csr_matrix((local[keep], (R[keep], C[keep])), shape=(N * n, N * n))


def _assemble_load(fb, coarse_n, H):
    nb, N = fb.shape
    corners, interior = coarse_nodes(coarse_n)
    n = int(interior.max()) + 1
    out = np.zeros(N * n)
    dof = interior[corners]
    for i in range(N):
        vals = np.repeat(fb[:, i] * H * H / 4.0, 4)
        d = dof.ravel()
        np.add.at(out, i * n + d[d >= 0], vals[d >= 0])
    return out


@dataclass
class MacroSystem:
    """Assembled coarse matrices in split coordinates.

    ``M``, ``A``, ``C`` are the full ``N n_int`` square matrices; ``F`` the
    load.  :meth:`block` extracts the ``(I, J)`` component blocks.
    """

    coarse_n: int
    N: int
    i0: int
    M: sp.csr_matrix = dc_field(repr=False)
    A: sp.csr_matrix = dc_field(repr=False)
    C: sp.csr_matrix = dc_field(repr=False)
    F: np.ndarray = dc_field(repr=False)
    plan: SplitPlan | None = dc_field(default=None, repr=False)
    mass_form: str = "constant"

    @property
    def H(self) -> float:
        return 1.0 / self.coarse_n

    @property
    def n_int(self) -> int:
        return (self.coarse_n - 1) ** 2

    @property
    def size(self) -> int:
        return self.N * self.n_int

    def indices(self, component: int) -> np.ndarray:
        """Unknown indices of component 1 (fast, implicit) or 2 (slow, explicit)."""
        if component == 2:
            return np.arange(self.i0 * self.n_int)
        if component == 1:
            return np.arange(self.i0 * self.n_int, self.size)
        raise ValueError(f"component must be 1 or 2, got {component}")

    def block(self, name: str, I: int, J: int) -> sp.csr_matrix:
        mat = getattr(self, name)
        return mat[self.indices(I)][:, self.indices(J)].tocsr()

    def split_state(self, U):
        return U[self.indices(1)], U[self.indices(2)]

    def continuum_view(self, U) -> np.ndarray:
        """Reshape a stacked vector to ``(N, n_int)``."""
        return np.asarray(U).reshape(self.N, self.n_int)


def assemble_macro(mesh: MeshHierarchy, tensors, plan: SplitPlan, mass_form: str = "constant") -> MacroSystem:
    """Assemble the coarse system from per-block tensors transformed by ``plan``.

    ``tensors`` is a :class:`~mcsplit.upscale.TensorStack` (or anything with
    stacked ``A``, ``M``, ``C``, ``f``, ``Mc``, ``Mg`` arrays over blocks).
    With ``mass_form="constant"`` the time term uses ``M`` only; ``"full"``
    adds the products involving the linear basis.
    """
    if mass_form not in MASS_FORMS:
        raise ConfigurationError(f"mass_form must be one of {MASS_FORMS}, got {mass_form!r}")
    nb = tensors.M.shape[0]
    if nb != mesh.n_blocks:
        raise ConfigurationError(f"tensors cover {nb} blocks, mesh has {mesh.n_blocks}")
    H = mesh.H
    v = plan.v
    Mh, Ch, Ah = split_coordinates(plan, tensors.M, tensors.C, tensors.A)
    fh = tensors.f @ v.T

    S = element_directional_stiffness()
    Me = element_mass(H)
    local_A = np.einsum("bimjn,mnac->biajc", Ah, S)
    local_M = np.einsum("bij,ac->biajc", Mh, Me)
    local_C = np.einsum("bij,ac->biajc", Ch, Me)
    if mass_form == "full":
        G = element_gradient_mass(H)  # G[m, a, c] = int dN_a/dx_m N_c
        Mc = np.einsum("ik,bkln,jl->bijn", v, tensors.Mc, v)
        Mg = np.einsum("ik,bkmln,jl->bimjn", v, tensors.Mg, v)
        local_M = (
            local_M
            + np.einsum("bijn,nca->biajc", Mc, G)
            + np.einsum("bjim,mac->biajc", Mc, G)
            + np.einsum("bimjn,mnac->biajc", Mg, S)
        )
    cn = mesh.coarse_n
    sym = lambda X: ((X + X.T) * 0.5).tocsr()
    return MacroSystem(
        coarse_n=cn,
        N=plan.N,
        i0=plan.i0,
        M=sym(_assemble_blocks(local_M, cn)),
        A=sym(_assemble_blocks(local_A, cn)),
        C=sym(_assemble_blocks(local_C, cn)),
        F=_assemble_load(fh, cn, H),
        plan=plan,
        mass_form=mass_form,
    )


# ---------------------------------------------------------------------------
# stability constants


def _dense(X):
    return X.toarray() if sp.issparse(X) else np.asarray(X, dtype=float)


def estimate_gamma(sys: MacroSystem) -> float:
    """Cosine of the L2 angle between the two components, ``sqrt(max eig(M12 M22^-1 M21, M11))``."""
    if sys.i0 == 0 or sys.i0 == sys.N:
        return 0.0
    M11, M12, M22 = (_dense(sys.block("M", I, J)) for I, J in ((1, 1), (1, 2), (2, 2)))
    try:
        X = M12 @ sla.cho_solve(sla.cho_factor(M22), M12.T)
    except np.linalg.LinAlgError as err:
        raise SolverError("slow-component mass matrix is singular") from err
    lam, _ = extreme_generalized_eigenvalue(0.5 * (X + X.T), M11, "max")
    g = math.sqrt(max(lam, 0.0))
    return min(g, 1.0)


def coarse_q1_matrices(coarse_n: int, zero_trace: bool = True):
    """Unit-coefficient coarse stiffness and mass matrices (sparse)."""
    H = 1.0 / coarse_n
    nb = coarse_n * coarse_n
    K = np.broadcast_to(element_stiffness().reshape(1, 1, 4, 1, 4), (nb, 1, 4, 1, 4))
    M = np.broadcast_to(element_mass(H).reshape(1, 1, 4, 1, 4), (nb, 1, 4, 1, 4))
    return _assemble_blocks(np.ascontiguousarray(K), coarse_n, zero_trace), _assemble_blocks(
        np.ascontiguousarray(M), coarse_n, zero_trace
    )


def estimate_C1(coarse_n: int, zero_trace: bool = True) -> float:
    """Inverse-inequality constant ``C1 = H^2 sup |W|_{H1}^2 / |W|_{L2}^2`` on coarse Q1."""
    K, M = coarse_q1_matrices(coarse_n, zero_trace)
    lam, _ = extreme_generalized_eigenvalue(K + M, M, "max")
    return lam / coarse_n**2


def stability_ratio(sys: MacroSystem, component: int, include_c: bool = False) -> float:
    """``inf |W|_m^2 / (|W|_a^2 [+ |W|_c^2])`` over one component's coarse space."""
    idx = sys.indices(component)
    if idx.size == 0:
        return math.inf
    A = sys.block("A", component, component)
    if include_c:
        A = A + sys.block("C", component, component)
    lam, _ = extreme_generalized_eigenvalue(A, sys.block("M", component, component), "max")
    return 1.0 / lam if lam > 0 else math.inf


def tau_bounds(plan: SplitPlan, C1: float, H: float, agg: BlockAggregate | None = None):
    """Time-step bounds ``(tau_1, tau_2)`` of schemes 1 and 2 from the split rate."""
    if plan.i0 == 0:
        return math.inf, math.inf
    lam = plan.critical
    if not (np.isfinite(lam) and lam > 0):
        raise ConfigurationError(f"split plan has no usable critical rate ({lam}); build it with the block aggregate")
    tau1 = H * H / (C1 * lam)
    if agg is None:
        return tau1, tau1
    v2 = plan.v[: plan.i0]
    Ch = v2 @ agg.C @ v2.T
    Mh = v2 @ agg.M @ v2.T
    lam_c = dense_generalized_eig(H * H * 0.5 * (Ch + Ch.T), Mh)[0][-1]
    return tau1, H * H / (C1 * lam + max(lam_c, 0.0))


@dataclass
class StabilityReport:
    gamma: float
    C1: float
    ratio_1: float
    ratio_2: float
    ratio_1_c: float
    ratio_2_c: float
    tau_1: float
    tau_2: float
    i0: int

    @property
    def tau_energy_1(self) -> float:
        """Largest step allowed by the energy estimate of scheme 1."""
        return (1 - self.gamma**2) * self.ratio_2

    @property
    def tau_energy_2(self) -> float:
        return (1 - self.gamma**2) * self.ratio_2_c

    def to_dict(self) -> dict:
        d = {k: _finite(getattr(self, k)) for k in ("gamma", "C1", "ratio_1", "ratio_2", "ratio_1_c", "ratio_2_c", "tau_1", "tau_2")}
        d["i0"] = self.i0
        d["tau_energy_1"] = _finite(self.tau_energy_1)
        d["tau_energy_2"] = _finite(self.tau_energy_2)
        return d


def _finite(x):
    x = float(x)
    return x if math.isfinite(x) else None


def stability_report(sys: MacroSystem, mesh: MeshHierarchy, agg: BlockAggregate | None = None) -> StabilityReport:
    C1 = estimate_C1(mesh.coarse_n)
    tau1, tau2 = tau_bounds(sys.plan, C1, mesh.H, agg)
    return StabilityReport(
        gamma=estimate_gamma(sys),
        C1=C1,
        ratio_1=stability_ratio(sys, 1),
        ratio_2=stability_ratio(sys, 2),
        ratio_1_c=stability_ratio(sys, 1, True),
        ratio_2_c=stability_ratio(sys, 2, True),
        tau_1=tau1,
        tau_2=tau2,
        i0=sys.i0,
    )


# ---------------------------------------------------------------------------
# time stepping


@dataclass
class MacroState:
    n: int
    t: float
    U: np.ndarray
    U_prev: np.ndarray


class Stepper:
    """One-step map of a scheme at fixed ``tau``; factorizations are built once."""

    def __init__(self, sys: MacroSystem, scheme: str, tau: float):
        if scheme not in SCHEMES:
            raise ConfigurationError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
        if not tau > 0:
            raise ConfigurationError(f"tau must be positive, got {tau}")
        self.sys, self.scheme, self.tau = sys, scheme, tau
        M, A, C = sys.M.tocsc(), sys.A.tocsc(), sys.C.tocsc()
        self.i1, self.i2 = sys.indices(1), sys.indices(2)
        if scheme in ("scheme1", "scheme2") and self.i2.size == 0:
            scheme = "implicit"  # nothing explicit: both schemes are backward Euler
        self._mode = scheme
        try:
            if scheme == "implicit":
                self._lu = spla.splu((M / tau + A + C).tocsc())
            elif scheme == "explicit":
                self._lu = spla.splu(M)
            else:
                b = lambda X, I, J: X[I][:, J]
                i1, i2 = self.i1, self.i2
                self.M11, self.M12 = b(M, i1, i1), b(M, i1, i2)
                self.M21, self.M22 = b(M, i2, i1), b(M, i2, i2)
                self.A12, self.A21, self.A22 = b(A, i1, i2), b(A, i2, i1), b(A, i2, i2)
                self.C12, self.C21, self.C22 = b(C, i1, i2), b(C, i2, i1), b(C, i2, i2)
                K11 = self.M11 / tau + b(A, i1, i1) + b(C, i1, i1)
                if scheme == "scheme1":
                    lhs = sp.bmat(
                        [[K11, self.C12], [self.A21 + self.C21, self.M22 / tau + self.C22]], format="csc"
                    ) if i1.size else (self.M22 / tau + self.C22).tocsc()
                    self._lu = spla.splu(lhs)
                else:
                    self._lu11 = spla.splu(K11.tocsc()) if i1.size else None
                    self._lu22 = spla.splu(self.M22.tocsc())
        except RuntimeError as err:
            raise SolverError(f"{scheme} step matrix is singular: {err}") from err

    def __call__(self, U, U_prev, F=None):
        sys, tau = self.sys, self.tau
        F = sys.F if F is None else F
        if self._mode == "implicit":
            return self._lu.solve(F + sys.M @ U / tau)
        if self._mode == "explicit":
            return U + tau * self._lu.solve(F - sys.A @ U - sys.C @ U)
        i1, i2 = self.i1, self.i2
        U1, U2 = U[i1], U[i2]
        d1, d2 = U1 - U_prev[i1], U2 - U_prev[i2]
        F1, F2 = F[i1], F[i2]
        r1 = F1 + self.M11 @ U1 / tau - self.M12 @ d2 / tau - self.A12 @ U2
        r2 = F2 + self.M22 @ U2 / tau - self.M21 @ d1 / tau - self.A22 @ U2
        out = np.empty_like(U)
        if self._mode == "scheme1":
            if i1.size:
                x = self._lu.solve(np.concatenate([r1, r2]))
                out[i1], out[i2] = x[: i1.size], x[i1.size :]
            else:
                out[i2] = self._lu.solve(r2)
            return out
        r1 = r1 - self.C12 @ U2
        r2 = r2 - self.C22 @ U2
        if i1.size:
            out[i1] = self._lu11.solve(r1)
            r2 = r2 - (self.A21 + self.C21) @ out[i1]
        out[i2] = self._lu22.solve(r2) * tau
        return out


def step(sys: MacroSystem, state: MacroState, scheme: str, tau: float, F=None) -> MacroState:
    """Advance ``state`` by one step (builds a fresh :class:`Stepper`)."""
    U = Stepper(sys, scheme, tau)(state.U, state.U_prev, F)
    return MacroState(state.n + 1, state.t + tau, U, state.U)


def energy_functional(sys: MacroSystem, U, U_prev, gamma: float, tau: float) -> float:
    """``(gamma^2/tau) sum_i |dU_i|^2_{m_ii} + |U|_a^2 + |U|_c^2``."""
    d = U - U_prev
    kin = 0.0
    for comp in (1, 2):
        idx = sys.indices(comp)
        if idx.size:
            kin += d[idx] @ (sys.block("M", comp, comp) @ d[idx])
    return float(gamma**2 / tau * kin + U @ (sys.A @ U) + U @ (sys.C @ U))


@dataclass
class Trajectory:
    """Stored states of a run (split coordinates) at ``times``."""

    scheme: str
    tau: float
    times: np.ndarray
    states: np.ndarray
    steps: int
    diverged: bool = False
    monitor: np.ndarray | None = None
    final: np.ndarray | None = dc_field(default=None, repr=False)
    rate: np.ndarray | None = None  # |U^{n+1} - U^n| / tau per step

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "tau": self.tau,
            "steps": self.steps,
            "diverged": self.diverged,
            "times": [float(t) for t in self.times],
        }


def n_steps(T: float, tau: float) -> int:
    return max(1, int(math.ceil(T / tau - 1e-9)))


def run_transient(
    sys: MacroSystem,
    scheme: str,
    tau: float,
    T: float,
    U0=None,
    monitor: bool = False,
    gamma: float | None = None,
    snapshot_every: int | None = None,
    F=None,
) -> Trajectory:
    """Time-step from ``U0`` (zero by default) to ``T`` with ``U^{-1} = U^0``.

    States are stored every ``snapshot_every`` steps (default: only the final
    one) plus the initial state.  With ``monitor`` the energy functional is
    recorded at every step (meaningful when the load is zero).  Runs whose
    norm exceeds ``1e12`` times the reference norm, or become non-finite,
    stop early with ``diverged=True``.
    """
    if T < tau * (1 - 1e-9):
        raise ConfigurationError(f"final time {T} shorter than one step {tau}")
    stepper = Stepper(sys, scheme, tau)
    if monitor and gamma is None:
        gamma = estimate_gamma(sys)
    U = np.zeros(sys.size) if U0 is None else np.array(U0, dtype=float)
    U_prev = U.copy()
    nsteps = n_steps(T, tau)
    times, states = [0.0], [U.copy()]
    mon = [energy_functional(sys, U, U_prev, gamma, tau)] if monitor else None
    rate = np.empty(nsteps)
    ref = np.linalg.norm(U)
    diverged = False
    done = 0
    for n in range(1, nsteps + 1):
        U_new = stepper(U, U_prev, F)
        nrm = np.linalg.norm(U_new)
        if n == 1 and ref == 0.0:
            ref = nrm
        rate[n - 1] = np.linalg.norm(U_new - U) / tau
        U_prev, U = U, U_new
        done = n
        if monitor:
            mon.append(energy_functional(sys, U, U_prev, gamma, tau))
        if not np.isfinite(nrm) or nrm > DIVERGENCE_FACTOR * max(ref, np.finfo(float).tiny):
            diverged = True
            logger.warning("%s diverged at step %d (|U| = %.3e)", scheme, n, nrm)
            break
        if (snapshot_every and n % snapshot_every == 0) or n == nsteps:
            times.append(n * tau)
            states.append(U.copy())
    return Trajectory(
        scheme=scheme,
        tau=tau,
        times=np.array(times),
        states=np.array(states),
        steps=done,
        diverged=diverged,
        monitor=None if mon is None else np.array(mon),
        final=U,
        rate=rate[:done],
    )


def steady_state(sys: MacroSystem, F=None) -> np.ndarray:
    """Solve ``(A + C) U = F``."""
    F = sys.F if F is None else F
    return spla.spsolve((sys.A + sys.C).tocsc(), F)
