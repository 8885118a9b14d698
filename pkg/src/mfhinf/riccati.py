"""Model-based synthesis: coupled differential Riccati equations.

The disturbance-attenuation controller for the mean-field jump-diffusion
plant is characterized by four cross-coupled matrix Riccati equations,
integrated backward from zero terminal conditions:

* ``P1`` / ``Q1`` value the worst-case disturbance problem in the deviation
  channel (x - E[x]) and the mean channel (E[x]); they are negative
  semidefinite while the problem is solvable.
* ``P2`` / ``Q2`` value the control problem under the worst-case disturbance
  and are positive semidefinite.

Each equation carries algebraic weighting matrices (the four "sigma" blocks)
that must stay positive definite along the sweep; losing definiteness at any
grid point means the attenuation level ``gamma`` is not achievable, which the
solvers report as data rather than raising.

The module also houses the disturbance-only bounded-real-lemma equations, a
generic linear Lyapunov matrix ODE solver, a Picard (successive linearization)
alternative used as an independent oracle, bisection on the feasibility
threshold in gamma, and the zero-sum (no-jump) Riccati pair used by the
reinforcement-learning module as its model-based reference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._numutil import symmetrize, min_eig, fmt17
from .model import (
    DisturbanceOnlyModel,
    GainSchedule,
    MeanFieldJumpModel,
    jump_integral,
)

__all__ = [
    "SigmaNotPositive",
    "PositivityViolation",
    "NoConvergence",
    "BadBracket",
    "InfeasibleTrajectory",
    "RiccatiState",
    "SigmaBundle",
    "RiccatiTrajectory",
    "BrlSolution",
    "PicardResult",
    "GammaSearchResult",
    "HinfDreSolution",
    "PD_TOL",
    "gains_from",
    "gdre_rhs",
    "solve_gdre",
    "solve_brl",
    "lyapunov_solve",
    "picard_solve",
    "gamma_threshold",
    "value_at",
    "solve_hinf_dre",
    "export_trajectory_csv",
]

# positive-definiteness threshold for the sigma blocks
PD_TOL = 1e-10

MARGIN_NAMES = ("sigma0", "sigma2", "sigma0u", "sigma2u")


class SigmaNotPositive(Exception):
    """A sigma weighting matrix lost positive definiteness."""

    def __init__(self, name: str, mineig: float, t: float | None = None):
        self.name = name
        self.min_eig = mineig
        self.t = t
        at = "" if t is None else f" at t={t:g}"
        super().__init__(f"{name} is not positive definite{at} (min eigenvalue {mineig:.3e})")


class PositivityViolation(Exception):
    """A solution that must be nonnegative definite dipped below tolerance."""


class NoConvergence(Exception):
    def __init__(self, n_iter: int, last=None, prev=None):
        self.n_iter = n_iter
        self.last = last
        self.prev = prev
        super().__init__(f"no convergence after {n_iter} iterations")


class BadBracket(Exception):
    """Bisection preconditions violated."""


class InfeasibleTrajectory(Exception):
    """Operation requires a feasible Riccati trajectory."""


@dataclass(frozen=True)
class RiccatiState:
    """The four symmetric matrices of the coupled system at one instant."""

    P1: np.ndarray
    Q1: np.ndarray
    P2: np.ndarray
    Q2: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.P1, self.Q1, self.P2, self.Q2])

    @staticmethod
    def from_stack(s: np.ndarray) -> "RiccatiState":
        return RiccatiState(s[0], s[1], s[2], s[3])

    @staticmethod
    def zero(n: int) -> "RiccatiState":
        z = np.zeros((n, n))
        return RiccatiState(z, z.copy(), z.copy(), z.copy())


@dataclass(frozen=True)
class SigmaBundle:
    """The four algebraic weighting matrices and their smallest eigenvalues.

    sigma0 / sigma2 weight the disturbance deviation / mean channels (built
    from P1); sigma0u / sigma2u weight the control channels (built from P2).
    """

    sigma0: np.ndarray
    sigma2: np.ndarray
    sigma0u: np.ndarray
    sigma2u: np.ndarray

    @property
    def min_eigs(self) -> np.ndarray:
        return np.array([min_eig(self.sigma0), min_eig(self.sigma2),
                         min_eig(self.sigma0u), min_eig(self.sigma2u)])


@dataclass(frozen=True)
class Gains:
    """One time slice of the four feedback gains."""

    K1: np.ndarray
    K1_total: np.ndarray
    K2: np.ndarray
    K2_total: np.ndarray


@dataclass
class RiccatiTrajectory:
    grid: np.ndarray
    P1: np.ndarray
    Q1: np.ndarray
    P2: np.ndarray
    Q2: np.ndarray
    gains: GainSchedule
    sigma_margins: np.ndarray  # (N+1, 4), columns per MARGIN_NAMES
    feasible: bool
    failure: tuple[float, str, float] | None
    gamma: float
    mode: str
    elapsed: float = 0.0

    def state_at(self, i: int) -> RiccatiState:
        return RiccatiState(self.P1[i], self.Q1[i], self.P2[i], self.Q2[i])


@dataclass
class BrlSolution:
    grid: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    sigma_margins: np.ndarray  # (N+1, 2): sigma0, sigma2
    feasible: bool
    failure: tuple[float, str, float] | None
    gamma: float


@dataclass
class PicardResult:
    grid: np.ndarray
    P: np.ndarray
    iterates: list
    n_iter: int
    converged: bool


@dataclass
class GammaSearchResult:
    gamma_star: float
    lo: float
    hi: float
    probes: list  # [(gamma, feasible)]


@dataclass
class HinfDreSolution:
    grid: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    L: np.ndarray
    F: np.ndarray
    Lt: np.ndarray
    Ft: np.ndarray
    gamma: float


class _CombinedAtom:
    """Atom with mean-field coefficients folded in (E+Ebar etc.)."""

    __slots__ = ("weight", "E", "F1", "F2")

    def __init__(self, weight, E, F1, F2):
        self.weight = weight
        self.E = E
        self.F1 = F1
        self.F2 = F2


def _sum_atoms(model: MeanFieldJumpModel) -> tuple[_CombinedAtom, ...]:
    return tuple(
        _CombinedAtom(a.weight, a.E + a.Ebar, a.F1 + a.F1bar, a.F2 + a.F2bar)
        for a in model.jump_atoms
    )


def _sigma_bundle(model: MeanFieldJumpModel, gamma: float, s: RiccatiState,
                  sum_atoms=None) -> SigmaBundle:
    d = model.dims
    atoms = model.jump_atoms
    satoms = _sum_atoms(model) if sum_atoms is None else sum_atoms
    Iv = np.eye(d.nv)
    Iu = np.eye(d.nu)
    D1s = model.D1 + model.D1bar
    D2s = model.D2 + model.D2bar
    sigma0 = gamma**2 * Iv + model.D1.T @ s.P1 @ model.D1 \
        + jump_integral(atoms, s.P1, "F1", "F1", (d.nv, d.nv))
    sigma2 = gamma**2 * Iv + D1s.T @ s.P1 @ D1s \
        + jump_integral(satoms, s.P1, "F1", "F1", (d.nv, d.nv))
    sigma0u = Iu + model.D2.T @ s.P2 @ model.D2 \
        + jump_integral(atoms, s.P2, "F2", "F2", (d.nu, d.nu))
    sigma2u = Iu + D2s.T @ s.P2 @ D2s \
        + jump_integral(satoms, s.P2, "F2", "F2", (d.nu, d.nu))
    return SigmaBundle(symmetrize(sigma0), symmetrize(sigma2),
                       symmetrize(sigma0u), symmetrize(sigma2u))


def gains_from(model: MeanFieldJumpModel, gamma: float,
               s: RiccatiState) -> tuple[Gains, SigmaBundle]:
    """Feedback gains at one instant from the current Riccati matrices.

    The deviation-channel gains satisfy the pair of identities
    ``K1 = -sigma0^{-1} G1'`` and ``K2 = -sigma0u^{-1} G2'`` in which G1
    depends on K2 and G2 on K1; both identities are enforced simultaneously
    by eliminating the affine cross terms in one stacked linear solve.  The
    mean-channel totals are obtained the same way from (Q1, Q2).

    Raises SigmaNotPositive when any weighting matrix has smallest eigenvalue
    at or below the definiteness threshold.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    d = model.dims
    atoms = model.jump_atoms
    satoms = _sum_atoms(model)
    bundle = _sigma_bundle(model, gamma, s, satoms)
    for name, mat in zip(MARGIN_NAMES, (bundle.sigma0, bundle.sigma2,
                                        bundle.sigma0u, bundle.sigma2u)):
        me = min_eig(mat)
        if me <= PD_TOL:
            raise SigmaNotPositive(name, me)

    # deviation channel: affine system in (K2, K1)
    a1 = model.B1.T @ s.P1 + model.D1.T @ s.P1 @ model.C \
        + jump_integral(atoms, s.P1, "F1", "E", (d.nv, d.n))
    W1 = model.D1.T @ s.P1 @ model.D2 \
        + jump_integral(atoms, s.P1, "F1", "F2", (d.nv, d.nu))
    a2 = model.B2.T @ s.P2 + model.D2.T @ s.P2 @ model.C \
        + jump_integral(atoms, s.P2, "F2", "E", (d.nu, d.n))
    W2 = model.D2.T @ s.P2 @ model.D1 \
        + jump_integral(atoms, s.P2, "F2", "F1", (d.nu, d.nv))
    K2, K1 = _coupled_gain_solve(bundle.sigma0u, W2, a2, bundle.sigma0, W1, a1,
                                 "sigma0u")

    # mean channel: same structure with summed coefficients and (Q1, Q2)
    Cs = model.C + model.Cbar
    D1s = model.D1 + model.D1bar
    D2s = model.D2 + model.D2bar
    a1m = (model.B1 + model.B1bar).T @ s.Q1 + D1s.T @ s.P1 @ Cs \
        + jump_integral(satoms, s.P1, "F1", "E", (d.nv, d.n))
    W1m = D1s.T @ s.P1 @ D2s + jump_integral(satoms, s.P1, "F1", "F2", (d.nv, d.nu))
    a2m = (model.B2 + model.B2bar).T @ s.Q2 + D2s.T @ s.P2 @ Cs \
        + jump_integral(satoms, s.P2, "F2", "E", (d.nu, d.n))
    W2m = D2s.T @ s.P2 @ D1s + jump_integral(satoms, s.P2, "F2", "F1", (d.nu, d.nv))
    K2t, K1t = _coupled_gain_solve(bundle.sigma2u, W2m, a2m, bundle.sigma2, W1m,
                                   a1m, "sigma2u")

    return Gains(K1=K1, K1_total=K1t, K2=K2, K2_total=K2t), bundle


def _coupled_gain_solve(Su, W2, a2, Sv, W1, a1, uname):
    """Solve Su K2 + W2 K1 = -a2, W1 K2 + Sv K1 = -a1 for (K2, K1)."""
    nu = Su.shape[0]
    nv = Sv.shape[0]
    lhs = np.block([[Su, W2], [W1, Sv]])
    rhs = -np.vstack([a2, a1])
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise SigmaNotPositive(uname, float("nan")) from exc
    return sol[:nu], sol[nu:nu + nv]


def _gdre_rhs_given(model: MeanFieldJumpModel, gamma: float, s: RiccatiState,
                    gains: Gains) -> RiccatiState:
    """Time derivatives of (P1, Q1, P2, Q2) for fixed feedback gains.

    The quadratic correction terms G Sigma^{-1} G' are evaluated at the
    current matrices; only the gains inside the closed-loop coefficients are
    held fixed, which is what the per-step recursion of the backward sweep
    freezes.
    """
    d = model.dims
    atoms = model.jump_atoms
    satoms = _sum_atoms(model)
    bundle = _sigma_bundle(model, gamma, s, satoms)
    M2 = model.M.T @ model.M
    K1, K1t, K2, K2t = gains.K1, gains.K1_total, gains.K2, gains.K2_total
    Kt2 = K2t - K2

    def lyap(P, Acl, Ccl, cl_atoms):
        jump = (sum(a.weight * (Ea.T @ P @ Ea) for a, Ea in cl_atoms)
                if cl_atoms else np.zeros((d.n, d.n)))
        return P @ Acl + Acl.T @ P + Ccl.T @ P @ Ccl + jump

    def quad(G, Sigma):
        return G @ np.linalg.solve(Sigma, G.T)

    # deviation disturbance equation: control loop closed with K2
    A2 = model.A + model.B2 @ K2
    C2 = model.C + model.D2 @ K2
    e2 = [(a, a.E + a.F2 @ K2) for a in atoms]
    G1 = s.P1 @ model.B1 + C2.T @ s.P1 @ model.D1 \
        + sum((a.weight * (Ea.T @ s.P1 @ a.F1) for a, Ea in e2),
              np.zeros((d.n, d.nv)))
    dP1 = -lyap(s.P1, A2, C2, e2) + M2 + K2.T @ K2 + quad(G1, bundle.sigma0)

    # mean disturbance equation: closed with the control total K2t
    As = model.A + model.Abar
    Cs = model.C + model.Cbar
    A2m = As + (model.B2 + model.B2bar) @ K2t
    C2m = Cs + (model.D2 + model.D2bar) @ K2t
    e2m = [(a, a.E + a.F2 @ K2t) for a in satoms]
    G1m = s.Q1 @ (model.B1 + model.B1bar) + C2m.T @ s.P1 @ (model.D1 + model.D1bar) \
        + sum((a.weight * (Ea.T @ s.P1 @ a.F1) for a, Ea in e2m),
              np.zeros((d.n, d.nv)))
    dQ1 = (-(s.Q1 @ A2m + A2m.T @ s.Q1 + C2m.T @ s.P1 @ C2m
             + sum((a.weight * (Ea.T @ s.P1 @ Ea) for a, Ea in e2m),
                   np.zeros((d.n, d.n))))
           + M2 + K2.T @ K2 + Kt2.T @ Kt2 + quad(G1m, bundle.sigma2))

    # deviation control equation: disturbance loop closed with K1
    A1 = model.A + model.B1 @ K1
    C1 = model.C + model.D1 @ K1
    e1 = [(a, a.E + a.F1 @ K1) for a in atoms]
    G2 = s.P2 @ model.B2 + C1.T @ s.P2 @ model.D2 \
        + sum((a.weight * (Ea.T @ s.P2 @ a.F2) for a, Ea in e1),
              np.zeros((d.n, d.nu)))
    dP2 = -lyap(s.P2, A1, C1, e1) - M2 + quad(G2, bundle.sigma0u)

    # mean control equation: closed with the disturbance total K1t
    A1m = As + (model.B1 + model.B1bar) @ K1t
    C1m = Cs + (model.D1 + model.D1bar) @ K1t
    e1m = [(a, a.E + a.F1 @ K1t) for a in satoms]
    G2m = s.Q2 @ (model.B2 + model.B2bar) + C1m.T @ s.P2 @ (model.D2 + model.D2bar) \
        + sum((a.weight * (Ea.T @ s.P2 @ a.F2) for a, Ea in e1m),
              np.zeros((d.n, d.nu)))
    dQ2 = (-(s.Q2 @ A1m + A1m.T @ s.Q2 + C1m.T @ s.P2 @ C1m
             + sum((a.weight * (Ea.T @ s.P2 @ Ea) for a, Ea in e1m),
                   np.zeros((d.n, d.n))))
           - M2 + quad(G2m, bundle.sigma2u))

    return RiccatiState(symmetrize(dP1), symmetrize(dQ1),
                        symmetrize(dP2), symmetrize(dQ2))


def gdre_rhs(model: MeanFieldJumpModel, gamma: float,
             s: RiccatiState) -> RiccatiState:
    """Derivatives of the four coupled equations at state ``s``.

    Gains are recomputed from ``s``; SigmaNotPositive propagates when the
    weighting matrices are not definite.
    """
    gains, _ = gains_from(model, gamma, s)
    return _gdre_rhs_given(model, gamma, s, gains)


def _grid_for(T: float, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    steps = round(T / dt)
    if steps < 1 or abs(steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"dt={dt} does not divide the horizon T={T}")
    return np.linspace(0.0, T, steps + 1)


def solve_gdre(model: MeanFieldJumpModel, gamma: float, dt: float,
               mode: str = "frozen") -> RiccatiTrajectory:
    """Backward sweep of the four coupled Riccati equations on a uniform grid.

    mode "frozen" computes the gains once per step from the step's starting
    matrices and holds them through the RK4 stages (the recursion the
    backward difference scheme uses); mode "stage" recomputes the gains at
    every RK4 stage.  Infeasibility (a sigma block losing definiteness at a
    grid point) is recorded in the returned trajectory, never raised.
    """
    if mode not in ("frozen", "stage"):
        raise ValueError("mode must be 'frozen' or 'stage'")
    t0 = time.perf_counter()
    grid = _grid_for(model.T, dt)
    N = len(grid) - 1
    n = model.dims.n
    nu, nv = model.dims.nu, model.dims.nv

    P1 = np.full((N + 1, n, n), np.nan)
    Q1 = np.full_like(P1, np.nan)
    P2 = np.full_like(P1, np.nan)
    Q2 = np.full_like(P1, np.nan)
    K1 = np.full((N + 1, nv, n), np.nan)
    K1t = np.full_like(K1, np.nan)
    K2 = np.full((N + 1, nu, n), np.nan)
    K2t = np.full_like(K2, np.nan)
    margins = np.full((N + 1, 4), np.nan)

    state = RiccatiState.zero(n)
    feasible = True
    failure = None
    h = -dt

    for i in range(N, -1, -1):
        P1[i], Q1[i], P2[i], Q2[i] = state.P1, state.Q1, state.P2, state.Q2
        bundle = _sigma_bundle(model, gamma, state)
        margins[i] = bundle.min_eigs
        try:
            gains, _ = gains_from(model, gamma, state)
        except SigmaNotPositive as exc:
            feasible = False
            failure = (float(grid[i]), exc.name, exc.min_eig)
            break
        K1[i], K1t[i], K2[i], K2t[i] = (gains.K1, gains.K1_total,
                                        gains.K2, gains.K2_total)
        if i == 0:
            break
        try:
            if mode == "frozen":
                rhs = lambda s: _gdre_rhs_given(model, gamma, s, gains)
            else:
                rhs = lambda s: gdre_rhs(model, gamma, s)
            state = _rk4_state(rhs, state, h)
        except SigmaNotPositive as exc:
            feasible = False
            failure = (float(grid[i]), exc.name, exc.min_eig)
            break

    sched = GainSchedule(grid=grid, K1=K1, K1_total=K1t, K2=K2, K2_total=K2t)
    return RiccatiTrajectory(
        grid=grid, P1=P1, Q1=Q1, P2=P2, Q2=Q2, gains=sched,
        sigma_margins=margins, feasible=feasible, failure=failure,
        gamma=gamma, mode=mode, elapsed=time.perf_counter() - t0)


def _rk4_state(rhs, state: RiccatiState, h: float) -> RiccatiState:
    s0 = state.stack()
    k1 = rhs(state).stack()
    k2 = rhs(RiccatiState.from_stack(s0 + 0.5 * h * k1)).stack()
    k3 = rhs(RiccatiState.from_stack(s0 + 0.5 * h * k2)).stack()
    k4 = rhs(RiccatiState.from_stack(s0 + h * k3)).stack()
    out = s0 + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return RiccatiState.from_stack(symmetrize(out))


class _BrlAtomView:
    __slots__ = ("weight", "E", "F")

    def __init__(self, weight, E, F):
        self.weight = weight
        self.E = E
        self.F = F


def _brl_pieces(dm: DisturbanceOnlyModel, gamma: float, P: np.ndarray, Q: np.ndarray):
    n, nv = dm.n, dm.nv
    atoms = [_BrlAtomView(a.weight, a.E, a.F) for a in dm.jump_atoms]
    satoms = [_BrlAtomView(a.weight, a.E + a.Ebar, a.F + a.Fbar) for a in dm.jump_atoms]
    Iv = np.eye(nv)
    Ds = dm.D + dm.Dbar
    s0 = gamma**2 * Iv + dm.D.T @ P @ dm.D + jump_integral(atoms, P, "F", "F", (nv, nv))
    s2 = gamma**2 * Iv + Ds.T @ P @ Ds + jump_integral(satoms, P, "F", "F", (nv, nv))
    G = P @ dm.B + dm.C.T @ P @ dm.D + jump_integral(atoms, P, "E", "F", (n, nv))
    Cs = dm.C + dm.Cbar
    Gm = Q @ (dm.B + dm.Bbar) + Cs.T @ P @ Ds + jump_integral(satoms, P, "E", "F", (n, nv))
    return symmetrize(s0), symmetrize(s2), G, Gm, atoms, satoms


def solve_brl(dmodel: DisturbanceOnlyModel, gamma: float, dt: float) -> BrlSolution:
    """Backward integration of the bounded-real-lemma Riccati pair.

    The deviation equation in P is self-contained; the mean equation in Q
    consumes P.  Both are swept jointly so the RK4 stages stay consistent.
    Feasibility is reported, not raised.
    """
    grid = _grid_for(dmodel.T, dt)
    N = len(grid) - 1
    n = dmodel.n
    M2 = dmodel.M.T @ dmodel.M
    As = dmodel.A + dmodel.Abar
    Cs = dmodel.C + dmodel.Cbar

    def rhs(P, Q):
        s0, s2, G, Gm, atoms, satoms = _brl_pieces(dmodel, gamma, P, Q)
        for name, mat in (("sigma0", s0), ("sigma2", s2)):
            me = min_eig(mat)
            if me <= PD_TOL:
                raise SigmaNotPositive(name, me)
        jump = jump_integral(atoms, P, "E", "E", (n, n))
        jumps = jump_integral(satoms, P, "E", "E", (n, n))
        dP = -(P @ dmodel.A + dmodel.A.T @ P + dmodel.C.T @ P @ dmodel.C + jump) \
            + M2 + G @ np.linalg.solve(s0, G.T)
        dQ = -(Q @ As + As.T @ Q + Cs.T @ P @ Cs + jumps) \
            + M2 + Gm @ np.linalg.solve(s2, Gm.T)
        return symmetrize(dP), symmetrize(dQ)

    P = np.full((N + 1, n, n), np.nan)
    Q = np.full_like(P, np.nan)
    margins = np.full((N + 1, 2), np.nan)
    p = np.zeros((n, n))
    q = np.zeros((n, n))
    feasible = True
    failure = None
    h = -dt
    for i in range(N, -1, -1):
        P[i], Q[i] = p, q
        s0, s2, *_ = _brl_pieces(dmodel, gamma, p, q)
        margins[i] = (min_eig(s0), min_eig(s2))
        if margins[i].min() <= PD_TOL:
            feasible = False
            which = "sigma0" if margins[i, 0] <= PD_TOL else "sigma2"
            failure = (float(grid[i]), which, float(margins[i].min()))
            break
        if i == 0:
            break
        try:
            k1 = rhs(p, q)
            k2 = rhs(p + 0.5 * h * k1[0], q + 0.5 * h * k1[1])
            k3 = rhs(p + 0.5 * h * k2[0], q + 0.5 * h * k2[1])
            k4 = rhs(p + h * k3[0], q + h * k3[1])
        except SigmaNotPositive as exc:
            feasible = False
            failure = (float(grid[i]), exc.name, exc.min_eig)
            break
        p = symmetrize(p + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]))
        q = symmetrize(q + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))
    return BrlSolution(grid=grid, P=P, Q=Q, sigma_margins=margins,
                       feasible=feasible, failure=failure, gamma=gamma)


def _as_fn(x) -> Callable[[float], np.ndarray]:
    if callable(x):
        return x
    arr = np.asarray(x, dtype=float)
    return lambda t: arr


def lyapunov_solve(A, C, atoms, source, terminal, T: float, dt: float,
                   enforce_nonneg: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Backward linear Lyapunov matrix ODE.

        dP/dt = -(P A + A' P + C' P C + sum_a w_a E_a' P E_a + source(t)),
        P(T) = terminal.

    ``A``, ``C`` and ``source`` may be constant matrices or callables of t;
    ``atoms`` is a list of (weight, E) pairs or a callable of t returning one.
    When the source and terminal value are nonnegative definite, the solution
    is too; that conclusion is enforced as a post-check (tolerance 1e-9)
    unless ``enforce_nonneg`` is False.  Pass None to auto-detect the premise
    for constant inputs.
    """
    terminal = symmetrize(np.atleast_2d(np.asarray(terminal, dtype=float)))
    n = terminal.shape[0]
    A_fn, C_fn, Q_fn = _as_fn(A), _as_fn(C), _as_fn(source)
    atoms_fn = atoms if callable(atoms) else (lambda t, _a=list(atoms or []): _a)

    if enforce_nonneg is None:
        enforce_nonneg = (not callable(source)
                          and min_eig(np.atleast_2d(np.asarray(source, dtype=float))) >= -1e-12
                          and min_eig(terminal) >= -1e-12)

    grid = _grid_for(T, dt)
    N = len(grid) - 1
    out = np.empty((N + 1, n, n))
    out[N] = terminal

    def rhs(t, P):
        At = np.atleast_2d(A_fn(t))
        Ct = np.atleast_2d(C_fn(t))
        acc = P @ At + At.T @ P + Ct.T @ P @ Ct + np.atleast_2d(Q_fn(t))
        for w, E in atoms_fn(t):
            E = np.atleast_2d(E)
            acc = acc + w * (E.T @ P @ E)
        return -symmetrize(acc)

    h = -dt
    P = terminal
    for i in range(N, 0, -1):
        t = grid[i]
        k1 = rhs(t, P)
        k2 = rhs(t + 0.5 * h, P + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, P + 0.5 * h * k2)
        k4 = rhs(t + h, P + h * k3)
        P = symmetrize(P + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4))
        out[i - 1] = P

    if enforce_nonneg:
        worst = min(min_eig(out[i]) for i in range(N + 1))
        if worst < -1e-9:
            raise PositivityViolation(
                f"solution dipped to min eigenvalue {worst:.3e}; step size too coarse")
    return grid, out


def _interp_rows(grid: np.ndarray, arr: np.ndarray, t: float) -> np.ndarray:
    """Linear interpolation of a grid-indexed matrix array at time t."""
    t = min(max(t, grid[0]), grid[-1])
    j = min(int(np.searchsorted(grid, t, side="right")) - 1, len(grid) - 2)
    w = (t - grid[j]) / (grid[j + 1] - grid[j])
    return (1.0 - w) * arr[j] + w * arr[j + 1]


def picard_solve(dmodel: DisturbanceOnlyModel, gamma: float, dt: float,
                 tol: float = 1e-10, max_iter: int = 60) -> PicardResult:
    """Successive linearization of the bounded-real-lemma deviation equation.

    Starting from the zero matrix, each iterate freezes the feedback map
    phi = -sigma0(P)^{-1} G(P)' and solves the resulting linear Lyapunov
    equation with source -M'M + gamma^2 phi' phi.  On feasible systems the
    iterates decrease monotonically (in the semidefinite order) to the
    bounded-real-lemma solution; this provides an oracle independent of the
    direct Riccati sweep.
    """
    grid = _grid_for(dmodel.T, dt)
    N = len(grid) - 1
    n, nv = dmodel.n, dmodel.nv
    atoms = [(a.weight, a.E, a.F) for a in dmodel.jump_atoms]
    M2 = dmodel.M.T @ dmodel.M

    P_prev = np.zeros((N + 1, n, n))
    history: list[np.ndarray] = []
    for it in range(1, max_iter + 1):
        phi = np.empty((N + 1, nv, n))
        for i in range(N + 1):
            p = P_prev[i]
            s0 = gamma**2 * np.eye(nv) + dmodel.D.T @ p @ dmodel.D \
                + sum((w * (F.T @ p @ F) for w, _E, F in atoms), np.zeros((nv, nv)))
            me = min_eig(s0)
            if me <= PD_TOL:
                raise SigmaNotPositive("sigma0", me, t=float(grid[i]))
            G = p @ dmodel.B + dmodel.C.T @ p @ dmodel.D \
                + sum((w * (E.T @ p @ F) for w, E, F in atoms), np.zeros((n, nv)))
            phi[i] = -np.linalg.solve(symmetrize(s0), G.T)

        def phi_at(t):
            return _interp_rows(grid, phi, t)

        _, P_new = lyapunov_solve(
            A=lambda t: dmodel.A + dmodel.B @ phi_at(t),
            C=lambda t: dmodel.C + dmodel.D @ phi_at(t),
            atoms=lambda t: [(w, E + F @ phi_at(t)) for w, E, F in atoms],
            source=lambda t: -M2 + gamma**2 * (phi_at(t).T @ phi_at(t)),
            terminal=np.zeros((n, n)),
            T=dmodel.T, dt=dt, enforce_nonneg=False)

        history.append(P_new)
        delta = float(np.max(np.linalg.norm(P_new - P_prev, "fro", axis=(1, 2))))
        if not np.isfinite(delta):
            raise NoConvergence(it, last=P_new, prev=P_prev)
        if delta < tol:
            return PicardResult(grid=grid, P=P_new, iterates=history,
                                n_iter=it, converged=True)
        P_prev = P_new
    raise NoConvergence(max_iter, last=history[-1],
                        prev=history[-2] if len(history) > 1 else None)


def gamma_threshold(model: MeanFieldJumpModel, gamma_lo: float, gamma_hi: float,
                    tol: float, dt: float, mode: str = "frozen") -> GammaSearchResult:
    """Bisection on solvability of the coupled equations.

    Requires an infeasible lower and feasible upper endpoint; returns the
    bracket midpoint once the bracket is narrower than ``tol``.  Every probe
    is recorded, and the probe set is checked for consistency with the
    assumed monotonicity of feasibility in gamma.
    """
    if not (0 < gamma_lo < gamma_hi):
        raise BadBracket(f"need 0 < gamma_lo < gamma_hi, got [{gamma_lo}, {gamma_hi}]")
    probes: list[tuple[float, bool]] = []

    def feas(g: float) -> bool:
        ok = solve_gdre(model, g, dt, mode=mode).feasible
        probes.append((g, ok))
        return ok

    if feas(gamma_lo):
        raise BadBracket(f"gamma_lo={gamma_lo} is already feasible")
    if not feas(gamma_hi):
        raise BadBracket(f"gamma_hi={gamma_hi} is infeasible")
    lo, hi = gamma_lo, gamma_hi
    while hi - lo >= tol:
        mid = 0.5 * (lo + hi)
        if feas(mid):
            hi = mid
        else:
            lo = mid
    bad = [g for g, ok in probes if not ok]
    good = [g for g, ok in probes if ok]
    if bad and good and max(bad) >= min(good):
        raise BadBracket("feasibility is not monotone over the probed gammas")
    return GammaSearchResult(gamma_star=0.5 * (lo + hi), lo=lo, hi=hi, probes=probes)


def value_at(traj: RiccatiTrajectory, mean_x0, cov_x0) -> tuple[float, float]:
    """Optimal game values from the initial-time Riccati matrices.

    J1 (disturbance value) pairs the initial covariance with P1(0) and the
    initial mean with Q1(0); J2 (control value) does the same with (P2, Q2).
    """
    if not traj.feasible:
        raise InfeasibleTrajectory("value_at requires a feasible trajectory")
    mean = np.asarray(mean_x0, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov_x0, dtype=float))
    j1 = float(np.trace(traj.P1[0] @ cov) + mean @ traj.Q1[0] @ mean)
    j2 = float(np.trace(traj.P2[0] @ cov) + mean @ traj.Q2[0] @ mean)
    return j1, j2


def solve_hinf_dre(model: MeanFieldJumpModel, gamma: float, dt: float) -> HinfDreSolution:
    """Zero-sum Riccati pair for the diffusion-only mean-field system.

    This is the saddle-point characterization used by the model-free module
    as its ground truth: P (deviation channel) and Q (mean channel) are
    nonnegative definite here, and the disturbance weighting gamma^2 I -
    D1' P D1 must stay positive definite.  Gains:

        L  = -(I + D2' P D2)^{-1} (P B2 + C' P D2)'
        F  =  (g^2 I - D1' P D1)^{-1} (P B1 + C' P D1)'

    with the mean-channel pair (Lt, Ft) built from Q and the summed
    coefficients.
    """
    if model.jump_atoms:
        raise ValueError("zero-sum Riccati pair is defined for models without jump atoms")
    d = model.dims
    n = d.n
    grid = _grid_for(model.T, dt)
    N = len(grid) - 1
    M2 = model.M.T @ model.M
    As = model.A + model.Abar
    Cs = model.C + model.Cbar
    B1s, B2s = model.B1 + model.B1bar, model.B2 + model.B2bar
    D1s, D2s = model.D1 + model.D1bar, model.D2 + model.D2bar
    Iu, Iv = np.eye(d.nu), np.eye(d.nv)

    def split_terms(P, Q):
        gv = gamma**2 * Iv - model.D1.T @ P @ model.D1
        gu = Iu + model.D2.T @ P @ model.D2
        gvm = gamma**2 * Iv - D1s.T @ P @ D1s
        gum = Iu + D2s.T @ P @ D2s
        for name, mat in (("gamma_dev", gv), ("gamma_mean", gvm)):
            me = min_eig(mat)
            if me <= PD_TOL:
                raise SigmaNotPositive(name, me)
        Gv = P @ model.B1 + model.C.T @ P @ model.D1
        Gu = P @ model.B2 + model.C.T @ P @ model.D2
        Gvm = Q @ B1s + Cs.T @ P @ D1s
        Gum = Q @ B2s + Cs.T @ P @ D2s
        return gv, gu, gvm, gum, Gv, Gu, Gvm, Gum

    def rhs(P, Q):
        gv, gu, gvm, gum, Gv, Gu, Gvm, Gum = split_terms(P, Q)
        dP = -(P @ model.A + model.A.T @ P + model.C.T @ P @ model.C + M2
               + Gv @ np.linalg.solve(gv, Gv.T) - Gu @ np.linalg.solve(gu, Gu.T))
        dQ = -(Q @ As + As.T @ Q + Cs.T @ P @ Cs + M2
               + Gvm @ np.linalg.solve(gvm, Gvm.T) - Gum @ np.linalg.solve(gum, Gum.T))
        return symmetrize(dP), symmetrize(dQ)

    P = np.empty((N + 1, n, n))
    Q = np.empty((N + 1, n, n))
    P[N] = np.zeros((n, n))
    Q[N] = np.zeros((n, n))
    h = -dt
    p, q = P[N], Q[N]
    for i in range(N, 0, -1):
        k1 = rhs(p, q)
        k2 = rhs(p + 0.5 * h * k1[0], q + 0.5 * h * k1[1])
        k3 = rhs(p + 0.5 * h * k2[0], q + 0.5 * h * k2[1])
        k4 = rhs(p + h * k3[0], q + h * k3[1])
        p = symmetrize(p + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]))
        q = symmetrize(q + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))
        P[i - 1], Q[i - 1] = p, q

    L = np.empty((N + 1, d.nu, n))
    F = np.empty((N + 1, d.nv, n))
    Lt = np.empty_like(L)
    Ft = np.empty_like(F)
    for i in range(N + 1):
        gv, gu, gvm, gum, Gv, Gu, Gvm, Gum = split_terms(P[i], Q[i])
        L[i] = -np.linalg.solve(gu, Gu.T)
        F[i] = np.linalg.solve(gv, Gv.T)
        Lt[i] = -np.linalg.solve(gum, Gum.T)
        Ft[i] = np.linalg.solve(gvm, Gvm.T)
    return HinfDreSolution(grid=grid, P=P, Q=Q, L=L, F=F, Lt=Lt, Ft=Ft, gamma=gamma)


def export_trajectory_csv(traj: RiccatiTrajectory, path: str,
                          include_det: bool = False) -> None:
    """Write the trajectory as CSV, one row per grid point, 17 significant digits."""
    n = traj.P1.shape[1]

    def mat_cols(name, arr):
        return [(f"{name}_{i + 1}{j + 1}", arr[:, i, j])
                for i in range(arr.shape[1]) for j in range(arr.shape[2])]

    cols: list[tuple[str, np.ndarray]] = [("t", traj.grid)]
    for name, arr in (("P1", traj.P1), ("Q1", traj.Q1), ("P2", traj.P2), ("Q2", traj.Q2)):
        cols += mat_cols(name, arr)
    g = traj.gains
    for name, arr in (("K1", g.K1), ("K1_total", g.K1_total),
                      ("K2", g.K2), ("K2_total", g.K2_total)):
        cols += mat_cols(name, arr)
    for j, name in enumerate(MARGIN_NAMES):
        cols.append((f"{name}_mineig", traj.sigma_margins[:, j]))
    if include_det:
        for name, arr in (("P1", traj.P1), ("Q1", traj.Q1), ("P2", traj.P2), ("Q2", traj.Q2)):
            with np.errstate(invalid="ignore"):
                det = np.array([np.linalg.det(arr[i]) if np.all(np.isfinite(arr[i]))
                                else np.nan for i in range(arr.shape[0])])
            cols.append((f"det_{name}", det))
    header = ",".join(name for name, _ in cols)
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i in range(len(traj.grid)):
            fh.write(",".join(fmt17(col[i]) for _, col in cols) + "\n")
