"""Model-free disturbance-attenuation synthesis for diffusion-only plants.

The controller of a mean-field diffusion (no jumps) can be recovered without
coefficient knowledge.  A behavior policy with exploration noise is applied
once and trajectory data are collected; a double policy-iteration loop then
alternates

* policy evaluation: the quadratic value matrices (P for the deviation
  channel, Q for the mean channel) of the current gains satisfy linear
  Lyapunov equations, whose one-step integral form along data is an exact
  algebraic identity relating P, Q and a handful of coefficient blocks
  (B'P-type, D'PD-type) to integrals of the data;
* policy improvement: the control gains (L deviation, Lt mean) and the
  worst-case-disturbance gains (F, Ft) are explicit functions of those same
  blocks.

On each sampling interval the identity is linear in the unknown block vector,
so the blocks are identified by least squares over many initial states, and
the improvement step never touches the model.  Data are collected once and
reused across all iterates (the identity's correction terms re-weight the
fixed raw moments with the current gains).

Conditional expectations are approximated by branch averages: from the state
reached at each sampling instant, a bundle of fresh simulations is branched
and averaged.  The mean-field terms inside the dynamics use the plant's
population mean, which is a distinct object; the discrepancy vanishes for
deviation-free behavior gains when the state mean does not feed back
(Abar = Cbar = 0) and is logged otherwise.  An exact-expectation mode
integrates the branch moment ODEs instead of sampling; it exists to validate
the identity and the loop against the model-based solution.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _rng
from ._numutil import symmetrize, min_eig, asym
from .model import MeanFieldJumpModel
from .riccati import NoConvergence
from .simulate import Exploration, make_exploration

__all__ = [
    "RankDeficient",
    "SingularImprovement",
    "svec",
    "smat",
    "quad_monomials",
    "xi_block_layout",
    "xi_length",
    "XiVector",
    "IdentifiedBlocks",
    "blocks_from_model",
    "improve",
    "pe_oracle",
    "RlExploration",
    "make_rl_exploration",
    "BehaviorPolicy",
    "MeanFieldPlant",
    "DataSet",
    "collect",
    "RegressionBatch",
    "assemble",
    "xi_from_values",
    "solve_interval",
    "RlSettings",
    "PolicyIterate",
    "RlReport",
    "run_algorithm1",
    "policy_iteration_model_based",
]

_PAIRS = (("x", "x"), ("u", "x"), ("v", "x"), ("u", "v"), ("u", "u"), ("v", "v"))


class RankDeficient(Exception):
    def __init__(self, rank: int, needed: int):
        self.rank = rank
        self.needed = needed
        super().__init__(f"regression matrix rank {rank} < {needed} unknowns; "
                         "increase exploration or the number of initial states")


class SingularImprovement(Exception):
    def __init__(self, which: str):
        self.which = which
        super().__init__(f"policy improvement solve '{which}' is singular or indefinite; "
                         "gamma may be too small or identification too noisy")


# ---------------------------------------------------------------------------
# quadratic encodings
# ---------------------------------------------------------------------------

def svec(P: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Half-vectorization with doubled off-diagonals.

    Ordered [p11, 2 p12, ..., 2 p1n, p22, 2 p23, ..., pnn] so that
    <svec(P), quad_monomials(x)> = x' P x.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if asym(P) > tol:
        raise ValueError(f"svec needs a symmetric matrix (asymmetry {asym(P):.2e})")
    n = P.shape[0]
    out = []
    for i in range(n):
        out.append(P[i, i])
        out.extend(2.0 * P[i, i + 1:])
    return np.array(out)


def smat(s: np.ndarray) -> np.ndarray:
    """Inverse of svec (exact: doubling halves back losslessly)."""
    s = np.asarray(s, dtype=float).reshape(-1)
    n = int((np.sqrt(8 * s.size + 1) - 1) / 2)
    if n * (n + 1) // 2 != s.size:
        raise ValueError(f"length {s.size} is not a triangular number")
    P = np.zeros((n, n))
    k = 0
    for i in range(n):
        P[i, i] = s[k]
        k += 1
        for j in range(i + 1, n):
            P[i, j] = P[j, i] = s[k] / 2.0
            k += 1
    return P


def quad_monomials(x: np.ndarray) -> np.ndarray:
    """Quadratic monomial vector [x1^2, x1 x2, ..., xn^2] (upper triangle)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return _uptri(np.outer(x, x))


def _uptri(S: np.ndarray) -> np.ndarray:
    """Upper-triangle entries of a symmetric matrix in monomial order."""
    n = S.shape[0]
    idx = np.triu_indices(n)
    return np.asarray(S)[idx]


def xi_block_layout(n: int, nu: int, nv: int) -> list[tuple[str, int]]:
    """Ordered unknown blocks of the per-interval regression vector."""
    tri = lambda m: m * (m + 1) // 2
    return [
        ("q_end", tri(n)),
        ("q_start", tri(n)),
        ("b2_mean", nu * n),
        ("b1_mean", nv * n),
        ("b2_dev", nu * n),
        ("b1_dev", nv * n),
        ("d2_mean", tri(nu)),
        ("d1_mean", tri(nv)),
        ("d2_dev", tri(nu)),
        ("d1_dev", tri(nv)),
        ("h_dev", nu * nv),
        ("h_mean", nu * nv),
        ("p_end", tri(n)),
    ]


def xi_length(n: int, nu: int, nv: int) -> int:
    return sum(size for _, size in xi_block_layout(n, nu, nv))


@dataclass(frozen=True)
class XiVector:
    """Solved unknown vector of one interval, with typed block access."""

    vec: np.ndarray
    n: int
    nu: int
    nv: int

    def _block(self, name: str) -> np.ndarray:
        off = 0
        for bname, size in xi_block_layout(self.n, self.nu, self.nv):
            if bname == name:
                return self.vec[off:off + size]
            off += size
        raise KeyError(name)

    @property
    def q_end(self) -> np.ndarray:
        return smat(self._block("q_end"))

    @property
    def q_start(self) -> np.ndarray:
        return smat(self._block("q_start"))

    @property
    def p_end(self) -> np.ndarray:
        return smat(self._block("p_end"))

    def blocks(self) -> "IdentifiedBlocks":
        n, nu, nv = self.n, self.nu, self.nv
        return IdentifiedBlocks(
            b2_mean=self._block("b2_mean").reshape(nu, n),
            b1_mean=self._block("b1_mean").reshape(nv, n),
            b2_dev=self._block("b2_dev").reshape(nu, n),
            b1_dev=self._block("b1_dev").reshape(nv, n),
            d2_mean=smat(self._block("d2_mean")),
            d1_mean=smat(self._block("d1_mean")),
            d2_dev=smat(self._block("d2_dev")),
            d1_dev=smat(self._block("d1_dev")),
            h_dev=self._block("h_dev").reshape(nu, nv),
            h_mean=self._block("h_mean").reshape(nu, nv),
        )


# ---------------------------------------------------------------------------
# policy evaluation / improvement (the model-based forms)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentifiedBlocks:
    """Coefficient blocks entering the improvement formulas.

    b2_dev = B2'P + D2'P(C + D1 F),    d2_dev = D2'P D2,   h_dev = D2'P D1,
    b1_dev = B1'P + D1'P(C + D2 L),    d1_dev = D1'P D1,
    with the _mean variants built from Q, the summed coefficients and the
    mean-channel gains.
    """

    b2_mean: np.ndarray
    b1_mean: np.ndarray
    b2_dev: np.ndarray
    b1_dev: np.ndarray
    d2_mean: np.ndarray
    d1_mean: np.ndarray
    d2_dev: np.ndarray
    d1_dev: np.ndarray
    h_dev: np.ndarray
    h_mean: np.ndarray


def blocks_from_model(model: MeanFieldJumpModel, P: np.ndarray, Q: np.ndarray,
                      L: np.ndarray, Lt: np.ndarray, F_prev: np.ndarray,
                      Ft_prev: np.ndarray) -> IdentifiedBlocks:
    """Evaluate the coefficient blocks from the model (testing reference)."""
    Cs = model.C + model.Cbar
    B1s, B2s = model.B1 + model.B1bar, model.B2 + model.B2bar
    D1s, D2s = model.D1 + model.D1bar, model.D2 + model.D2bar
    return IdentifiedBlocks(
        b2_dev=model.B2.T @ P + model.D2.T @ P @ (model.C + model.D1 @ F_prev),
        b1_dev=model.B1.T @ P + model.D1.T @ P @ (model.C + model.D2 @ L),
        b2_mean=B2s.T @ Q + D2s.T @ P @ (Cs + D1s @ Ft_prev),
        b1_mean=B1s.T @ Q + D1s.T @ P @ (Cs + D2s @ Lt),
        d2_dev=model.D2.T @ P @ model.D2,
        d1_dev=model.D1.T @ P @ model.D1,
        d2_mean=D2s.T @ P @ D2s,
        d1_mean=D1s.T @ P @ D1s,
        h_dev=model.D2.T @ P @ model.D1,
        h_mean=D2s.T @ P @ D1s,
    )


def improve(blocks: IdentifiedBlocks, gamma: float
            ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Policy improvement from coefficient blocks.

        L  = -(I + d2_dev)^{-1} b2_dev      Lt = -(I + d2_mean)^{-1} b2_mean
        F  =  (g^2 I - d1_dev)^{-1} b1_dev  Ft =  (g^2 I - d1_mean)^{-1} b1_mean

    The disturbance solves require positive definiteness of the gamma
    blocks; failure indicates gamma too small or bad identification.
    """
    nu = blocks.d2_dev.shape[0]
    nv = blocks.d1_dev.shape[0]

    def ctrl_solve(D, B, which):
        try:
            return -np.linalg.solve(np.eye(nu) + symmetrize(D), B)
        except np.linalg.LinAlgError as exc:
            raise SingularImprovement(which) from exc

    def dist_solve(D, B, which):
        mat = gamma**2 * np.eye(nv) - symmetrize(D)
        if min_eig(mat) <= 0:
            raise SingularImprovement(which)
        return np.linalg.solve(mat, B)

    L = ctrl_solve(blocks.d2_dev, blocks.b2_dev, "control_dev")
    Lt = ctrl_solve(blocks.d2_mean, blocks.b2_mean, "control_mean")
    F = dist_solve(blocks.d1_dev, blocks.b1_dev, "disturbance_dev")
    Ft = dist_solve(blocks.d1_mean, blocks.b1_mean, "disturbance_mean")
    return L, Lt, F, Ft


def _gain_fn(g, grid):
    if callable(g):
        return g
    g = np.asarray(g, dtype=float)
    if g.ndim == 2:
        return lambda t: g
    if grid is None:
        raise ValueError("grid required for time-varying gain arrays")

    def fn(t):
        t = min(max(t, grid[0]), grid[-1])
        j = min(int(np.searchsorted(grid, t, side="right")) - 1, len(grid) - 2)
        w = (t - grid[j]) / (grid[j + 1] - grid[j])
        return (1.0 - w) * g[j] + w * g[j + 1]
    return fn


def pe_oracle(model: MeanFieldJumpModel, gamma: float, L, Lt, F, Ft, dt: float,
              gain_grid: np.ndarray | None = None
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Policy evaluation: linear Lyapunov pair for fixed gains.

    Backward RK4 of

        dP/dt = -(P A_c + A_c' P + C_c' P C_c + M'M + L'L - g^2 F'F)
        dQ/dt = -(Q A_m + A_m' Q + C_m' P C_m + M'M + Lt'Lt - g^2 Ft'Ft)

    with A_c = A + B2 L + B1 F, C_c = C + D2 L + D1 F and the mean-channel
    coefficients built from the summed matrices and (Lt, Ft).  Gains may be
    constant matrices or arrays over ``gain_grid``.  Returns (grid, P, Q).
    """
    if model.jump_atoms:
        raise ValueError("policy evaluation is defined for models without jump atoms")
    n = model.dims.n
    steps = round(model.T / dt)
    if steps < 1 or abs(steps * dt - model.T) > 1e-9 * max(1.0, model.T):
        raise ValueError(f"dt={dt} does not divide the horizon T={model.T}")
    grid = np.linspace(0.0, model.T, steps + 1)
    Lf, Ltf = _gain_fn(L, gain_grid), _gain_fn(Lt, gain_grid)
    Ff, Ftf = _gain_fn(F, gain_grid), _gain_fn(Ft, gain_grid)
    M2 = model.M.T @ model.M
    As = model.A + model.Abar
    Cs = model.C + model.Cbar
    B1s, B2s = model.B1 + model.B1bar, model.B2 + model.B2bar
    D1s, D2s = model.D1 + model.D1bar, model.D2 + model.D2bar

    def rhs(t, p, q):
        Lv, Ltv, Fv, Ftv = Lf(t), Ltf(t), Ff(t), Ftf(t)
        Ac = model.A + model.B2 @ Lv + model.B1 @ Fv
        Cc = model.C + model.D2 @ Lv + model.D1 @ Fv
        Am = As + B2s @ Ltv + B1s @ Ftv
        Cm = Cs + D2s @ Ltv + D1s @ Ftv
        dp = -(p @ Ac + Ac.T @ p + Cc.T @ p @ Cc + M2
               + Lv.T @ Lv - gamma**2 * (Fv.T @ Fv))
        dq = -(q @ Am + Am.T @ q + Cm.T @ p @ Cm + M2
               + Ltv.T @ Ltv - gamma**2 * (Ftv.T @ Ftv))
        return symmetrize(dp), symmetrize(dq)

    P = np.empty((steps + 1, n, n))
    Q = np.empty((steps + 1, n, n))
    P[steps] = Q[steps] = np.zeros((n, n))
    p, q = P[steps], Q[steps]
    h = -dt
    for i in range(steps, 0, -1):
        t = grid[i]
        k1 = rhs(t, p, q)
        k2 = rhs(t + 0.5 * h, p + 0.5 * h * k1[0], q + 0.5 * h * k1[1])
        k3 = rhs(t + 0.5 * h, p + 0.5 * h * k2[0], q + 0.5 * h * k2[1])
        k4 = rhs(t + h, p + h * k3[0], q + h * k3[1])
        p = symmetrize(p + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]))
        q = symmetrize(q + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))
        P[i - 1], Q[i - 1] = p, q
    return grid, P, Q


# ---------------------------------------------------------------------------
# behavior policy, plant, data collection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RlExploration:
    """Excitation added to the behavior inputs during data collection.

    Sinusoids excite the mean channel (they survive conditional averaging);
    Brownian-motion components with amplitude vectors ``bm_u`` / ``bm_v``
    excite the deviation channels.  A common Brownian factor correlates the
    control and disturbance excitations so their cross block is identifiable.
    """

    sin_u: Exploration
    sin_v: Exploration
    bm_u: np.ndarray
    bm_v: np.ndarray

    def eu_det(self, t: float) -> np.ndarray:
        return self.sin_u.deterministic(t)

    def ev_det(self, t: float) -> np.ndarray:
        return self.sin_v.deterministic(t)


def make_rl_exploration(seed: int, nu: int, nv: int, sin_amp: float = 0.5,
                        bm_amp: float = 0.5, n_sines: int = 10,
                        freq_range: tuple[float, float] = (1.0, 50.0)) -> RlExploration:
    return RlExploration(
        sin_u=make_exploration(seed, nu, sin_amp=sin_amp, n_sines=n_sines,
                               freq_range=freq_range),
        sin_v=make_exploration(seed + 1, nv, sin_amp=sin_amp, n_sines=n_sines,
                               freq_range=freq_range),
        bm_u=np.full(nu, float(bm_amp)),
        bm_v=np.full(nv, float(bm_amp)),
    )


@dataclass(frozen=True)
class BehaviorPolicy:
    """Fixed stabilizing gains plus exploration, applied during collection."""

    L: np.ndarray
    Lt: np.ndarray
    F: np.ndarray
    Ft: np.ndarray
    exploration: RlExploration

    def __post_init__(self):
        for name in ("L", "Lt", "F", "Ft"):
            object.__setattr__(self, name,
                               np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))


class MeanFieldPlant:
    """Black-box simulator of a diffusion-only mean-field plant.

    The learner never reads the coefficients; it may run the population,
    probe paths and branch bundles, all driven by counter-based noise.  The
    exact-expectation mode integrates conditional moment ODEs instead of
    sampling and exists for validation.
    """

    def __init__(self, model: MeanFieldJumpModel, n_population: int = 4000,
                 seed: int = 0):
        if model.jump_atoms:
            raise ValueError("the model-free plant does not support jump atoms")
        self._model = model
        self.n_population = n_population
        self.seed = seed
        self.dims = model.dims
        self.T = model.T

    # -- population -----------------------------------------------------

    def population_means(self, behavior: BehaviorPolicy, fine_grid: np.ndarray,
                         mode: str) -> dict[str, np.ndarray]:
        """Mean-field inputs m_x, m_u, m_v on the fine grid."""
        m = self._model
        ex = behavior.exploration
        nf = len(fine_grid) - 1
        if mode == "exact":
            mx = np.empty((nf + 1, m.dims.n))
            mx[0] = np.zeros(m.dims.n)

            def rhs(t, x):
                mu = behavior.Lt @ x + ex.eu_det(t)
                mv = behavior.Ft @ x + ex.ev_det(t)
                return ((m.A + m.Abar) @ x + (m.B2 + m.B2bar) @ mu
                        + (m.B1 + m.B1bar) @ mv)

            for i in range(nf):
                t, h = fine_grid[i], fine_grid[i + 1] - fine_grid[i]
                k1 = rhs(t, mx[i])
                k2 = rhs(t + h / 2, mx[i] + h / 2 * k1)
                k3 = rhs(t + h / 2, mx[i] + h / 2 * k2)
                k4 = rhs(t + h, mx[i] + h * k3)
                mx[i + 1] = mx[i] + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        else:
            npop = self.n_population
            keys = np.arange(npop)
            X = np.zeros((npop, m.dims.n))
            mx = np.empty((nf + 1, m.dims.n))
            mx[0] = X.mean(axis=0)
            for i in range(nf):
                t, h = fine_grid[i], fine_grid[i + 1] - fine_grid[i]
                mz = X.mean(axis=0)
                u = (X - mz) @ behavior.L.T + (behavior.Lt @ mz + ex.eu_det(t))
                v = (X - mz) @ behavior.F.T + (behavior.Ft @ mz + ex.ev_det(t))
                mu, mv = u.mean(axis=0), v.mean(axis=0)
                drift = X @ m.A.T + u @ m.B2.T + v @ m.B1.T \
                    + (m.Abar @ mz + m.B2bar @ mu + m.B1bar @ mv)
                diff = X @ m.C.T + u @ m.D2.T + v @ m.D1.T \
                    + (m.Cbar @ mz + m.D2bar @ mu + m.D1bar @ mv)
                xi = _rng.normals(self.seed, _rng.LANE_BROWNIAN, i, keys, 1)[:, 0]
                X = X + h * drift + np.sqrt(h) * xi[:, None] * diff
                mx[i + 1] = X.mean(axis=0)
        mu_arr = np.array([behavior.Lt @ mx[i] + ex.eu_det(fine_grid[i])
                           for i in range(nf + 1)])
        mv_arr = np.array([behavior.Ft @ mx[i] + ex.ev_det(fine_grid[i])
                           for i in range(nf + 1)])
        return {"x": mx, "u": mu_arr, "v": mv_arr}

    # -- probes ----------------------------------------------------------

    def probe_paths(self, behavior: BehaviorPolicy, x0: np.ndarray,
                    fine_grid: np.ndarray, means: dict[str, np.ndarray],
                    mode: str) -> np.ndarray:
        """Paths of the s probe states under the behavior policy."""
        m = self._model
        ex = behavior.exploration
        s = x0.shape[0]
        nf = len(fine_grid) - 1
        out = np.empty((s, nf + 1, m.dims.n))
        out[:, 0] = x0
        X = x0.copy()
        W = np.zeros((s, 3))  # exploration Brownian components (common, u, v)
        keys = np.arange(s)
        for i in range(nf):
            t, h = fine_grid[i], fine_grid[i + 1] - fine_grid[i]
            mz, mu, mv = means["x"][i], means["u"][i], means["v"][i]
            u = (X - mz) @ behavior.L.T + (behavior.Lt @ mz + ex.eu_det(t))
            v = (X - mz) @ behavior.F.T + (behavior.Ft @ mz + ex.ev_det(t))
            if mode == "sampled":
                u = u + np.outer(W[:, 0] + W[:, 1], ex.bm_u)
                v = v + np.outer(W[:, 0] + W[:, 2], ex.bm_v)
            drift = X @ m.A.T + u @ m.B2.T + v @ m.B1.T \
                + (m.Abar @ mz + m.B2bar @ mu + m.B1bar @ mv)
            if mode == "exact":
                # noise-free characteristic path; RK4 would demand mean values
                # at half steps, and probe accuracy only sets branch points
                X = X + h * drift
            else:
                diff = X @ m.C.T + u @ m.D2.T + v @ m.D1.T \
                    + (m.Cbar @ mz + m.D2bar @ mu + m.D1bar @ mv)
                zn = _rng.normals(self.seed + 1, _rng.LANE_BROWNIAN, i, keys, 4)
                X = X + h * drift + np.sqrt(h) * zn[:, 0:1] * diff
                W = W + np.sqrt(h) * zn[:, 1:4]
            out[:, i + 1] = X
        return out

    # -- branches: sampled -----------------------------------------------

    def branch_moments_sampled(self, behavior: BehaviorPolicy, x_start: np.ndarray,
                               interval_index: int, sub_grid: np.ndarray,
                               means_slice: dict[str, np.ndarray],
                               n_branches: int, seed: int):
        """Branch-average conditional moments over one sampling interval.

        x_start is (s, n); sub_grid has K+1 nodes covering the interval;
        means_slice carries the population means at those nodes.  Returns the
        per-probe moment records used by the regression assembly.
        """
        m = self._model
        ex = behavior.exploration
        s, n = x_start.shape
        nu, nv = m.dims.nu, m.dims.nv
        K = len(sub_grid) - 1
        Lb = n_branches
        keys = np.arange(s * Lb)

        X = np.repeat(x_start[:, None, :], Lb, axis=1)  # (s, Lb, n)
        W = np.zeros((s, Lb, 3))
        acc = _MomentAccumulator(s, n, nu, nv)
        for k in range(K + 1):
            t = sub_grid[k]
            mz, mu, mv = means_slice["x"][k], means_slice["u"][k], means_slice["v"][k]
            u = (X - mz) @ behavior.L.T + (behavior.Lt @ mz + ex.eu_det(t)) \
                + (W[:, :, 0] + W[:, :, 1])[:, :, None] * ex.bm_u
            v = (X - mz) @ behavior.F.T + (behavior.Ft @ mz + ex.ev_det(t)) \
                + (W[:, :, 0] + W[:, :, 2])[:, :, None] * ex.bm_v
            acc.add_sampled(k, sub_grid, X, u, v)
            if k == K:
                break
            h = sub_grid[k + 1] - sub_grid[k]
            drift = X @ m.A.T + u @ m.B2.T + v @ m.B1.T \
                + (m.Abar @ mz + m.B2bar @ mu + m.B1bar @ mv)
            diff = X @ m.C.T + u @ m.D2.T + v @ m.D1.T \
                + (m.Cbar @ mz + m.D2bar @ mu + m.D1bar @ mv)
            zn = _rng.normals(seed, _rng.LANE_BRANCH,
                              interval_index * (K + 1) + k, keys, 4)
            zn = zn.reshape(s, Lb, 4)
            X = X + h * drift + np.sqrt(h) * zn[:, :, 0:1] * diff
            W = W + np.sqrt(h) * zn[:, :, 1:4]
        return acc.finish_sampled(X)

    # -- branches: exact expectations -------------------------------------

    def branch_moments_exact(self, behavior: BehaviorPolicy, x_start: np.ndarray,
                             sub_grid: np.ndarray, m_start: np.ndarray):
        """Conditional moments of one interval by moment-ODE integration.

        The augmented deviation state is (x - E[x], Wc, Wu, Wv); its second
        moment S solves a linear ODE driven by the diffusion loading, and
        every deviation moment in the regression is G_a S G_b'.  The
        conditional mean and the population mean are integrated jointly so
        all RK4 stages are consistent.
        """
        mdl = self._model
        ex = behavior.exploration
        s, n = x_start.shape
        nu, nv = mdl.dims.nu, mdl.dims.nv
        nz = n + 3
        K = len(sub_grid) - 1

        Gx = np.zeros((n, nz))
        Gx[:, :n] = np.eye(n)
        Gu = np.zeros((nu, nz))
        Gu[:, :n] = behavior.L
        Gu[:, n] = ex.bm_u
        Gu[:, n + 1] = ex.bm_u
        Gv = np.zeros((nv, nz))
        Gv[:, :n] = behavior.F
        Gv[:, n] = ex.bm_v
        Gv[:, n + 2] = ex.bm_v
        G = {"x": Gx, "u": Gu, "v": Gv}

        AZ = np.zeros((nz, nz))
        AZ[:n, :n] = mdl.A + mdl.B2 @ behavior.L + mdl.B1 @ behavior.F
        AZ[:n, n] = mdl.B2 @ ex.bm_u + mdl.B1 @ ex.bm_v
        AZ[:n, n + 1] = mdl.B2 @ ex.bm_u
        AZ[:n, n + 2] = mdl.B1 @ ex.bm_v
        Hs = np.zeros((n, nz))
        Hs[:, :n] = mdl.C + mdl.D2 @ behavior.L + mdl.D1 @ behavior.F
        Hs[:, n] = mdl.D2 @ ex.bm_u + mdl.D1 @ ex.bm_v
        Hs[:, n + 1] = mdl.D2 @ ex.bm_u
        Hs[:, n + 2] = mdl.D1 @ ex.bm_v

        def mean_rates(t, mz, xi):
            """Population mean, conditional mean and their input means (batched)."""
            mu = mz @ behavior.Lt.T + ex.eu_det(t)
            mv = mz @ behavior.Ft.T + ex.ev_det(t)
            eu = (xi - mz) @ behavior.L.T + mu
            ev = (xi - mz) @ behavior.F.T + mv
            dmz = mz @ (mdl.A + mdl.Abar).T + mu @ (mdl.B2 + mdl.B2bar).T \
                + mv @ (mdl.B1 + mdl.B1bar).T
            dxi = xi @ mdl.A.T + eu @ mdl.B2.T + ev @ mdl.B1.T \
                + (mz @ mdl.Abar.T + mu @ mdl.B2bar.T + mv @ mdl.B1bar.T)
            return dmz, dxi, mu, mv, eu, ev

        def rhs(t, mz, xi, S):
            dmz, dxi, mu, mv, eu, ev = mean_rates(t, mz, xi)
            hsig = xi @ mdl.C.T + eu @ mdl.D2.T + ev @ mdl.D1.T \
                + (mz @ mdl.Cbar.T + mu @ mdl.D2bar.T + mv @ mdl.D1bar.T)
            dS = np.einsum("ij,qjk->qik", AZ, S)
            dS = dS + np.swapaxes(dS, 1, 2)
            noise = np.einsum("ij,qjk,lk->qil", Hs, S, Hs) \
                + np.einsum("qi,qj->qij", hsig, hsig)
            dS[:, :n, :n] += noise
            dS[:, n, n] += 1.0
            dS[:, n + 1, n + 1] += 1.0
            dS[:, n + 2, n + 2] += 1.0
            return dmz, dxi, dS

        mz = m_start.copy()
        xi = x_start.copy()
        S = np.zeros((s, nz, nz))
        acc = _MomentAccumulator(s, n, nu, nv)
        for k in range(K + 1):
            t = sub_grid[k]
            _, _, mu, mv, eu, ev = mean_rates(t, mz, xi)
            acc.add_exact(k, sub_grid, xi, eu, ev, S, G)
            if k == K:
                break
            h = sub_grid[k + 1] - sub_grid[k]
            k1 = rhs(t, mz, xi, S)
            k2 = rhs(t + h / 2, mz + h / 2 * k1[0], xi + h / 2 * k1[1], S + h / 2 * k1[2])
            k3 = rhs(t + h / 2, mz + h / 2 * k2[0], xi + h / 2 * k2[1], S + h / 2 * k2[2])
            k4 = rhs(t + h, mz + h * k3[0], xi + h * k3[1], S + h * k3[2])
            mz = mz + (h / 6) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            xi = xi + (h / 6) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            S = S + (h / 6) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        return acc.finish_exact(xi, S)


class _MomentAccumulator:
    """Trapezoid accumulation of the per-interval moment integrals."""

    def __init__(self, s, n, nu, nv):
        self.dims = {"x": n, "u": nu, "v": nv}
        self.mtil = {p: np.zeros((s, self.dims[p[0]], self.dims[p[1]])) for p in _PAIRS}
        self.mdev = {p: np.zeros((s, self.dims[p[0]], self.dims[p[1]])) for p in _PAIRS}
        self._mean_end = None

    @staticmethod
    def _w(k, sub_grid):
        K = len(sub_grid) - 1
        h = sub_grid[1] - sub_grid[0]
        return 0.5 * h if k in (0, K) else h

    def add_sampled(self, k, sub_grid, X, u, v):
        w = self._w(k, sub_grid)
        vals = {"x": X, "u": u, "v": v}
        means = {a: vals[a].mean(axis=1) for a in vals}
        devs = {a: vals[a] - means[a][:, None, :] for a in vals}
        Lb = X.shape[1]
        for a, b in _PAIRS:
            self.mtil[(a, b)] += w * np.einsum("qa,qb->qab", means[a], means[b])
            self.mdev[(a, b)] += w * np.einsum("qla,qlb->qab", devs[a], devs[b]) / Lb

    def finish_sampled(self, X_end):
        mean_end = X_end.mean(axis=1)
        dev = X_end - mean_end[:, None, :]
        cov_end = np.einsum("qla,qlb->qab", dev, dev) / X_end.shape[1]
        return mean_end, cov_end, self.mtil, self.mdev

    def add_exact(self, k, sub_grid, xi, eu, ev, S, G):
        w = self._w(k, sub_grid)
        means = {"x": xi, "u": eu, "v": ev}
        for a, b in _PAIRS:
            self.mtil[(a, b)] += w * np.einsum("qa,qb->qab", means[a], means[b])
            self.mdev[(a, b)] += w * np.einsum("ij,qjk,lk->qil", G[a], S, G[b])

    def finish_exact(self, xi_end, S_end):
        n = self.dims["x"]
        return xi_end.copy(), S_end[:, :n, :n].copy(), self.mtil, self.mdev


@dataclass
class DataSet:
    """Raw per-interval, per-probe moment records (gain independent)."""

    rl_grid: np.ndarray
    n: int
    nu: int
    nv: int
    n_substeps: int
    n_branches: int
    mode: str
    x_start: np.ndarray    # (N, s, n) branch states
    mean_end: np.ndarray   # (N, s, n) conditional means at interval ends
    cov_end: np.ndarray    # (N, s, n, n) conditional covariances at ends
    mtil: dict             # pair -> (N, s, da, db) mean-channel integrals
    mdev: dict             # pair -> (N, s, da, db) deviation-channel integrals
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_intervals(self) -> int:
        return len(self.rl_grid) - 1

    @property
    def n_probes(self) -> int:
        return self.x_start.shape[1]


def collect(plant: MeanFieldPlant, behavior: BehaviorPolicy, probe_x0: np.ndarray,
            rl_grid: np.ndarray, n_substeps: int, n_branches: int,
            seed: int, mode: str = "sampled") -> DataSet:
    """Run the behavior policy and gather the regression moment records.

    For every probe initial state and every sampling interval, conditional
    expectations are branch averages over ``n_branches`` fresh simulations
    from the probe's stored state (mode "sampled"), or exact moment-ODE
    solutions (mode "exact"); integrals are trapezoid sums over
    ``n_substeps`` sub-steps.  The population mean driving the dynamics
    comes from the plant and is recorded for diagnostics alongside the
    conditional records.
    """
    if mode not in ("sampled", "exact"):
        raise ValueError("mode must be 'sampled' or 'exact'")
    rl_grid = np.asarray(rl_grid, dtype=float)
    N = len(rl_grid) - 1
    gaps = np.diff(rl_grid)
    if N < 1 or np.any(gaps <= 0) or np.max(np.abs(gaps - gaps[0])) > 1e-9 * gaps[0]:
        raise ValueError("rl_grid must be increasing and uniform")
    K = int(n_substeps)
    probe_x0 = np.atleast_2d(np.asarray(probe_x0, dtype=float))
    s = probe_x0.shape[0]
    d = plant.dims
    fine = np.linspace(rl_grid[0], rl_grid[-1], N * K + 1)

    means = plant.population_means(behavior, fine, mode)
    probes = plant.probe_paths(behavior, probe_x0, fine, means, mode)

    x_start = np.empty((N, s, d.n))
    mean_end = np.empty((N, s, d.n))
    cov_end = np.empty((N, s, d.n, d.n))
    dims = {"x": d.n, "u": d.nu, "v": d.nv}
    mtil = {p: np.empty((N, s, dims[p[0]], dims[p[1]])) for p in _PAIRS}
    mdev = {p: np.empty((N, s, dims[p[0]], dims[p[1]])) for p in _PAIRS}

    for i in range(N):
        lo, hi = i * K, (i + 1) * K
        sub = fine[lo:hi + 1]
        x_start[i] = probes[:, lo, :]
        if mode == "sampled":
            msl = {a: means[a][lo:hi + 1] for a in means}
            me, ce, ti, dv = plant.branch_moments_sampled(
                behavior, x_start[i], i, sub, msl, n_branches, seed)
        else:
            me, ce, ti, dv = plant.branch_moments_exact(
                behavior, x_start[i], sub, np.tile(means["x"][lo], (s, 1)))
        mean_end[i], cov_end[i] = me, ce
        for p in _PAIRS:
            mtil[p][i] = ti[p]
            mdev[p][i] = dv[p]

    diag = {
        "population_mean_x": means["x"][::K].copy(),
        "conditional_mean_end": mean_end.copy(),
    }
    return DataSet(rl_grid=rl_grid, n=d.n, nu=d.nu, nv=d.nv, n_substeps=K,
                   n_branches=n_branches, mode=mode, x_start=x_start,
                   mean_end=mean_end, cov_end=cov_end, mtil=mtil, mdev=mdev,
                   diagnostics=diag)


# ---------------------------------------------------------------------------
# regression assembly and solve
# ---------------------------------------------------------------------------

@dataclass
class RegressionBatch:
    Phi: np.ndarray
    Theta: np.ndarray
    interval: int
    rank: int
    smallest_sv: float


def assemble(dataset: DataSet, interval: int, L, Lt, F, Ft, gamma: float,
             output_weight: np.ndarray | None = None,
             strict: bool = True) -> RegressionBatch:
    """Build the per-interval data matrix and target for the current gains.

    Rows follow the probe order; columns follow the unknown-block layout.
    The gain-dependent corrections re-weight the stored raw moments, so no
    re-simulation happens here.  ``output_weight`` is the published running
    state weight M'M (identity by default; the cost is designed, not
    learned).  Raises RankDeficient when the column rank falls short of the
    unknown count (pass strict=False to inspect anyway).
    """
    i = interval
    n, nu, nv = dataset.n, dataset.nu, dataset.nv
    L, Lt = np.atleast_2d(L), np.atleast_2d(Lt)
    F, Ft = np.atleast_2d(F), np.atleast_2d(Ft)
    s = dataset.n_probes
    g = xi_length(n, nu, nv)
    M2 = np.eye(n) if output_weight is None else np.atleast_2d(output_weight)

    til = {p: dataset.mtil[p][i] for p in _PAIRS}
    dev = {p: dataset.mdev[p][i] for p in _PAIRS}
    xstart = dataset.x_start[i]
    xend = dataset.mean_end[i]
    cend = dataset.cov_end[i]

    Phi = np.empty((s, g))
    Theta = np.empty(s)
    Wm = M2 + Lt.T @ Lt - gamma**2 * (Ft.T @ Ft)
    Wd = M2 + L.T @ L - gamma**2 * (F.T @ F)

    for q in range(s):
        row = []
        row.append(-quad_monomials(xend[q]))
        row.append(quad_monomials(xstart[q]))
        row.append(2.0 * (til[("u", "x")][q] - Lt @ til[("x", "x")][q]).reshape(-1))
        row.append(2.0 * (til[("v", "x")][q] - Ft @ til[("x", "x")][q]).reshape(-1))
        row.append(2.0 * (dev[("u", "x")][q] - L @ dev[("x", "x")][q]).reshape(-1))
        row.append(2.0 * (dev[("v", "x")][q] - F @ dev[("x", "x")][q]).reshape(-1))
        row.append(_uptri(symmetrize(til[("u", "u")][q] - Lt @ til[("x", "x")][q] @ Lt.T)))
        row.append(_uptri(symmetrize(til[("v", "v")][q] - Ft @ til[("x", "x")][q] @ Ft.T)))
        row.append(_uptri(symmetrize(dev[("u", "u")][q] - L @ dev[("x", "x")][q] @ L.T)))
        row.append(_uptri(symmetrize(dev[("v", "v")][q] - F @ dev[("x", "x")][q] @ F.T)))
        huv = dev[("u", "v")][q] - dev[("u", "x")][q] @ F.T \
            - L @ dev[("v", "x")][q].T + L @ dev[("x", "x")][q] @ F.T
        row.append(2.0 * huv.reshape(-1))
        huvm = til[("u", "v")][q] - til[("u", "x")][q] @ Ft.T \
            - Lt @ til[("v", "x")][q].T + Lt @ til[("x", "x")][q] @ Ft.T
        row.append(2.0 * huvm.reshape(-1))
        row.append(-_uptri(symmetrize(cend[q])))
        Phi[q] = np.concatenate(row)
        Theta[q] = np.trace(Wm @ til[("x", "x")][q]) + np.trace(Wd @ dev[("x", "x")][q])

    sv = np.linalg.svd(Phi, compute_uv=False)
    tol_rank = sv.max(initial=0.0) * max(Phi.shape) * np.finfo(float).eps
    rank = int(np.sum(sv > tol_rank))
    batch = RegressionBatch(Phi=Phi, Theta=Theta, interval=i, rank=rank,
                            smallest_sv=float(sv.min(initial=0.0)))
    if strict and rank < g:
        raise RankDeficient(rank, g)
    return batch


def xi_from_values(q_end: np.ndarray, q_start: np.ndarray,
                   blocks: IdentifiedBlocks, p_end: np.ndarray,
                   n: int, nu: int, nv: int) -> XiVector:
    """Pack known value matrices and blocks into the regression layout."""
    parts = [
        svec(symmetrize(q_end)),
        svec(symmetrize(q_start)),
        blocks.b2_mean.reshape(-1),
        blocks.b1_mean.reshape(-1),
        blocks.b2_dev.reshape(-1),
        blocks.b1_dev.reshape(-1),
        svec(symmetrize(blocks.d2_mean)),
        svec(symmetrize(blocks.d1_mean)),
        svec(symmetrize(blocks.d2_dev)),
        svec(symmetrize(blocks.d1_dev)),
        blocks.h_dev.reshape(-1),
        blocks.h_mean.reshape(-1),
        svec(symmetrize(p_end)),
    ]
    return XiVector(vec=np.concatenate(parts), n=n, nu=nu, nv=nv)


def solve_interval(batch: RegressionBatch, n: int, nu: int, nv: int) -> XiVector:
    """Minimum-norm least squares for the unknown block vector."""
    g = xi_length(n, nu, nv)
    if batch.rank < g:
        raise RankDeficient(batch.rank, g)
    sol, _res, rank, _sv = np.linalg.lstsq(batch.Phi, batch.Theta, rcond=None)
    if rank < g:
        raise RankDeficient(int(rank), g)
    return XiVector(vec=sol, n=n, nu=nu, nv=nv)


# ---------------------------------------------------------------------------
# the full loop
# ---------------------------------------------------------------------------

@dataclass
class RlSettings:
    gamma: float
    rl_grid: np.ndarray
    n_substeps: int = 10
    n_branches: int = 10000
    seed: int = 0
    data_mode: str = "sampled"
    eps: float = 1e-8
    eps1: float = 1e-9
    max_outer: int = 30
    max_inner: int = 60
    output_weight: np.ndarray | None = None  # published M'M (defaults to identity)


@dataclass
class PolicyIterate:
    """Interval-indexed gains with their evaluated value matrices."""

    L: np.ndarray        # (N, nu, n)
    Lt: np.ndarray
    F: np.ndarray        # (N, nv, n)
    Ft: np.ndarray
    P_end: np.ndarray    # (N, n, n) deviation value at each interval's right end
    Q_start: np.ndarray  # (N, n, n) mean value at each interval's left end
    Q_end: np.ndarray
    outer_rounds: int
    inner_rounds: list


@dataclass
class RlReport:
    outer_dists: list
    inner_dists: list
    rank: np.ndarray
    smallest_sv: np.ndarray
    q_mismatch: np.ndarray
    data_mode: str
    elapsed: float
    closure_gap: np.ndarray


def run_algorithm1(plant: MeanFieldPlant, settings: RlSettings,
                   init_gains: tuple, probe_x0: np.ndarray,
                   behavior: BehaviorPolicy | None = None,
                   dataset: DataSet | None = None) -> tuple[PolicyIterate, RlReport]:
    """Off-policy double policy iteration from once-collected data.

    ``init_gains`` = (L0, Lt0, F0, Ft0) must keep the closed loop bounded on
    the horizon; they seed both the behavior policy (with exploration) and
    the first iterate.  The inner loop re-solves the per-interval regressions
    and improves (L, Lt) until the evaluated (P, Q) schedules settle within
    ``eps1``; the outer loop then improves (F, Ft) until their change is
    within ``eps``.  Both loops run at least one pass.
    """
    t0 = time.perf_counter()
    L0, Lt0, F0, Ft0 = (np.atleast_2d(np.asarray(x, dtype=float)) for x in init_gains)
    d = plant.dims
    probe_x0 = np.atleast_2d(np.asarray(probe_x0, dtype=float))
    g = xi_length(d.n, d.nu, d.nv)
    if probe_x0.shape[0] < g:
        raise RankDeficient(probe_x0.shape[0], g)

    if behavior is None:
        behavior = BehaviorPolicy(L=L0, Lt=Lt0, F=F0, Ft=Ft0,
                                  exploration=make_rl_exploration(settings.seed,
                                                                  d.nu, d.nv))
    if dataset is None:
        dataset = collect(plant, behavior, probe_x0, settings.rl_grid,
                          settings.n_substeps, settings.n_branches,
                          settings.seed, settings.data_mode)
    Mq = settings.output_weight

    N = dataset.n_intervals
    tile = lambda m: np.repeat(m[None, :, :], N, axis=0)
    F, Ft = tile(F0), tile(Ft0)
    L, Lt = tile(L0), tile(Lt0)
    P_end = np.zeros((N, d.n, d.n))
    Q_start = np.zeros((N, d.n, d.n))
    Q_end = np.zeros((N, d.n, d.n))
    rank = np.zeros(N, dtype=int)
    smin = np.zeros(N)

    outer_dists: list[float] = []
    inner_dists: list[list[float]] = []
    inner_rounds: list[int] = []
    last_blocks: list[IdentifiedBlocks | None] = [None] * N

    for k in range(settings.max_outer):
        dists_k: list[float] = []
        for j in range(settings.max_inner):
            newL = np.empty_like(L)
            newLt = np.empty_like(Lt)
            newP = np.empty_like(P_end)
            newQs = np.empty_like(Q_start)
            newQe = np.empty_like(Q_end)
            for i in range(N):
                batch = assemble(dataset, i, L[i], Lt[i], F[i], Ft[i],
                                 settings.gamma, output_weight=Mq)
                xi = solve_interval(batch, d.n, d.nu, d.nv)
                blocks = xi.blocks()
                last_blocks[i] = blocks
                rank[i], smin[i] = batch.rank, batch.smallest_sv
                li, lti, _fi, _fti = improve(blocks, settings.gamma)
                newL[i], newLt[i] = li, lti
                newP[i] = xi.p_end
                newQs[i], newQe[i] = xi.q_start, xi.q_end
            dP = float(np.max(np.linalg.norm(newP - P_end, "fro", axis=(1, 2))))
            dQ = float(np.max(np.linalg.norm(newQs - Q_start, "fro", axis=(1, 2))))
            L, Lt = newL, newLt
            P_end, Q_start, Q_end = newP, newQs, newQe
            dists_k.append(max(dP, dQ))
            if max(dP, dQ) <= settings.eps1:
                break
        else:
            raise NoConvergence(settings.max_inner)
        inner_dists.append(dists_k)
        inner_rounds.append(len(dists_k))

        newF = np.empty_like(F)
        newFt = np.empty_like(Ft)
        for i in range(N):
            _li, _lti, fi, fti = improve(last_blocks[i], settings.gamma)
            newF[i], newFt[i] = fi, fti
        dF = float(np.max(np.linalg.norm(newF - F, "fro", axis=(1, 2))))
        dFt = float(np.max(np.linalg.norm(newFt - Ft, "fro", axis=(1, 2))))
        F, Ft = newF, newFt
        outer_dists.append(max(dF, dFt))
        if max(dF, dFt) <= settings.eps:
            break
    else:
        raise NoConvergence(settings.max_outer)

    q_mismatch = np.array([
        float(np.linalg.norm(Q_end[i] - Q_start[i + 1], "fro"))
        for i in range(N - 1)]) if N > 1 else np.zeros(0)
    closure_gap = np.array([
        float(np.max(np.abs(dataset.diagnostics["population_mean_x"][i]
                            - dataset.mean_end[i].mean(axis=0))))
        for i in range(N)])

    iterate = PolicyIterate(L=L, Lt=Lt, F=F, Ft=Ft, P_end=P_end,
                            Q_start=Q_start, Q_end=Q_end,
                            outer_rounds=k + 1, inner_rounds=inner_rounds)
    report = RlReport(outer_dists=outer_dists, inner_dists=inner_dists,
                      rank=rank, smallest_sv=smin, q_mismatch=q_mismatch,
                      data_mode=dataset.mode, elapsed=time.perf_counter() - t0,
                      closure_gap=closure_gap)
    return iterate, report


def policy_iteration_model_based(model: MeanFieldJumpModel, gamma: float, dt: float,
                                 init_gains: tuple, eps: float = 1e-11,
                                 eps1: float = 1e-12, max_outer: int = 40,
                                 max_inner: int = 80):
    """Model-based mirror of the data-driven loop (testing reference).

    Runs the same double iteration with exact policy evaluation on a fine
    grid and coefficient-block improvement; its fixed point matches the
    zero-sum Riccati pair.  Returns (grid, P, Q, L, Lt, F, Ft).
    """
    d = model.dims
    steps = round(model.T / dt)
    grid = np.linspace(0.0, model.T, steps + 1)
    npts = steps + 1
    L0, Lt0, F0, Ft0 = (np.atleast_2d(np.asarray(x, dtype=float)) for x in init_gains)
    L = np.repeat(L0[None], npts, axis=0)
    Lt = np.repeat(Lt0[None], npts, axis=0)
    F = np.repeat(F0[None], npts, axis=0)
    Ft = np.repeat(Ft0[None], npts, axis=0)
    P = np.zeros((npts, d.n, d.n))
    Q = np.zeros((npts, d.n, d.n))

    for _k in range(max_outer):
        for _j in range(max_inner):
            grid, Pn, Qn = pe_oracle(model, gamma, L, Lt, F, Ft, dt, gain_grid=grid)
            newL = np.empty_like(L)
            newLt = np.empty_like(Lt)
            for i in range(npts):
                blocks = blocks_from_model(model, Pn[i], Qn[i], L[i], Lt[i], F[i], Ft[i])
                li, lti, _fi, _fti = improve(blocks, gamma)
                newL[i], newLt[i] = li, lti
            dP = float(np.max(np.linalg.norm(Pn - P, "fro", axis=(1, 2))))
            dQ = float(np.max(np.linalg.norm(Qn - Q, "fro", axis=(1, 2))))
            P, Q, L, Lt = Pn, Qn, newL, newLt
            if max(dP, dQ) <= eps1:
                break
        newF = np.empty_like(F)
        newFt = np.empty_like(Ft)
        for i in range(npts):
            blocks = blocks_from_model(model, P[i], Q[i], L[i], Lt[i], F[i], Ft[i])
            _li, _lti, fi, fti = improve(blocks, gamma)
            newF[i], newFt[i] = fi, fti
        dF = float(np.max(np.linalg.norm(newF - F, "fro", axis=(1, 2))))
        dFt = float(np.max(np.linalg.norm(newFt - Ft, "fro", axis=(1, 2))))
        F, Ft = newF, newFt
        if max(dF, dFt) <= eps:
            break
    return grid, P, Q, L, Lt, F, Ft
