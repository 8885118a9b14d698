"""Interacting-particle Monte Carlo for the mean-field jump diffusion.

The expectations E[x], E[u], E[v] appearing in the dynamics are closed with
ensemble averages over ``n_particles`` interacting particles.  Each particle
carries an independent scalar Brownian increment per step and one Poisson
counter per jump atom; compensation subtracts the exact atom mass times the
step so compensated jumps contribute no drift.

Time stepping is Euler-Maruyama: within a step, drift, diffusion and jump
contributions add, and jump coefficients act on the pre-step state and
inputs.  All noise comes from counter-based streams keyed by (seed, lane,
step, particle key), so results are reproducible and independent of
scheduling; permuting particle keys permutes the realized paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import _rng
from ._numutil import fmt17, trapezoid
from .model import GainSchedule, MeanFieldJumpModel

__all__ = [
    "DivergedPath",
    "ZeroDisturbance",
    "NoiseSpec",
    "Exploration",
    "PolicySpec",
    "PathBundle",
    "make_exploration",
    "deterministic_x0",
    "gaussian_x0",
    "simulate",
    "empirical_gain",
    "estimate_cost",
    "export_bundle_csv",
]


class DivergedPath(Exception):
    def __init__(self, t: float, particle: int):
        self.t = t
        self.particle = particle
        super().__init__(f"path diverged at t={t:g} (particle {particle})")


class ZeroDisturbance(Exception):
    """The disturbance record has zero energy; no gain ratio exists."""


@dataclass(frozen=True)
class NoiseSpec:
    """Seeding and resolution of one Monte Carlo run."""

    seed: int
    n_particles: int
    dt: float


@dataclass(frozen=True)
class Exploration:
    """Additive input excitation: sinusoids plus optional white noise.

    The deterministic part of channel j is
    ``sin_amp[j] / sqrt(K) * sum_k sin(freqs[k] t + phases[j, k])``; the
    white part adds ``white_std[j]`` times a fresh standard normal per
    particle and step.
    """

    sin_amp: np.ndarray
    freqs: np.ndarray
    phases: np.ndarray
    white_std: np.ndarray

    def deterministic(self, t: float) -> np.ndarray:
        if self.freqs.size == 0:
            return np.zeros(self.sin_amp.shape[0])
        s = np.sin(self.freqs[None, :] * t + self.phases)
        return self.sin_amp * s.sum(axis=1) / np.sqrt(self.freqs.size)


def make_exploration(seed: int, dim: int, sin_amp: float = 0.0,
                     white_std: float = 0.0, n_sines: int = 10,
                     freq_range: tuple[float, float] = (1.0, 50.0)) -> Exploration:
    """Draw sinusoid frequencies/phases from a seeded generator."""
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(freq_range[0], freq_range[1], size=n_sines)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(dim, n_sines))
    return Exploration(
        sin_amp=np.full(dim, float(sin_amp)),
        freqs=freqs,
        phases=phases,
        white_std=np.full(dim, float(white_std)),
    )


@dataclass(frozen=True)
class PolicySpec:
    """Input policy for one channel.

    kind "gain" applies u = K_dev (x - xbar) + K_total xbar from a
    GainSchedule (xbar is the ensemble mean), optionally plus exploration;
    kind "zero" is the zero input; kind "external" delegates to a callable
    ``fn(step, t, X, xbar, draw)`` returning an (n_particles, dim) array,
    where ``draw(k)`` yields that step's (n_particles, k) standard normals.
    """

    kind: str
    dim: int
    grid: np.ndarray | None = None
    K_dev: np.ndarray | None = None
    K_total: np.ndarray | None = None
    exploration: Exploration | None = None
    external: Callable | None = None

    @staticmethod
    def from_gains(schedule: GainSchedule, channel: str,
                   exploration: Exploration | None = None) -> "PolicySpec":
        if channel == "control":
            kd, kt = schedule.K2, schedule.K2_total
        elif channel == "disturbance":
            kd, kt = schedule.K1, schedule.K1_total
        else:
            raise ValueError("channel must be 'control' or 'disturbance'")
        return PolicySpec(kind="gain", dim=kd.shape[1], grid=schedule.grid,
                          K_dev=kd, K_total=kt, exploration=exploration)

    @staticmethod
    def zero(dim: int) -> "PolicySpec":
        return PolicySpec(kind="zero", dim=dim)

    @staticmethod
    def white(dim: int, std: float) -> "PolicySpec":
        def fn(step, t, X, xbar, draw):
            return std * draw(dim)
        return PolicySpec(kind="external", dim=dim, external=fn)


@dataclass
class PathBundle:
    """Ensemble paths with inputs, disturbances, outputs and noise records."""

    grid: np.ndarray
    states: np.ndarray        # (N+1, Np, n)
    u: np.ndarray             # (N+1, Np, nu)
    v: np.ndarray             # (N+1, Np, nv)
    z: np.ndarray             # (N+1, Np, m+nu)
    mean_states: np.ndarray   # (N+1, n)
    jump_counts: np.ndarray   # (N, Np, n_atoms) realized Poisson counts
    seed: int

    @property
    def n_particles(self) -> int:
        return self.states.shape[1]


def deterministic_x0(x0) -> Callable:
    x0 = np.asarray(x0, dtype=float).reshape(-1)

    def sampler(keys, draw):
        return np.tile(x0, (len(keys), 1))
    return sampler


def gaussian_x0(mean, cov) -> Callable:
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    chol = np.linalg.cholesky(cov + 1e-15 * np.eye(len(mean)))

    def sampler(keys, draw):
        return mean + draw(len(mean)) @ chol.T
    return sampler


def _gain_index_map(sim_grid: np.ndarray, policy_grid: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(policy_grid, sim_grid + 1e-12, side="right") - 1
    return np.clip(idx, 0, len(policy_grid) - 1)


def simulate(model: MeanFieldJumpModel, u_policy: PolicySpec, v_policy: PolicySpec,
             noise: NoiseSpec, x0_sampler: Callable,
             particle_keys: np.ndarray | None = None) -> PathBundle:
    """Run the particle ensemble forward over [0, T].

    ``x0_sampler(keys, draw)`` must return the (n_particles, n) initial
    states; ``draw(k)`` supplies its (n_particles, k) standard normals.  The
    result is a pure function of (model, policies, noise, sampler, keys).
    """
    d = model.dims
    Np = noise.n_particles
    if Np < 2 and model.has_mean_field:
        raise ValueError("mean-field terms active: need at least 2 particles")
    steps = round(model.T / noise.dt)
    if steps < 1 or abs(steps * noise.dt - model.T) > 1e-9 * max(1.0, model.T):
        raise ValueError(f"dt={noise.dt} does not divide the horizon T={model.T}")
    grid = np.linspace(0.0, model.T, steps + 1)
    keys = np.arange(Np) if particle_keys is None else np.asarray(particle_keys)
    if len(keys) != Np:
        raise ValueError("particle_keys must have one entry per particle")

    atoms = model.jump_atoms
    n_atoms = len(atoms)
    dt = noise.dt

    X = np.empty((steps + 1, Np, d.n))
    U = np.empty((steps + 1, Np, d.nu))
    V = np.empty((steps + 1, Np, d.nv))
    counts_rec = np.zeros((steps, Np, n_atoms), dtype=np.int64)

    X[0] = x0_sampler(keys, lambda k: _rng.normals(noise.seed, _rng.LANE_X0, 0, keys, k))

    u_idx = (None if u_policy.grid is None else _gain_index_map(grid, u_policy.grid))
    v_idx = (None if v_policy.grid is None else _gain_index_map(grid, v_policy.grid))

    def eval_policy(policy: PolicySpec, idx_map, lane: int, m: int, x: np.ndarray):
        t = grid[m]
        xbar = x.mean(axis=0)
        if policy.kind == "zero":
            return np.zeros((Np, policy.dim))
        if policy.kind == "external":
            draw = lambda k: _rng.normals(noise.seed, lane, m, keys, k)
            return np.asarray(policy.external(m, t, x, xbar, draw), dtype=float)
        j = idx_map[m]
        out = (x - xbar) @ policy.K_dev[j].T + policy.K_total[j] @ xbar
        ex = policy.exploration
        if ex is not None:
            out = out + ex.deterministic(t)
            if np.any(ex.white_std):
                out = out + ex.white_std * _rng.normals(noise.seed, lane, m, keys, policy.dim)
        return out

    for m in range(steps):
        x = X[m]
        u = eval_policy(u_policy, u_idx, _rng.LANE_EXPLORE_U, m, x)
        v = eval_policy(v_policy, v_idx, _rng.LANE_EXPLORE_V, m, x)
        U[m], V[m] = u, v
        xbar = x.mean(axis=0)
        ubar = u.mean(axis=0)
        vbar = v.mean(axis=0)

        mean_in = model.Abar @ xbar + model.B2bar @ ubar + model.B1bar @ vbar
        drift = x @ model.A.T + u @ model.B2.T + v @ model.B1.T + mean_in
        mean_di = model.Cbar @ xbar + model.D2bar @ ubar + model.D1bar @ vbar
        diff = x @ model.C.T + u @ model.D2.T + v @ model.D1.T + mean_di

        xi = _rng.normals(noise.seed, _rng.LANE_BROWNIAN, m, keys, 1)[:, 0]
        x_next = x + dt * drift + np.sqrt(dt) * xi[:, None] * diff

        if n_atoms:
            uj = _rng.uniforms(noise.seed, _rng.LANE_JUMP, m, keys, n_atoms)
            for a_i, a in enumerate(atoms):
                lam = a.weight * dt
                counts = stats.poisson.ppf(uj[:, a_i], lam) if lam > 0 else np.zeros(Np)
                counts_rec[m, :, a_i] = counts.astype(np.int64)
                amp = x @ a.E.T + u @ a.F2.T + v @ a.F1.T \
                    + (a.Ebar @ xbar + a.F2bar @ ubar + a.F1bar @ vbar)
                x_next = x_next + (counts - lam)[:, None] * amp

        if not np.all(np.isfinite(x_next)) or np.max(np.abs(x_next)) > 1e12:
            bad = np.where(~np.all(np.isfinite(x_next), axis=1)
                           | (np.max(np.abs(x_next), axis=1) > 1e12))[0]
            raise DivergedPath(float(grid[m + 1]), int(bad[0]))
        X[m + 1] = x_next

    U[steps] = eval_policy(u_policy, u_idx, _rng.LANE_EXPLORE_U, steps, X[steps])
    V[steps] = eval_policy(v_policy, v_idx, _rng.LANE_EXPLORE_V, steps, X[steps])

    Z = np.concatenate([X @ model.M.T, U], axis=2)
    return PathBundle(grid=grid, states=X, u=U, v=V, z=Z,
                      mean_states=X.mean(axis=1), jump_counts=counts_rec,
                      seed=noise.seed)


def empirical_gain(bundle: PathBundle) -> float:
    """Realized output-to-disturbance energy ratio ||z|| / ||v||."""
    z2 = np.einsum("tpk,tpk->tp", bundle.z, bundle.z)
    v2 = np.einsum("tpk,tpk->tp", bundle.v, bundle.v)
    num = trapezoid(z2, bundle.grid, axis=0).mean()
    den = trapezoid(v2, bundle.grid, axis=0).mean()
    if den <= 0.0:
        raise ZeroDisturbance("disturbance record has zero energy")
    return float(np.sqrt(num / den))


def estimate_cost(bundle: PathBundle, kind: str, gamma: float = 0.0) -> tuple[float, float]:
    """Monte Carlo cost estimate and its standard error.

    kind "J2" integrates |z|^2; "J1" integrates gamma^2 |v|^2 - |z|^2 (the
    disturbance player's objective); "Jinf" its negative.  Per-particle time
    integrals use the trapezoidal rule; the ensemble mean and the standard
    error of that mean are returned.
    """
    z2 = np.einsum("tpk,tpk->tp", bundle.z, bundle.z)
    v2 = np.einsum("tpk,tpk->tp", bundle.v, bundle.v)
    if kind == "J2":
        integrand = z2
    elif kind == "J1":
        integrand = gamma**2 * v2 - z2
    elif kind == "Jinf":
        integrand = z2 - gamma**2 * v2
    else:
        raise ValueError("kind must be one of 'J1', 'J2', 'Jinf'")
    samples = trapezoid(integrand, bundle.grid, axis=0)
    n = samples.shape[0]
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(samples.mean()), se


def export_bundle_csv(bundle: PathBundle, path: str, per_particle: bool = False) -> None:
    """Write ensemble means (and optionally every particle) as CSV."""
    n = bundle.states.shape[2]
    nu = bundle.u.shape[2]
    nv = bundle.v.shape[2]
    cols = [("t", bundle.grid)]
    cols += [(f"mean_x{i + 1}", bundle.mean_states[:, i]) for i in range(n)]
    cols += [(f"mean_u{i + 1}", bundle.u.mean(axis=1)[:, i]) for i in range(nu)]
    cols += [(f"mean_v{i + 1}", bundle.v.mean(axis=1)[:, i]) for i in range(nv)]
    z2 = np.einsum("tpk,tpk->tp", bundle.z, bundle.z).mean(axis=1)
    cols.append(("mean_z_sq", z2))
    with open(path, "w") as fh:
        fh.write(",".join(name for name, _ in cols) + "\n")
        for i in range(len(bundle.grid)):
            fh.write(",".join(fmt17(col[i]) for _, col in cols) + "\n")
    if per_particle:
        ppath = path[:-4] + "_particles.csv" if path.endswith(".csv") else path + "_particles"
        with open(ppath, "w") as fh:
            head = ["t", "particle"] + [f"x{i + 1}" for i in range(n)] \
                + [f"u{i + 1}" for i in range(nu)] + [f"v{i + 1}" for i in range(nv)]
            fh.write(",".join(head) + "\n")
            for ti in range(len(bundle.grid)):
                for p in range(bundle.n_particles):
                    row = [fmt17(bundle.grid[ti]), str(p)]
                    row += [fmt17(v) for v in bundle.states[ti, p]]
                    row += [fmt17(v) for v in bundle.u[ti, p]]
                    row += [fmt17(v) for v in bundle.v[ti, p]]
                    fh.write(",".join(row) + "\n")
