"""System data model for controlled mean-field jump diffusions.

The plant is a linear stochastic differential equation whose drift, diffusion
and jump coefficients depend on the state x, the control u, the disturbance v
and on their expectations E[x], E[u], E[v].  The driving noise is a scalar
Brownian motion plus a compensated Poisson random measure whose intensity is a
finite atomic measure: each atom contributes its own set of jump coefficient
matrices weighted by the atom's mass.

Conventions
-----------
* All coefficients are constant in time.  Solvers take the model by value, so
  piecewise-constant schedules can be layered on later without changing this
  file.
* The controlled output is z = (M x, u); the control weight in the output is
  the identity.
* Mean-field ("bar") coefficients multiply the expectations: the drift is
  A x + Abar E[x] + B2 u + B2bar E[u] + B1 v + B1bar E[v], and likewise for
  the diffusion (C, D2, D1) and each jump atom (E, F2, F1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "Dims",
    "JumpAtom",
    "MeanFieldJumpModel",
    "DisturbanceAtom",
    "DisturbanceOnlyModel",
    "GainSchedule",
    "validate",
    "jump_integral",
    "close_loop",
    "load_model",
    "save_model",
    "demo_jump_model",
    "demo_rl_model",
]


def _arr(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class Dims:
    """State (n), control (nu) and disturbance (nv) dimensions."""

    n: int
    nu: int
    nv: int


@dataclass(frozen=True)
class JumpAtom:
    """One atom of the jump measure: mass and the six jump coefficients."""

    weight: float
    E: np.ndarray
    Ebar: np.ndarray
    F1: np.ndarray
    F1bar: np.ndarray
    F2: np.ndarray
    F2bar: np.ndarray

    def __post_init__(self):
        for name in ("E", "Ebar", "F1", "F1bar", "F2", "F2bar"):
            object.__setattr__(self, name, _arr(getattr(self, name)))


@dataclass(frozen=True)
class MeanFieldJumpModel:
    """Constant-coefficient mean-field jump-diffusion plant on [0, T]."""

    dims: Dims
    A: np.ndarray
    Abar: np.ndarray
    B1: np.ndarray
    B1bar: np.ndarray
    B2: np.ndarray
    B2bar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    D1: np.ndarray
    D1bar: np.ndarray
    D2: np.ndarray
    D2bar: np.ndarray
    M: np.ndarray
    T: float
    jump_atoms: tuple[JumpAtom, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for name in ("A", "Abar", "B1", "B1bar", "B2", "B2bar", "C", "Cbar",
                     "D1", "D1bar", "D2", "D2bar", "M"):
            object.__setattr__(self, name, _arr(getattr(self, name)))
        object.__setattr__(self, "jump_atoms", tuple(self.jump_atoms))

    @property
    def has_mean_field(self) -> bool:
        bars = [self.Abar, self.B1bar, self.B2bar, self.Cbar, self.D1bar, self.D2bar]
        bars += [a.Ebar for a in self.jump_atoms]
        bars += [a.F1bar for a in self.jump_atoms]
        bars += [a.F2bar for a in self.jump_atoms]
        return any(np.any(b) for b in bars)

    def without_jumps(self) -> "MeanFieldJumpModel":
        return replace(self, jump_atoms=())


@dataclass(frozen=True)
class DisturbanceAtom:
    """Jump atom of a disturbance-only system (no control channel)."""

    weight: float
    E: np.ndarray
    Ebar: np.ndarray
    F: np.ndarray
    Fbar: np.ndarray

    def __post_init__(self):
        for name in ("E", "Ebar", "F", "Fbar"):
            object.__setattr__(self, name, _arr(getattr(self, name)))


@dataclass(frozen=True)
class DisturbanceOnlyModel:
    """Mean-field jump diffusion driven by the disturbance alone.

    This is the input system of the stochastic bounded real lemma: drift
    A x + Abar E[x] + B v + Bbar E[v], diffusion C x + Cbar E[x] + D v
    + Dbar E[v], jump atoms (E, Ebar, F, Fbar), output z = M x.
    """

    n: int
    nv: int
    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray
    M: np.ndarray
    T: float
    jump_atoms: tuple[DisturbanceAtom, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for name in ("A", "Abar", "B", "Bbar", "C", "Cbar", "D", "Dbar", "M"):
            object.__setattr__(self, name, _arr(getattr(self, name)))
        object.__setattr__(self, "jump_atoms", tuple(self.jump_atoms))


@dataclass(frozen=True)
class GainSchedule:
    """Feedback gains on a time grid.

    K1/K2 multiply the state deviation x - E[x]; the stored totals
    K1_total = K1 + (mean gain) multiply E[x] directly, so a policy reads
    u = K2 (x - E[x]) + K2_total E[x].
    """

    grid: np.ndarray
    K1: np.ndarray        # (N+1, nv, n)
    K1_total: np.ndarray  # (N+1, nv, n)
    K2: np.ndarray        # (N+1, nu, n)
    K2_total: np.ndarray  # (N+1, nu, n)

    def __post_init__(self):
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))
        for name in ("K1", "K1_total", "K2", "K2_total"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    def index_at(self, t: float) -> int:
        """Grid interval containing t (left-continuous lookup)."""
        i = int(np.searchsorted(self.grid, t, side="right")) - 1
        return min(max(i, 0), len(self.grid) - 1)


def _check_shape(violations: list[str], name: str, mat: np.ndarray, shape: tuple[int, int]):
    if mat.shape != shape:
        violations.append(f"{name}: expected shape {shape}, got {mat.shape}")


def validate(model: MeanFieldJumpModel) -> list[str]:
    """Return every invariant violation of the model; empty means valid."""
    v: list[str] = []
    d = model.dims
    for name, val in (("n", d.n), ("nu", d.nu), ("nv", d.nv)):
        if int(val) <= 0:
            v.append(f"dims.{name}: must be a positive integer, got {val}")
    if model.T <= 0:
        v.append(f"T: horizon must be positive, got {model.T}")
    if v:
        return v
    n, nu, nv = d.n, d.nu, d.nv
    for name in ("A", "Abar", "C", "Cbar"):
        _check_shape(v, name, getattr(model, name), (n, n))
    for name in ("B1", "B1bar", "D1", "D1bar"):
        _check_shape(v, name, getattr(model, name), (n, nv))
    for name in ("B2", "B2bar", "D2", "D2bar"):
        _check_shape(v, name, getattr(model, name), (n, nu))
    if model.M.shape[1] != n:
        v.append(f"M: expected {model.M.shape[0]}x{n}, got {model.M.shape}")
    for k, atom in enumerate(model.jump_atoms):
        if atom.weight < 0:
            v.append(f"jump_atoms[{k}].weight: must be nonnegative, got {atom.weight}")
        for name in ("E", "Ebar"):
            _check_shape(v, f"jump_atoms[{k}].{name}", getattr(atom, name), (n, n))
        for name in ("F1", "F1bar"):
            _check_shape(v, f"jump_atoms[{k}].{name}", getattr(atom, name), (n, nv))
        for name in ("F2", "F2bar"):
            _check_shape(v, f"jump_atoms[{k}].{name}", getattr(atom, name), (n, nu))
    return v


def jump_integral(atoms: Sequence, P: np.ndarray, left: str, right: str,
                  shape: tuple[int, int] | None = None) -> np.ndarray:
    """Finite-measure integral sum_a weight_a * L_a' P R_a.

    `left` and `right` name atom coefficient fields (e.g. "E", "F1").  The
    sum is exact; with no atoms a zero matrix is returned, which requires
    `shape` to be supplied.
    """
    P = np.asarray(P, dtype=float)
    if len(atoms) == 0:
        if shape is None:
            raise ValueError("jump_integral over no atoms needs an explicit result shape")
        return np.zeros(shape)
    out = None
    for atom in atoms:
        L = getattr(atom, left)
        R = getattr(atom, right)
        if L.shape[0] != P.shape[0] or R.shape[0] != P.shape[1]:
            raise ValueError(
                f"jump_integral: selected fields {left}{L.shape} / {right}{R.shape} "
                f"incompatible with P{P.shape}")
        term = atom.weight * (L.T @ P @ R)
        out = term if out is None else out + term
    return out


def close_loop(model: MeanFieldJumpModel, K2: np.ndarray,
               K2_total: np.ndarray) -> DisturbanceOnlyModel:
    """Substitute the control feedback u = K2 (x - E[x]) + K2_total E[x].

    Returns the disturbance-driven closed-loop system.  The output weight is
    the stack of M with the deviation gain K2, so the closed-loop output
    accounts for the control energy in the deviation channel.
    """
    K2 = np.atleast_2d(np.asarray(K2, dtype=float))
    K2_total = np.atleast_2d(np.asarray(K2_total, dtype=float))
    d = model.dims
    if K2.shape != (d.nu, d.n) or K2_total.shape != (d.nu, d.n):
        raise ValueError(f"gain shapes must be ({d.nu}, {d.n})")
    Kt2 = K2_total - K2
    atoms = tuple(
        DisturbanceAtom(
            weight=a.weight,
            E=a.E + a.F2 @ K2,
            Ebar=a.Ebar + a.F2 @ Kt2 + a.F2bar @ K2_total,
            F=a.F1,
            Fbar=a.F1bar,
        )
        for a in model.jump_atoms
    )
    return DisturbanceOnlyModel(
        n=d.n,
        nv=d.nv,
        A=model.A + model.B2 @ K2,
        Abar=model.Abar + model.B2 @ Kt2 + model.B2bar @ K2_total,
        B=model.B1,
        Bbar=model.B1bar,
        C=model.C + model.D2 @ K2,
        Cbar=model.Cbar + model.D2 @ Kt2 + model.D2bar @ K2_total,
        D=model.D1,
        Dbar=model.D1bar,
        M=np.vstack([model.M, K2]),
        T=model.T,
        jump_atoms=atoms,
    )


# ----------------------------------------------------------------------------
# model files
#
# JSON schema (all matrices are row-major nested lists):
# {
#   "dims": {"n": int, "nu": int, "nv": int},
#   "horizon": float,
#   "matrices": {"A": [[..]], "Abar": [[..]], "B1": [[..]], ..., "M": [[..]]},
#   "jump_atoms": [{"weight": w, "E": [[..]], "Ebar": [[..]],
#                   "F1": [[..]], "F1bar": [[..]], "F2": [[..]], "F2bar": [[..]]}]
# }
# ----------------------------------------------------------------------------

_MATRIX_KEYS = ("A", "Abar", "B1", "B1bar", "B2", "B2bar",
                "C", "Cbar", "D1", "D1bar", "D2", "D2bar", "M")
_ATOM_KEYS = ("E", "Ebar", "F1", "F1bar", "F2", "F2bar")


def load_model(path: str) -> MeanFieldJumpModel:
    """Read a model from the JSON schema documented in this module."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        dims = Dims(int(doc["dims"]["n"]), int(doc["dims"]["nu"]), int(doc["dims"]["nv"]))
        mats = {k: np.asarray(doc["matrices"][k], dtype=float) for k in _MATRIX_KEYS}
        atoms = tuple(
            JumpAtom(weight=float(a["weight"]),
                     **{k: np.asarray(a[k], dtype=float) for k in _ATOM_KEYS})
            for a in doc.get("jump_atoms", [])
        )
        return MeanFieldJumpModel(dims=dims, T=float(doc["horizon"]),
                                  jump_atoms=atoms, **mats)
    except KeyError as exc:
        raise ValueError(f"model file {path}: missing key {exc}") from exc


def save_model(model: MeanFieldJumpModel, path: str) -> None:
    doc = {
        "dims": {"n": model.dims.n, "nu": model.dims.nu, "nv": model.dims.nv},
        "horizon": model.T,
        "matrices": {k: getattr(model, k).tolist() for k in _MATRIX_KEYS},
        "jump_atoms": [
            {"weight": a.weight, **{k: getattr(a, k).tolist() for k in _ATOM_KEYS}}
            for a in model.jump_atoms
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def demo_jump_model() -> MeanFieldJumpModel:
    """Bundled two-dimensional jump-diffusion benchmark (one unit-mass atom)."""
    atom = JumpAtom(
        weight=1.0,
        E=[[-1.0, 1.0], [3.0, 1.0]],
        Ebar=[[-1.0, 0.0], [3.0, 1.0]],
        F1=[[2.0], [1.0]],
        F1bar=[[2.0], [2.0]],
        F2=[[2.0], [1.0]],
        F2bar=[[2.0], [2.0]],
    )
    return MeanFieldJumpModel(
        dims=Dims(2, 1, 1),
        A=[[1.0, 2.0], [-2.0, 1.0]],
        Abar=[[1.0, -2.0], [2.0, 1.0]],
        B1=[[1.0], [1.0]],
        B1bar=[[0.5], [-1.0]],
        B2=[[1.0], [1.0]],
        B2bar=[[2.0], [-1.0]],
        C=[[1.0, 2.0], [2.0, 1.0]],
        Cbar=[[1.0, 2.0], [2.0, 1.0]],
        D1=[[2.0], [1.0]],
        D1bar=[[1.0], [1.0]],
        D2=[[2.0], [-2.0]],
        D2bar=[[-2.0], [2.0]],
        M=np.eye(2),
        T=0.1,
        jump_atoms=(atom,),
    )


def demo_rl_model() -> MeanFieldJumpModel:
    """Bundled two-dimensional diffusion-only mean-field benchmark.

    Mean-field coupling enters only through the input channels (B*bar,
    D2bar); the state's own mean does not feed back (Abar = Cbar = 0), which
    keeps the population closure of simulated data exact under deviation-free
    behavior gains.  The disturbance is drift-only (D1 = D1bar = 0), so the
    saddle-point gains have no cross-channel diffusion coupling and the
    closed-form zero-sum Riccati pair is an exact reference.
    """
    return MeanFieldJumpModel(
        dims=Dims(2, 1, 1),
        A=[[0.4, -0.3], [0.2, 0.1]],
        Abar=np.zeros((2, 2)),
        B1=[[0.5], [-0.4]],
        B1bar=[[0.2], [0.3]],
        B2=[[1.0], [0.6]],
        B2bar=[[0.4], [-0.5]],
        C=[[0.3, 0.1], [-0.1, 0.2]],
        Cbar=np.zeros((2, 2)),
        D1=[[0.0], [0.0]],
        D1bar=[[0.0], [0.0]],
        D2=[[0.35], [0.2]],
        D2bar=[[-0.15], [0.25]],
        M=np.eye(2),
        T=0.1,
        jump_atoms=(),
    )
