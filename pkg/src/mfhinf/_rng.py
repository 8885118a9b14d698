"""Counter-based random number generation.

Every random draw in the package is a pure function of a 64-bit seed plus a
tuple of integer coordinates (lane, step, particle/key, slot).  That makes
parallel evaluation order-independent and lets a particle's noise stream be
reconstructed in isolation: permuting particle keys permutes the realized
paths.

The generator is a SplitMix64-style avalanche hash on the packed coordinates,
mapped to uniforms and then to normals via Box-Muller.  Statistical quality is
adequate for Monte Carlo at the sample sizes used here.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = float(2.0**-53)

# lane identifiers; keep stable, they define the noise layout of a seed
LANE_BROWNIAN = 0
LANE_JUMP = 1
LANE_EXPLORE_U = 2
LANE_EXPLORE_V = 3
LANE_X0 = 4
LANE_BRANCH = 5


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x + _GOLDEN) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


def _counter_hash(seed: int, lane: int, step: int, keys: np.ndarray, slot: int) -> np.ndarray:
    """Avalanche hash of (seed, lane, step, key, slot), vectorized over keys."""
    h = np.full(keys.shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    for word in (lane, step, slot):
        h = _mix(h ^ np.uint64(word & 0xFFFFFFFFFFFFFFFF))
        h = _mix(h ^ keys.astype(np.uint64))
    return _mix(h)


def uniforms(seed: int, lane: int, step: int, keys: np.ndarray, nslots: int) -> np.ndarray:
    """Uniforms in (0, 1), shape (len(keys), nslots); slot s is column s."""
    keys = np.asarray(keys)
    out = np.empty((keys.size, nslots))
    for s in range(nslots):
        bits = _counter_hash(seed, lane, step, keys.ravel(), s)
        out[:, s] = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * _U53
    return out


def normals(seed: int, lane: int, step: int, keys: np.ndarray, nslots: int) -> np.ndarray:
    """Standard normals via Box-Muller, shape (len(keys), nslots)."""
    u = uniforms(seed, lane, step, np.asarray(keys), 2 * nslots)
    r = np.sqrt(-2.0 * np.log(u[:, 0::2]))
    return r * np.cos(2.0 * np.pi * u[:, 1::2])
