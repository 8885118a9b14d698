"""Small shared numeric helpers."""

from __future__ import annotations

import numpy as np


def symmetrize(x: np.ndarray) -> np.ndarray:
    """Project onto the symmetric part, 0.5*(X + X')."""
    return 0.5 * (x + np.swapaxes(x, -1, -2))


def min_eig(x: np.ndarray) -> float:
    """Smallest eigenvalue of the symmetrized matrix."""
    return float(np.linalg.eigvalsh(symmetrize(x))[0])


def max_eig(x: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(x))[-1])


def asym(x: np.ndarray) -> float:
    """Largest absolute deviation from symmetry."""
    return float(np.max(np.abs(x - np.swapaxes(x, -1, -2)), initial=0.0))


def trapezoid(y: np.ndarray, x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.trapezoid(y, x, axis=axis)


def fmt17(x: float) -> str:
    """Format a float at 17 significant digits (round-trip exact)."""
    return format(float(x), ".17g")
