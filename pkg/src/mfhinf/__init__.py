"""Finite-horizon H2/H-infinity control of mean-field jump diffusions.

Subpackages:
  model     system data types, validation, jump-measure integration
  riccati   coupled Riccati sweeps, bounded-real-lemma and Lyapunov solvers
  simulate  interacting-particle Monte Carlo and cost/gain estimation
  rl        model-free policy iteration from trajectory data
  cli       command-line workflows
"""

from . import model, riccati, rl, simulate  # noqa: F401

__version__ = "0.1.0"
