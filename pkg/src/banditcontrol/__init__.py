"""Bandit online optimization with memory and partially observed control.

Subpackages
-----------
geometry
    PSD matrices, sphere sampling, metric projections.
losses
    Affine-memory loss family, curvature certificates, synthetic instances.
bco
    Second-order bandit learners (occasional-update and delayed variants)
    plus a first-order spherical-smoothing baseline.
control
    Partially observed linear dynamics, disturbance-feedback policies, and
    the reduction from control to bandit optimization with memory.
harness
    Comparators, regret accounting, scaling sweeps, bound diagnostics.
checks
    Registered fast invariant suites behind the ``check`` subcommand.
cli
    Config-driven entry points (``bcom run``, ``control run``, ``sweep``,
    ``check``).
"""

from . import bco, checks, cli, control, geometry, harness, losses

__all__ = ["bco", "checks", "cli", "control", "geometry", "harness", "losses"]
__version__ = "0.1.0"
