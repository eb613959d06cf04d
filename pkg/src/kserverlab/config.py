"""Numeric tolerances and shared defaults.

The underlying model is exact real dynamics; every tolerance below is an
artifact choice.  All of them can be overridden per call or through the
harness config file.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    feasibility: float = 1e-9      # constraint activity / point membership
    complementarity: float = 1e-8  # cone-projection KKT residuals
    drift: float = 1e-7            # max feasibility violation along a trajectory
    time: float = 1e-9             # event localization (bisection) window
    orthogonality: float = 1e-6    # |<g, v>| for carried normal generators
    mass: float = 1e-6             # per-level mass conservation
    sorted_slack: float = 1e-7     # coordinate sortedness along trajectories
    slope: float = 1e-3            # finite-difference potential slopes
    dual_norm: float = 1e-6        # velocity bound ||v||_* <= ||f|| + tol


DEFAULT_TOLS = Tolerances()

# Integer scale applied to distances/weights inside the min-cost-flow
# solvers; keeps them exact on scaled integers.
FLOW_COST_SCALE = 10**6
