"""Problem bundle: market, costs, solvency floor, horizon, utility, and the
boundary-condition family used by the solver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .market import CostSpec, MarketModel
from .utility import Utility

__all__ = ["BoundaryKind", "ProblemSpec"]


class BoundaryKind:
    """Names for the supported boundary families.

    GOAL: Dirichlet U(floor) / U(goal) at the wealth edges and the
    concavified value at the far stock edges.
    POWER_FAR_FIELD: Dirichlet at the upper wealth edge equal to the
    frictionless power-utility value of the top branch; zero-slope rows at
    the far stock edges (used for the jump-upgrade and reference-point
    utilities whose goal level sits inside the domain).
    CUSTOM: caller-provided callables.
    """

    GOAL = "goal"
    POWER_FAR_FIELD = "power_far_field"
    CUSTOM = "custom"


@dataclass(frozen=True)
class ProblemSpec:
    """Everything that defines one control problem instance.

    ``floor`` is the solvency level K (wealth axis starts there), ``horizon``
    the terminal time T with valuation at time-to-maturity tau = T - t.
    ``short_sale`` switches the stock domain between two-sided and
    nonnegative.  ``boundary`` picks the boundary family; CUSTOM requires
    ``custom_dirichlet(tau, z, v) -> value`` (vectorized) supplied alongside.
    """

    model: MarketModel
    costs: CostSpec
    utility: Utility
    floor: float = 0.0
    horizon: float = 1.0
    boundary: str = BoundaryKind.GOAL
    short_sale: bool = True
    custom_dirichlet: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.horizon > 0.0) or not math.isfinite(self.horizon):
            raise ValueError("horizon must be positive and finite")
        if not math.isfinite(self.floor):
            raise ValueError("floor must be finite")
        if abs(self.utility.floor - self.floor) > 1e-12:
            raise ValueError("utility domain floor must coincide with the solvency floor")
        if self.boundary not in (
            BoundaryKind.GOAL,
            BoundaryKind.POWER_FAR_FIELD,
            BoundaryKind.CUSTOM,
        ):
            raise ValueError(f"unknown boundary kind {self.boundary!r}")
        if self.boundary == BoundaryKind.CUSTOM and self.custom_dirichlet is None:
            raise ValueError("custom boundary requires custom_dirichlet")
        if self.boundary == BoundaryKind.GOAL:
            jumps = self.utility.jump_points
            if len(jumps) != 1:
                raise ValueError("goal boundary family expects exactly one utility jump")

    @property
    def goal_level(self) -> float:
        """Location of the topmost utility jump (if any)."""
        jumps = self.utility.jump_points
        if not jumps:
            raise ValueError("utility has no jump")
        return jumps[-1][0]
