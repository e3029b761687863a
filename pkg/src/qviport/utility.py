"""Terminal utility functions over liquidation wealth.

A utility is a finite ordered list of branches, each valid from its start
point up to the next branch.  Branches are elementary (constant plus a
signed power of a shifted argument), which keeps jump locations and one-sided
limits exact rather than estimated numerically.

All utilities are required to be nondecreasing, right-continuous, and bounded
above by C1 + C2 * z**p for witnesses (C1, C2, p) with 0 < p < 1.  Values are
defined for z >= floor; the left limit at the floor is defined to equal the
value there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

__all__ = [
    "Branch",
    "Utility",
    "UtilityValidationError",
    "ValidationReport",
    "goal_reaching",
    "aspiration",
    "s_shaped",
    "crra",
    "constant",
    "make_utility",
    "eval_with_limits",
    "validate_assumption",
]


class UtilityValidationError(ValueError):
    """Raised when constructor parameters violate a documented constraint."""


@dataclass(frozen=True)
class Branch:
    """Elementary branch  f(z) = const + coeff * (s*(z - shift))**exponent
    with s = -1 when ``reflected`` (power of (shift - z)), else s = +1.
    The power part is treated as zero where its base is negative."""

    const: float = 0.0
    coeff: float = 0.0
    exponent: float = 1.0
    shift: float = 0.0
    reflected: bool = False

    def __call__(self, z):
        if self.coeff == 0.0:
            return self.const + np.zeros_like(np.asarray(z, dtype=float)) \
                if isinstance(z, np.ndarray) else self.const
        base = (self.shift - z) if self.reflected else (z - self.shift)
        base = np.maximum(base, 0.0) if isinstance(z, np.ndarray) else max(base, 0.0)
        return self.const + self.coeff * base ** self.exponent


@dataclass(frozen=True)
class Utility:
    """Piecewise utility: ``starts[i]`` is where ``branches[i]`` takes over.

    ``starts`` is strictly increasing and ``starts[0]`` is the domain floor.
    ``growth`` stores the witnesses (C1, C2, p) for the polynomial upper
    bound.  ``name`` is a short tag used in reports and exports.
    """

    starts: tuple[float, ...]
    branches: tuple[Branch, ...]
    growth: tuple[float, float, float]
    name: str = "custom"

    def __post_init__(self):
        if len(self.starts) != len(self.branches) or not self.starts:
            raise UtilityValidationError("starts and branches must align and be nonempty")
        if any(b <= a for a, b in zip(self.starts, self.starts[1:])):
            raise UtilityValidationError("starts must be strictly increasing")
        c1, c2, p = self.growth
        if not (0.0 < p < 1.0):
            raise UtilityValidationError("growth exponent p must lie in (0, 1)")
        if c2 < 0.0:
            raise UtilityValidationError("growth coefficient C2 must be nonnegative")

    @property
    def floor(self) -> float:
        return self.starts[0]

    def _branch_index(self, z: float) -> int:
        # rightmost branch with start <= z
        idx = 0
        for i, s in enumerate(self.starts):
            if z >= s:
                idx = i
            else:
                break
        return idx

    def value(self, z: float) -> float:
        if z < self.floor:
            raise ValueError(f"z={z} below domain floor {self.floor}")
        return float(self.branches[self._branch_index(z)](z))

    def values(self, z: np.ndarray) -> np.ndarray:
        """Vectorized right-continuous evaluation."""
        z = np.asarray(z, dtype=float)
        if np.any(z < self.floor - 1e-15):
            raise ValueError("array contains points below the domain floor")
        out = np.empty(z.shape, dtype=float)
        idx = np.searchsorted(np.asarray(self.starts), z, side="right") - 1
        idx = np.clip(idx, 0, len(self.branches) - 1)
        for i, br in enumerate(self.branches):
            m = idx == i
            if np.any(m):
                out[m] = br(z[m])
        return out

    @property
    def jump_points(self) -> tuple[tuple[float, float, float], ...]:
        """Exact jump list: (location, left limit, jump size), ascending.

        Only genuine discontinuities are listed; branch seams where the two
        sides agree do not appear.
        """
        jumps = []
        for i in range(1, len(self.starts)):
            s = self.starts[i]
            left = float(self.branches[i - 1](s))
            right = float(self.branches[i](s))
            if right != left:
                jumps.append((s, left, right - left))
        return tuple(jumps)

    def left_limit(self, z: float) -> float:
        """Limit from below; at the floor this is defined as the value."""
        if z < self.floor:
            raise ValueError(f"z={z} below domain floor {self.floor}")
        if z == self.floor:
            return self.value(z)
        i = self._branch_index(z)
        if z == self.starts[i] and i > 0:
            return float(self.branches[i - 1](z))
        return float(self.branches[i](z))


def eval_with_limits(u: Utility, z: float) -> tuple[float, float, float]:
    """Return (value, left limit, jump size) at ``z``; jump = value - left."""
    v = u.value(z)
    left = u.left_limit(z)
    return v, left, v - left


def goal_reaching(z_bar: float, floor: float = 0.0) -> Utility:
    """Indicator of reaching the goal: 0 below ``z_bar``, 1 at and above."""
    if not (z_bar > floor):
        raise UtilityValidationError("goal level z_bar must exceed the floor")
    return Utility(
        starts=(floor, z_bar),
        branches=(Branch(const=0.0), Branch(const=1.0)),
        growth=(1.0, 1e-12, 0.5),
        name="goal_reaching",
    )


def aspiration(p: float, c1: float, c2: float, z_bar: float, floor: float = 0.0) -> Utility:
    """Power base with an upgraded power branch from ``z_bar`` on:
    z**p / p below, c1 + c2 * z**p / p at and above.  Requires an actual
    upward jump at ``z_bar``."""
    if not (0.0 < p < 1.0):
        raise UtilityValidationError("p must lie in (0, 1)")
    if c2 <= 0.0:
        raise UtilityValidationError("c2 must be positive")
    if not (z_bar > floor >= 0.0):
        raise UtilityValidationError("need z_bar > floor >= 0")
    left = z_bar ** p / p
    right = c1 + c2 * z_bar ** p / p
    if right <= left:
        raise UtilityValidationError("branch at z_bar must jump upward: c1 + c2*z_bar^p/p > z_bar^p/p")
    return Utility(
        starts=(floor, z_bar),
        branches=(Branch(coeff=1.0 / p, exponent=p), Branch(const=c1, coeff=c2 / p, exponent=p)),
        growth=(abs(c1) + 1.0, max(c2, 1.0) / p, p),
        name="aspiration",
    )


def s_shaped(lam: float, p: float, z0: float, floor: float = 0.0) -> Utility:
    """Reference-point utility: -lam * (z0 - z)**p below ``z0`` and
    (z - z0)**p above; continuous at ``z0``, finite at the floor."""
    if not (0.0 < p < 1.0):
        raise UtilityValidationError("p must lie in (0, 1)")
    if lam <= 0.0:
        raise UtilityValidationError("loss weight lam must be positive")
    if not (z0 > floor >= 0.0):
        raise UtilityValidationError("need reference point z0 > floor >= 0")
    return Utility(
        starts=(floor, z0),
        branches=(
            Branch(coeff=-lam, exponent=p, shift=z0, reflected=True),
            Branch(coeff=1.0, exponent=p, shift=z0),
        ),
        growth=(1.0, 1.0, p),
        name="s_shaped",
    )


def crra(p: float, floor: float = 0.0) -> Utility:
    """Concave power utility z**p / p."""
    if not (0.0 < p < 1.0):
        raise UtilityValidationError("p must lie in (0, 1)")
    return Utility(
        starts=(floor,),
        branches=(Branch(coeff=1.0 / p, exponent=p),),
        growth=(1.0, 1.0 / p, p),
        name="crra",
    )


def constant(level: float = 1.0, floor: float = 0.0) -> Utility:
    """Degenerate flat utility; useful as an exactly solvable reference."""
    return Utility(
        starts=(floor,),
        branches=(Branch(const=level),),
        growth=(abs(level) + 1.0, 1e-12, 0.5),
        name="constant",
    )


_FACTORIES = {
    "goal_reaching": goal_reaching,
    "aspiration": aspiration,
    "s_shaped": s_shaped,
    "crra": crra,
    "constant": constant,
}


def make_utility(kind: str, **params) -> Utility:
    """Construct a utility by kind name; parameters are validated and
    violations raise :class:`UtilityValidationError` naming the constraint."""
    try:
        factory = _FACTORIES[kind]
    except KeyError:
        raise UtilityValidationError(
            f"unknown utility kind {kind!r}; expected one of {sorted(_FACTORIES)}"
        ) from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise UtilityValidationError(f"bad parameters for {kind}: {exc}") from None


@dataclass
class ValidationReport:
    """Outcome of the shape checks on a utility."""

    monotone: bool
    right_continuous: bool
    growth_bounded: bool
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.monotone and self.right_continuous and self.growth_bounded


def validate_assumption(
    u: Utility,
    c1: float | None = None,
    c2: float | None = None,
    p: float | None = None,
    n_samples: int = 4000,
    z_max: float | None = None,
) -> ValidationReport:
    """Check nondecrease, right-continuity, and the polynomial upper bound.

    Sampling is dense on [floor, z_max] and exact at branch seams; growth
    witnesses default to the ones stored on the utility.
    """
    if c1 is None or c2 is None or p is None:
        c1, c2, p = u.growth
    if z_max is None:
        z_max = max(10.0, 4.0 * max(u.starts) + 10.0)
    report = ValidationReport(True, True, True)

    zs = np.linspace(u.floor, z_max, n_samples)
    # include both sides of every seam
    seams = np.asarray(u.starts[1:], dtype=float)
    eps = 1e-9 * max(1.0, z_max)
    probe = np.unique(np.concatenate([zs, seams, seams - eps, seams + eps]))
    probe = probe[probe >= u.floor]
    vals = u.values(probe)

    dif = np.diff(vals)
    bad = np.where(dif < -1e-12)[0]
    if bad.size:
        report.monotone = False
        report.failures.append(
            f"monotonicity fails near z={probe[bad[0]]:.6g} (drop {dif[bad[0]]:.3g})"
        )

    for i, s in enumerate(u.starts[1:], start=1):
        v, left, jump = eval_with_limits(u, s)
        if jump < -1e-12:
            report.monotone = False
            report.failures.append(f"downward jump at z={s:.6g}")
        # the limit from above is the incoming branch evaluated at the seam
        # (a nextafter probe would confuse a steep power slope with a jump)
        v_right = float(u.branches[i](s))
        if not math.isclose(v, v_right, rel_tol=1e-9, abs_tol=1e-9):
            report.right_continuous = False
            report.failures.append(f"right-continuity fails at z={s:.6g}")

    bound = c1 + c2 * np.maximum(probe, 0.0) ** p
    over = vals - bound
    k = int(np.argmax(over))
    if over[k] > 1e-9 * max(1.0, abs(bound[k])):
        report.growth_bounded = False
        report.failures.append(
            f"growth bound fails at z={probe[k]:.6g}: U={vals[k]:.6g} > {bound[k]:.6g}"
        )
    return report
