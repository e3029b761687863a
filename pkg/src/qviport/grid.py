"""Computational grid in the compressed coordinates.

States (t, x, y) are mapped to (t, z, v) with z the liquidation wealth and
v = sqrt(T - t) * y the maturity-compressed stock value.  The grid is a
tensor product of a wealth axis (z), a compressed stock axis (v, containing
zero), optionally a state axis (nu) for the mean-return model, and a ladder
of time-to-maturity levels marching away from the terminal seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .market import CostSpec

__all__ = [
    "DegenerateTimeError",
    "TransformedGrid",
    "transform_point",
    "inverse_transform",
    "uniform_nodes",
    "refined_z_nodes",
    "stretched_v_nodes",
    "tau_ladder",
]


class DegenerateTimeError(ValueError):
    """Raised for states at the terminal time with a nonzero stock account:
    the compression v = sqrt(T-t)*y cannot represent them."""


@dataclass(frozen=True)
class TransformedGrid:
    """Tensor grid: ``z_nodes`` (ascending, z_nodes[0] is the solvency
    floor), ``v_nodes`` (ascending, containing zero exactly), ``tau_levels``
    (ascending positive time-to-maturity values; the first entry is the seed
    offset), and optional ``nu_nodes``."""

    z_nodes: np.ndarray
    v_nodes: np.ndarray
    tau_levels: np.ndarray
    nu_nodes: np.ndarray | None = None

    def __post_init__(self):
        for name in ("z_nodes", "v_nodes", "tau_levels"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.ndim != 1 or arr.size < 2:
                raise ValueError(f"{name} must be a 1-d array with at least two entries")
            if not np.all(np.diff(arr) > 0.0):
                raise ValueError(f"{name} must be strictly increasing")
        if self.nu_nodes is not None:
            arr = np.asarray(self.nu_nodes, dtype=float)
            object.__setattr__(self, "nu_nodes", arr)
            if arr.ndim != 1 or arr.size < 3 or not np.all(np.diff(arr) > 0.0):
                raise ValueError("nu_nodes must be strictly increasing with >= 3 entries")
        if not np.any(self.v_nodes == 0.0):
            raise ValueError("v_nodes must contain 0 exactly")
        if self.tau_levels[0] <= 0.0:
            raise ValueError("tau levels must be strictly positive")

    @property
    def nz(self) -> int:
        return self.z_nodes.size

    @property
    def nv(self) -> int:
        return self.v_nodes.size

    @property
    def nn(self) -> int:
        return 1 if self.nu_nodes is None else self.nu_nodes.size

    @property
    def is_3d(self) -> bool:
        return self.nu_nodes is not None

    @property
    def dt(self) -> float:
        steps = np.diff(self.tau_levels)
        if steps.size and (np.max(steps) - np.min(steps)) > 1e-12 * np.max(steps):
            raise ValueError("tau ladder is not uniform")
        return float(self.tau_levels[0])

    @property
    def v_zero_index(self) -> int:
        return int(np.nonzero(self.v_nodes == 0.0)[0][0])

    def level_index(self, tau: float) -> int:
        """Index of the ladder entry matching ``tau`` to 1e-9 relative."""
        idx = int(np.argmin(np.abs(self.tau_levels - tau)))
        if abs(self.tau_levels[idx] - tau) > 1e-9 * max(1.0, tau):
            raise ValueError(f"tau={tau} is not a grid time level")
        return idx


def transform_point(t: float, x: float, y: float, costs: CostSpec, horizon: float):
    """Map (t, x, y) to (z, v).  States at t == horizon with y != 0 are
    rejected as degenerate."""
    tau = horizon - t
    if tau < 0.0:
        raise ValueError("t must not exceed the horizon")
    if tau == 0.0 and y != 0.0:
        raise DegenerateTimeError("terminal-time state with nonzero stock account")
    if y >= 0.0:
        z = x + (1.0 - costs.theta1) * y
    else:
        z = x + (1.0 + costs.theta2) * y
    return z, math.sqrt(tau) * y


def inverse_transform(t: float, z: float, v: float, costs: CostSpec, horizon: float):
    """Map (t, z, v) back to (x, y); inverse of :func:`transform_point`."""
    tau = horizon - t
    if tau < 0.0:
        raise ValueError("t must not exceed the horizon")
    if tau == 0.0:
        if v != 0.0:
            raise DegenerateTimeError("terminal-time state with nonzero stock account")
        return z, 0.0
    y = v / math.sqrt(tau)
    if y >= 0.0:
        x = z - (1.0 - costs.theta1) * y
    else:
        x = z - (1.0 + costs.theta2) * y
    return x, y


def uniform_nodes(lo: float, hi: float, n: int) -> np.ndarray:
    if not (hi > lo) or n < 2:
        raise ValueError("need hi > lo and n >= 2")
    return np.linspace(lo, hi, n)


def refined_z_nodes(
    z_min: float,
    z_max: float,
    n_coarse: int,
    refine_points: tuple[float, ...] = (),
    ratio: int = 8,
    width: float | None = None,
) -> np.ndarray:
    """Uniform wealth grid with locally refined windows.

    Around each refine point a window of half-width ``width`` (default four
    coarse cells) is re-meshed at spacing h_coarse / ratio, keeping the point
    itself a node.  Windows are clipped to the domain and merged with the
    coarse nodes; near-duplicates collapse.
    """
    coarse = np.linspace(z_min, z_max, n_coarse)
    h_c = (z_max - z_min) / (n_coarse - 1)
    if width is None:
        width = 4.0 * h_c
    h_f = h_c / ratio
    pools = [coarse]
    for p in refine_points:
        if not (z_min <= p <= z_max):
            raise ValueError(f"refine point {p} outside [{z_min}, {z_max}]")
        lo = max(z_min, p - width)
        hi = min(z_max, p + width)
        down = np.arange(p, lo - 0.5 * h_f, -h_f)[::-1]
        up = np.arange(p, hi + 0.5 * h_f, h_f)
        pools.append(np.clip(np.concatenate([down, up[1:]]), z_min, z_max))
    nodes = np.unique(np.concatenate(pools))
    # collapse near-duplicates introduced by window edges
    keep = [nodes[0]]
    for val in nodes[1:]:
        if val - keep[-1] > 0.25 * h_f:
            keep.append(val)
    keep[-1] = z_max
    out = np.array(keep)
    if out[0] != z_min:
        out[0] = z_min
    return out


def stretched_v_nodes(
    v_max: float,
    n: int,
    stretch: float = 4.0,
    include: tuple[float, ...] = (),
    short_sale: bool = True,
) -> np.ndarray:
    """Symmetric stock-axis grid on [-v_max, v_max], dense near zero.

    Uses a sinh profile with strength ``stretch`` (0 gives uniform).  Extra
    values in ``include`` (and their mirror images when two-sided) become
    exact nodes.  ``short_sale=False`` keeps the nonnegative half only.
    """
    if not (v_max > 0.0) or n < 5:
        raise ValueError("need v_max > 0 and n >= 5")
    m = n if n % 2 == 1 else n + 1
    xi = np.linspace(-1.0, 1.0, m)
    if stretch > 0.0:
        base = v_max * np.sinh(stretch * xi) / math.sinh(stretch)
    else:
        base = v_max * xi
    base[m // 2] = 0.0
    base[0], base[-1] = -v_max, v_max
    pool = [base]
    for val in include:
        if abs(val) >= v_max:
            raise ValueError(f"include value {val} outside (-v_max, v_max)")
        pool.append(np.array([val, -val]))
    nodes = np.unique(np.concatenate(pool))
    tol = 1e-9 * v_max
    keep = [nodes[0]]
    for val in nodes[1:]:
        if val - keep[-1] > tol:
            keep.append(val)
    out = np.array(keep)
    if not np.any(out == 0.0):
        out = np.sort(np.append(out, 0.0))
    if not short_sale:
        out = out[out >= 0.0]
    return out


def tau_ladder(tau_end: float, n_steps: int) -> np.ndarray:
    """Uniform ladder of time-to-maturity levels dt, 2dt, ..., tau_end."""
    if not (tau_end > 0.0) or n_steps < 1:
        raise ValueError("need tau_end > 0 and n_steps >= 1")
    dt = tau_end / n_steps
    return dt * np.arange(1, n_steps + 1)
