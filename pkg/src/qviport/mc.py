"""Monte Carlo valuation of explicit trading strategies.

Three strategies are supported: hold-until-barrier (keep the initial
position until the liquidation value reaches the target or the floor, then
liquidate and wait), pure no-trade with liquidation at the horizon, and
rollouts of a solved region map (trade node-by-node to the nearest
no-trade boundary in the labeled direction at every step).

Paths stream in fixed-size chunks, each driven by its own counter-based
generator keyed on (seed, chunk index), and reductions run in chunk order,
so results are bit-reproducible regardless of host parallelism.  All
simulation happens in forward units: cash is constant and the stock carries
its excess return.  Constant-premium segments use exact log-normal steps
with a bridge correction for barrier hits inside a step; the mean-reverting
premium model uses log-Euler steps with correlated state noise, switching
to 10x sub-stepping with per-substep crossing checks near barriers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .market import Position
from .problem import ProblemSpec

__all__ = ["StrategySpec", "McEstimate", "simulate_strategy", "CHUNK"]

CHUNK = 4096
SUBSTEPS = 10


@dataclass(frozen=True)
class StrategySpec:
    """What to simulate: strategy kind, initial position, and sampling plan.

    ``target``/``floor`` bound the hold-until-barrier strategy in
    liquidation-value terms; ``region_maps`` supplies the label ladder for
    policy rollouts (any number of time levels, nearest level wins).
    """

    kind: str
    position: Position
    paths: int
    seed: int
    dt: float
    target: float | None = None
    floor: float | None = None
    region_maps: tuple = ()

    def __post_init__(self):
        if self.kind not in ("pi_star", "no_trade", "region_policy"):
            raise ValueError(f"unknown strategy kind: {self.kind!r}")
        if self.paths < 1:
            raise ValueError("paths must be >= 1")
        if not (self.dt > 0.0):
            raise ValueError("dt must be positive")
        if self.kind == "pi_star" and self.target is None:
            raise ValueError("pi_star requires a target level")
        if self.kind == "region_policy" and not self.region_maps:
            raise ValueError("region_policy requires at least one region map")


@dataclass
class McEstimate:
    mean: float
    std_error: float
    paths_used: int
    hit_target_fraction: float
    hit_floor_fraction: float
    expired_fraction: float
    warning: str | None = None

    def to_json_dict(self) -> dict:
        return asdict(self)


def _liquidation_coeff(y: float, costs) -> float:
    return (1.0 - costs.theta1) * y if y >= 0.0 else (1.0 + costs.theta2) * y


def _bridge_touch_prob(s0, s1, b, sig2dt):
    """Conditional probability that the log-normal bridge between s0 and s1
    touched level b, for endpoints on a common side of b."""
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        expo = -2.0 * np.log(b / s0) * np.log(b / s1) / sig2dt
        return np.where(expo < 0.0, np.exp(np.clip(expo, -745.0, 0.0)), 1.0)


def _chunk_sizes(paths: int):
    out = []
    start = 0
    k = 0
    while start < paths:
        n = min(CHUNK, paths - start)
        out.append((k, n))
        start += n
        k += 1
    return out


class _Accumulator:
    def __init__(self):
        self.n = 0
        self.s = 0.0
        self.s2 = 0.0
        self.hit_target = 0
        self.hit_floor = 0

    def add(self, payoff: np.ndarray, hit_t: np.ndarray, hit_f: np.ndarray):
        self.n += payoff.size
        self.s += float(payoff.sum())
        self.s2 += float((payoff * payoff).sum())
        self.hit_target += int(hit_t.sum())
        self.hit_floor += int(hit_f.sum())

    def estimate(self, warning=None) -> McEstimate:
        mean = self.s / self.n
        var = max(self.s2 / self.n - mean * mean, 0.0) * self.n / max(self.n - 1, 1)
        se = math.sqrt(var / self.n)
        return McEstimate(
            mean=mean,
            std_error=se,
            paths_used=self.n,
            hit_target_fraction=self.hit_target / self.n,
            hit_floor_fraction=self.hit_floor / self.n,
            expired_fraction=1.0 - (self.hit_target + self.hit_floor) / self.n,
            warning=warning,
        )


class _Barrier:
    """One absorbing level in stock units for a frozen position."""

    def __init__(self, s_level: float, is_target: bool, z_level: float):
        self.s_level = s_level
        self.is_up = s_level > 1.0
        self.is_target = is_target
        self.z_level = z_level

    def crossed(self, s: np.ndarray) -> np.ndarray:
        return s >= self.s_level if self.is_up else s <= self.s_level


def _barrier_set(x0, c, target, floor):
    """Barriers for a frozen position, floor first so that simultaneous
    triggers within one step resolve to the floor (conservative credit)."""
    out = []

    def level(z):
        if c == 0.0:
            return None
        lvl = (z - x0) / c
        return lvl if lvl > 0.0 else None

    sf = level(floor)
    if sf is not None:
        out.append(_Barrier(sf, False, floor))
    if target is not None:
        st = level(target)
        if st is not None and (sf is None or not math.isclose(sf, st)):
            out.append(_Barrier(st, True, target))
    return out


def _held_segment_chunk(rng, m, problem, spec, x0, y0, want_target):
    """One chunk of paths holding the initial position, absorbed at the
    floor and (optionally) the target."""
    model, costs, u = problem.model, problem.costs, problem.utility
    horizon = problem.horizon
    n_steps = max(int(math.ceil(horizon / spec.dt - 1e-12)), 1)
    dt = horizon / n_steps
    sigma = model.sigma
    floor = spec.floor if spec.floor is not None else problem.floor
    c = _liquidation_coeff(y0, costs)
    z0 = x0 + c

    payoff = np.zeros(m)
    hit_t = np.zeros(m, dtype=bool)
    hit_f = np.zeros(m, dtype=bool)

    target = spec.target if want_target else None
    if target is not None and z0 >= target:
        payoff[:] = u.value(z0)
        hit_t[:] = True
        return payoff, hit_t, hit_f
    if z0 <= floor:
        payoff[:] = u.value(floor)
        hit_f[:] = True
        return payoff, hit_t, hit_f
    barriers = _barrier_set(x0, c, target, floor)

    s = np.ones(m)
    nu = np.full(m, model.nu_bar) if model.is_gmr else None
    alive = np.ones(m, dtype=bool)

    def credit(global_idx, z_real, is_target):
        payoff[global_idx] = u.values(np.maximum(z_real, floor))
        if is_target:
            hit_t[global_idx] = True
        else:
            hit_f[global_idx] = True
        alive[global_idx] = False

    for _ in range(n_steps):
        if model.is_gmr:
            n1 = rng.standard_normal((m, SUBSTEPS))
            n2 = rng.standard_normal((m, SUBSTEPS))
        else:
            n1 = rng.standard_normal(m)
            uu = rng.random((m, 2))
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            continue
        s_old = s[idx]

        if model.is_gmr:
            # sub-step near any barrier so crossings are checked on a finer
            # time scale; elsewhere a single Euler step suffices
            near = np.zeros(idx.size, dtype=bool)
            for b in barriers:
                near |= np.abs(np.log(s_old / b.s_level)) < 4.0 * sigma * math.sqrt(dt)
            n_sub = np.where(near, SUBSTEPS, 1)
            s_c = s_old.copy()
            nu_c = nu[idx].copy()
            stopped = np.zeros(idx.size, dtype=bool)
            for j in range(SUBSTEPS):
                act = (n_sub > j) & ~stopped
                if not act.any():
                    break
                h = dt / n_sub[act]
                rt = np.sqrt(h)
                w1 = n1[idx[act], j]
                w2 = n2[idx[act], j]
                s_c[act] = s_c[act] * np.exp((sigma * nu_c[act] - 0.5 * sigma * sigma) * h + sigma * rt * w1)
                nu_c[act] = nu_c[act] + model.kappa * (model.nu_bar - nu_c[act]) * h + model.zeta * rt * (
                    model.rho * w1 + math.sqrt(1.0 - model.rho**2) * w2
                )
                for b in barriers:
                    hit = act & b.crossed(s_c) & ~stopped
                    if hit.any():
                        credit(idx[hit], x0 + c * s_c[hit], b.is_target)
                        stopped |= hit
            s[idx] = s_c
            nu[idx] = nu_c
        else:
            s_new = s_old * np.exp((model.eta - 0.5 * sigma * sigma) * dt + sigma * math.sqrt(dt) * n1[idx])
            stopped = np.zeros(idx.size, dtype=bool)
            for col, b in enumerate(barriers):
                crossed = b.crossed(s_new) & ~stopped
                inside = ~b.crossed(s_new) & ~stopped
                p = _bridge_touch_prob(s_old, np.where(inside, s_new, s_old), b.s_level, sigma * sigma * dt)
                touched = inside & (uu[idx, col] < p)
                if crossed.any():
                    credit(idx[crossed], x0 + c * s_new[crossed], b.is_target)
                if touched.any():
                    # an interior touch liquidates exactly at the barrier
                    credit(idx[touched], np.full(int(touched.sum()), b.z_level), b.is_target)
                stopped |= crossed | touched
            s[idx] = s_new

    live = np.flatnonzero(alive)
    if live.size:
        payoff[live] = u.values(np.maximum(x0 + c * s[live], floor))
    return payoff, hit_t, hit_f


def _nearest_index(nodes: np.ndarray, q: np.ndarray) -> np.ndarray:
    i = np.clip(np.searchsorted(nodes, q), 0, nodes.size - 1)
    j = np.clip(i - 1, 0, nodes.size - 1)
    pick_lower = np.abs(nodes[j] - q) <= np.abs(nodes[i] - q)
    return np.where(pick_lower, j, i)


def _region_policy_chunk(rng, m, problem, spec):
    """Policy rollout: at each step trade node-by-node toward the no-trade
    boundary indicated by the nearest region map, then hold for one step."""
    from .regions import SR, BR

    model, costs, u = problem.model, problem.costs, problem.utility
    horizon = problem.horizon
    n_steps = max(int(math.ceil(horizon / spec.dt - 1e-12)), 1)
    dt = horizon / n_steps
    sigma = model.sigma
    floor = spec.floor if spec.floor is not None else problem.floor
    maps = sorted(spec.region_maps, key=lambda r: -r.tau)
    map_taus = np.array([r.tau for r in maps])

    x = np.full(m, float(spec.position.x))
    shares = np.full(m, float(spec.position.y))
    s = np.ones(m)
    nu = np.full(m, model.nu_bar) if model.is_gmr else None
    alive = np.ones(m, dtype=bool)
    payoff = np.zeros(m)
    hit_f = np.zeros(m, dtype=bool)

    def liquidation(xa, stock):
        return np.where(stock >= 0.0, xa + (1.0 - costs.theta1) * stock, xa + (1.0 + costs.theta2) * stock)

    for step in range(n_steps):
        n1 = rng.standard_normal(m)
        n2 = rng.standard_normal(m) if model.is_gmr else None
        uu = rng.random(m)
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            continue
        tau_rem = horizon - step * dt
        rmap = maps[int(np.argmin(np.abs(map_taus - tau_rem)))]
        sqt = math.sqrt(tau_rem)
        vn = rmap.v_nodes

        zc = liquidation(x[idx], shares[idx] * s[idx])
        broke = zc <= floor + 1e-14
        if broke.any():
            gi = idx[broke]
            payoff[gi] = u.value(floor)
            hit_f[gi] = True
            alive[gi] = False
            idx = idx[~broke]
        if idx.size == 0:
            continue

        # rebalance one node at a time until every path sits on a
        # non-trading label or a lattice edge
        for _ in range(vn.size):
            stock = shares[idx] * s[idx]
            zc = liquidation(x[idx], stock)
            iz = _nearest_index(rmap.z_nodes, zc)
            jv = _nearest_index(vn, stock * sqt)
            if rmap.is_3d:
                kn = _nearest_index(rmap.nu_nodes, nu[idx])
            else:
                kn = np.zeros(idx.size, dtype=int)
            lab = rmap.labels[iz, jv, kn]
            sell = (lab == SR) & (jv > 0)
            buy = (lab == BR) & (jv < vn.size - 1)
            if not (sell.any() or buy.any()):
                break
            if sell.any():
                si = idx[sell]
                new_shares = vn[jv[sell] - 1] / sqt / s[si]
                x[si] += (1.0 - costs.theta1) * (shares[si] - new_shares) * s[si]
                shares[si] = new_shares
            if buy.any():
                bi = idx[buy]
                new_shares = vn[jv[buy] + 1] / sqt / s[bi]
                x[bi] -= (1.0 + costs.theta2) * (new_shares - shares[bi]) * s[bi]
                shares[bi] = new_shares

        s_old = s[idx]
        if model.is_gmr:
            drift = (sigma * nu[idx] - 0.5 * sigma * sigma) * dt
            s_new = s_old * np.exp(drift + sigma * math.sqrt(dt) * n1[idx])
            nu[idx] = nu[idx] + model.kappa * (model.nu_bar - nu[idx]) * dt + model.zeta * math.sqrt(dt) * (
                model.rho * n1[idx] + math.sqrt(1.0 - model.rho**2) * n2[idx]
            )
        else:
            s_new = s_old * np.exp((model.eta - 0.5 * sigma * sigma) * dt + sigma * math.sqrt(dt) * n1[idx])
        s[idx] = s_new

        # the position is frozen within the step, so the floor is a fixed
        # stock-level barrier and the bridge correction applies
        coef = np.where(shares[idx] >= 0.0, 1.0 - costs.theta1, 1.0 + costs.theta2) * shares[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            s_floor = np.where(coef != 0.0, (floor - x[idx]) / coef, np.nan)
        reachable = np.isfinite(s_floor) & (s_floor > 0.0)
        z_now = liquidation(x[idx], shares[idx] * s[idx])
        crossed = reachable & (z_now <= floor)
        if model.is_gmr:
            touched = np.zeros(idx.size, dtype=bool)
        else:
            same_side = reachable & ~crossed & (
                (s_floor < np.minimum(s_old, s_new)) | (s_floor > np.maximum(s_old, s_new))
            )
            pb = np.zeros(idx.size)
            if same_side.any():
                pb[same_side] = _bridge_touch_prob(
                    s_old[same_side], s_new[same_side], s_floor[same_side], sigma * sigma * dt
                )
            touched = same_side & (uu[idx] < pb)
        stop = crossed | touched
        if stop.any():
            gi = idx[stop]
            payoff[gi] = u.value(floor)
            hit_f[gi] = True
            alive[gi] = False

    live = np.flatnonzero(alive)
    if live.size:
        z_term = liquidation(x[live], shares[live] * s[live])
        payoff[live] = u.values(np.maximum(z_term, floor))
    return payoff, np.zeros(m, dtype=bool), hit_f


def simulate_strategy(spec: StrategySpec, problem: ProblemSpec) -> McEstimate:
    """Estimate the expected terminal utility of the given strategy.

    The simulation horizon is ``problem.horizon``; payoffs evaluate the
    terminal utility at the liquidation value, with absorption at the floor
    (and at the target for the hold-until-barrier strategy, crediting the
    realized post-liquidation wealth on discrete overshoot).
    """
    costs = problem.costs
    pos = spec.position
    if pos.liquidation_value(costs) < problem.floor - 1e-12:
        raise ValueError("initial position is insolvent")
    floor = spec.floor if spec.floor is not None else problem.floor
    if spec.kind == "pi_star":
        z0 = pos.liquidation_value(costs)
        if not (floor <= z0 < spec.target):
            raise ValueError("pi_star needs floor <= initial liquidation value < target")

    warning = None
    if spec.kind == "pi_star":
        c = _liquidation_coeff(pos.y, costs)
        if c != 0.0:
            s_t = (spec.target - pos.x) / c
            if s_t > 0.0:
                gap = abs(math.log(s_t))
                if problem.model.sigma * math.sqrt(spec.dt) > 0.25 * max(gap, 1e-300):
                    warning = "dt is coarse relative to the barrier distance; hitting times may be under-resolved"

    acc = _Accumulator()
    for k, m in _chunk_sizes(spec.paths):
        rng = np.random.Generator(np.random.Philox(key=np.array([spec.seed, k], dtype=np.uint64)))
        if spec.kind == "region_policy":
            payoff, hit_t, hit_f = _region_policy_chunk(rng, m, problem, spec)
        else:
            payoff, hit_t, hit_f = _held_segment_chunk(
                rng, m, problem, spec, float(pos.x), float(pos.y), spec.kind == "pi_star"
            )
        acc.add(payoff, hit_t, hit_f)
    return acc.estimate(warning)
