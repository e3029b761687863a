import math

import numpy as np
import pytest

from qviport.analytic import first_passage_prob, norm_cdf
from qviport.grid import TransformedGrid, stretched_v_nodes, tau_ladder
from qviport.market import CostSpec, MarketModel, Position
from qviport.mc import CHUNK, McEstimate, StrategySpec, simulate_strategy
from qviport.problem import BoundaryKind, ProblemSpec
from qviport.regions import classify_regions
from qviport.solver import SolverParams, solve_qvi
from qviport.utility import goal_reaching

COSTS = CostSpec(theta1=1e-3, theta2=1e-3)


def goal_problem(model=None, horizon=0.05):
    return ProblemSpec(
        model=model or MarketModel(kind="gbm", sigma=0.3, eta=0.0),
        costs=COSTS,
        utility=goal_reaching(1.0),
        horizon=horizon,
        boundary=BoundaryKind.GOAL,
    )


def barrier_spec(x=0.0, y=0.95, paths=20_000, seed=77, dt=1e-3, kind="pi_star"):
    return StrategySpec(
        kind=kind, position=Position(x=x, y=y), paths=paths, seed=seed,
        dt=dt, target=1.0,
    )


class TestDeterminism:
    def test_bit_identical_repeats(self):
        prob = goal_problem()
        a = simulate_strategy(barrier_spec(), prob)
        b = simulate_strategy(barrier_spec(), prob)
        assert a.mean == b.mean
        assert a.std_error == b.std_error
        assert a.hit_target_fraction == b.hit_target_fraction

    def test_seed_changes_result(self):
        prob = goal_problem()
        a = simulate_strategy(barrier_spec(seed=77), prob)
        b = simulate_strategy(barrier_spec(seed=78), prob)
        assert a.mean != b.mean

    def test_chunk_boundary(self):
        prob = goal_problem()
        est = simulate_strategy(barrier_spec(paths=CHUNK + 1), prob)
        assert est.paths_used == CHUNK + 1

    def test_json_round_trip(self):
        prob = goal_problem()
        est = simulate_strategy(barrier_spec(paths=500), prob)
        d = est.to_json_dict()
        assert set(d) == {
            "mean", "std_error", "paths_used", "hit_target_fraction",
            "hit_floor_fraction", "expired_fraction", "warning",
        }
        assert McEstimate(**d) == est


class TestCashOnlyExact:
    def test_below_goal_pays_nothing(self):
        est = simulate_strategy(barrier_spec(x=0.7, y=0.0, paths=100), goal_problem())
        assert est.mean == 0.0
        assert est.std_error == 0.0
        assert est.expired_fraction == 1.0

    def test_above_goal_is_immediate(self):
        est = simulate_strategy(barrier_spec(x=0.7, y=0.0, paths=100), goal_problem())
        rich = StrategySpec(kind="no_trade", position=Position(x=1.2, y=0.0),
                            paths=100, seed=1, dt=1e-3)
        est2 = simulate_strategy(rich, goal_problem())
        assert est.mean == 0.0
        assert est2.mean == 1.0


class TestBarrierCrossCheck:
    def test_hold_until_goal_matches_crossing_probability(self):
        # all-stock start below the goal: the payoff is the indicator of the
        # frozen position's liquidation value reaching the goal, a single
        # up-barrier crossing of a drifted Brownian log price
        x, y = 0.0, 0.95
        prob = goal_problem()
        est = simulate_strategy(barrier_spec(x=x, y=y), prob)
        c = (1.0 - 1e-3) * y
        b = math.log(1.0 / c)
        exact = first_passage_prob(-0.5 * 0.3 ** 2, 0.3, b, 0.05)
        assert abs(est.mean - exact) <= 3.0 * est.std_error
        assert est.hit_target_fraction == est.mean
        assert est.warning is None

    def test_no_trade_matches_endpoint_probability(self):
        x, y = 0.0, 0.95
        prob = goal_problem()
        spec = StrategySpec(kind="no_trade", position=Position(x=x, y=y),
                            paths=20_000, seed=5, dt=1e-3)
        est = simulate_strategy(spec, prob)
        c = (1.0 - 1e-3) * y
        b = math.log(1.0 / c)
        tau = 0.05
        exact = norm_cdf((-0.5 * 0.3 ** 2 * tau - b) / (0.3 * math.sqrt(tau)))
        assert abs(est.mean - exact) <= 3.0 * est.std_error

    def test_holding_to_barrier_dominates_expiry(self):
        prob = goal_problem()
        held = simulate_strategy(barrier_spec(seed=9), prob)
        passive = StrategySpec(kind="no_trade", position=Position(x=0.0, y=0.95),
                               paths=20_000, seed=9, dt=1e-3)
        est = simulate_strategy(passive, prob)
        assert held.mean > est.mean

    def test_floor_absorbs_first(self):
        # leveraged long position: the wealth floor sits below, the goal
        # above, and every path resolves to one of the three outcomes
        spec = StrategySpec(kind="pi_star", position=Position(x=-0.8, y=1.0),
                            paths=20_000, seed=3, dt=1e-3, target=1.0)
        est = simulate_strategy(spec, goal_problem(horizon=1.0))
        assert est.hit_floor_fraction > 0.0
        assert est.hit_target_fraction > 0.0
        assert est.hit_target_fraction + est.hit_floor_fraction + est.expired_fraction == pytest.approx(1.0)
        assert est.mean == est.hit_target_fraction

    def test_coarse_step_warning(self):
        spec = StrategySpec(kind="pi_star", position=Position(x=0.0, y=0.999),
                            paths=100, seed=1, dt=0.05, target=1.0)
        est = simulate_strategy(spec, goal_problem())
        assert est.warning is not None and "coarse" in est.warning


class TestMeanRevertingModel:
    GMR = MarketModel(kind="gmr", sigma=0.3, kappa=5.0, nu_bar=0.0933,
                      zeta=0.065, rho=-0.7)

    def test_deterministic_and_bounded(self):
        prob = goal_problem(model=self.GMR)
        a = simulate_strategy(barrier_spec(paths=5_000, seed=21), prob)
        b = simulate_strategy(barrier_spec(paths=5_000, seed=21), prob)
        assert a.mean == b.mean
        assert 0.0 < a.mean < 1.0

    def test_frozen_state_matches_constant_premium(self):
        # with no reversion and negligible state noise the premium stays at
        # its starting level, so crossings follow the constant-drift law;
        # the Euler stepper misses some interior touches, hence the slack
        frozen = MarketModel(kind="gmr", sigma=0.3, kappa=0.0, nu_bar=0.5,
                             zeta=1e-12, rho=0.0)
        est = simulate_strategy(barrier_spec(paths=20_000, seed=13),
                                goal_problem(model=frozen))
        c = (1.0 - 1e-3) * 0.95
        b = math.log(1.0 / c)
        exact = first_passage_prob(0.3 * 0.5 - 0.5 * 0.3 ** 2, 0.3, b, 0.05)
        driftless = first_passage_prob(-0.5 * 0.3 ** 2, 0.3, b, 0.05)
        assert abs(est.mean - exact) <= 3.0 * est.std_error + 0.02
        assert est.mean > driftless


@pytest.fixture(scope="module")
def rollout():
    prob = goal_problem()
    grid = TransformedGrid(
        z_nodes=np.linspace(0.0, 1.0, 41),
        v_nodes=stretched_v_nodes(4.0, 21, stretch=4.0),
        tau_levels=tau_ladder(0.05, 5),
    )
    sol = solve_qvi(prob, grid, SolverParams(store_taus=(0.01, 0.03, 0.05)))
    maps = tuple(classify_regions(sol, tau=t) for t in (0.01, 0.03, 0.05))
    spec = StrategySpec(kind="region_policy", position=Position(x=0.5, y=0.0),
                        paths=10_000, seed=11, dt=1e-3, region_maps=maps)
    return prob, spec


class TestRegionPolicy:

    def test_rollout_is_deterministic(self, rollout):
        prob, spec = rollout
        a = simulate_strategy(spec, prob)
        b = simulate_strategy(spec, prob)
        assert a.mean == b.mean

    def test_rollout_payoff_valid(self, rollout):
        prob, spec = rollout
        est = simulate_strategy(spec, prob)
        assert 0.0 <= est.mean <= 1.0
        assert est.hit_target_fraction == 0.0
        assert est.hit_floor_fraction + est.expired_fraction == pytest.approx(1.0)

    def test_trading_from_cash_creates_value(self, rollout):
        # from all cash at half the goal, following the computed regions
        # must beat never trading (which pays zero for certain)
        prob, spec = rollout
        est = simulate_strategy(spec, prob)
        assert est.mean > 0.2


class TestValidation:
    def test_spec_arguments(self):
        pos = Position(x=0.0, y=0.5)
        with pytest.raises(ValueError):
            StrategySpec(kind="martingale", position=pos, paths=10, seed=1, dt=1e-3)
        with pytest.raises(ValueError):
            StrategySpec(kind="no_trade", position=pos, paths=0, seed=1, dt=1e-3)
        with pytest.raises(ValueError):
            StrategySpec(kind="no_trade", position=pos, paths=10, seed=1, dt=0.0)
        with pytest.raises(ValueError):
            StrategySpec(kind="pi_star", position=pos, paths=10, seed=1, dt=1e-3)
        with pytest.raises(ValueError):
            StrategySpec(kind="region_policy", position=pos, paths=10, seed=1, dt=1e-3)

    def test_insolvent_start_rejected(self):
        spec = StrategySpec(kind="no_trade", position=Position(x=-2.0, y=1.0),
                            paths=10, seed=1, dt=1e-3)
        with pytest.raises(ValueError):
            simulate_strategy(spec, goal_problem())

    def test_barrier_ordering_rejected(self):
        spec = StrategySpec(kind="pi_star", position=Position(x=1.5, y=0.0),
                            paths=10, seed=1, dt=1e-3, target=1.0)
        with pytest.raises(ValueError):
            simulate_strategy(spec, goal_problem())
