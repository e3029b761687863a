import json
import math

import numpy as np
import pytest

from qviport.analytic import browne_target
from qviport.grid import TransformedGrid, stretched_v_nodes, tau_ladder
from qviport.market import CostSpec, MarketModel
from qviport.problem import BoundaryKind, ProblemSpec
from qviport.regions import (
    AMBIGUOUS,
    BR,
    EDGE,
    NR,
    REGION_NAMES,
    SR,
    RegionMap,
    classify_regions,
    compare_frictionless,
    export_fields,
    write_plot_script,
)
from qviport.solver import SolverParams, solve_qvi
from qviport.utility import goal_reaching

COSTS = CostSpec(theta1=1e-3, theta2=1e-3)


def goal_problem():
    return ProblemSpec(
        model=MarketModel(kind="gbm", sigma=0.3, eta=0.0),
        costs=COSTS,
        utility=goal_reaching(1.0),
        horizon=0.05,
        boundary=BoundaryKind.GOAL,
    )


@pytest.fixture(scope="module")
def goal_solution():
    grid = TransformedGrid(
        z_nodes=np.linspace(0.0, 1.0, 41),
        v_nodes=stretched_v_nodes(4.0, 21, stretch=4.0),
        tau_levels=tau_ladder(0.05, 5),
    )
    return solve_qvi(goal_problem(), grid, SolverParams())


@pytest.fixture(scope="module")
def goal_map(goal_solution):
    return classify_regions(goal_solution)


@pytest.fixture(scope="module")
def sol3d():
    prob = ProblemSpec(
        model=MarketModel(kind="gmr", sigma=0.3, kappa=5.0, nu_bar=0.0933,
                          zeta=0.065, rho=-0.7),
        costs=COSTS,
        utility=goal_reaching(1.0),
        horizon=0.05,
        boundary=BoundaryKind.GOAL,
    )
    grid = TransformedGrid(
        z_nodes=np.linspace(0.0, 1.0, 13),
        v_nodes=stretched_v_nodes(2.0, 11, stretch=2.0),
        tau_levels=tau_ladder(0.05, 4),
        nu_nodes=np.linspace(-0.1333, 0.32, 5),
    )
    return solve_qvi(prob, grid, SolverParams())


class TestClassification:
    def test_full_lattice_with_edges(self, goal_solution, goal_map):
        g = goal_solution.grid
        assert goal_map.labels.shape == (g.nz, g.nv, 1)
        assert goal_map.labels.dtype == np.int8
        lab2 = goal_map.labels[:, :, 0]
        assert (lab2[0] == EDGE).all() and (lab2[-1] == EDGE).all()
        assert (lab2[:, 0] == EDGE).all() and (lab2[:, -1] == EDGE).all()
        assert set(np.unique(lab2[1:-1, 1:-1])) <= {NR, SR, BR, AMBIGUOUS}

    def test_no_trade_rule(self, goal_map):
        nr = goal_map.labels == NR
        assert np.any(nr)
        assert np.all(goal_map.r_pde[nr] <= goal_map.tol)

    def test_trade_labels_follow_smaller_residual(self, goal_map):
        sr = goal_map.labels == SR
        br = goal_map.labels == BR
        assert np.any(sr) and np.any(br)
        # stored residuals are zeroed where inapplicable, which never wins
        # against an applicable competitor at a trade node
        assert np.all(goal_map.r_pde[sr] > goal_map.tol)
        assert np.all(goal_map.r_pde[br] > goal_map.tol)

    def test_region_structure_at_mid_wealth(self, goal_map):
        # driftless goal seeking is symmetric in the stock sign: buy toward
        # the long target just above zero, sell toward the mirrored short
        # target just below, and both constraints bind at zero stock
        assert goal_map.label_at(0.5, 0.5) == "BR"
        assert goal_map.label_at(0.5, -0.5) == "SR"
        assert goal_map.label_at(0.5, 0.0) == "AMBIGUOUS"
        assert goal_map.label_at(0.5, 12.0) == "NR"

    def test_fractions_sum_to_one(self, goal_map):
        fr = goal_map.fractions()
        assert set(fr) == {"NR", "SR", "BR", "AMBIGUOUS"}
        assert sum(fr.values()) == pytest.approx(1.0)
        assert fr["AMBIGUOUS"] < 0.05

    def test_times_and_names(self, goal_map):
        assert goal_map.tau == pytest.approx(0.05)
        assert goal_map.t == pytest.approx(0.0)
        assert goal_map.horizon == pytest.approx(0.05)
        assert goal_map.utility_name == "goal_reaching"
        assert not goal_map.is_3d

    def test_explicit_tolerance_respected(self, goal_solution):
        rmap = classify_regions(goal_solution, tol=1e9)
        inside = rmap.labels != EDGE
        assert np.all(rmap.labels[inside] == NR)

    def test_stored_level_required(self, goal_solution):
        with pytest.raises(KeyError):
            classify_regions(goal_solution, tau=0.013)


class TestBoundaryCurves:
    def test_curve_keys_and_shape(self, goal_map):
        curves = goal_map.boundary_curves
        assert set(curves) == {"buy_upper", "sell_lower", "sell_upper"}
        for arr in curves.values():
            assert arr.shape == (goal_map.z_nodes.size,)

    def test_buy_upper_in_share_units(self, goal_map):
        bu = goal_map.boundary_curves["buy_upper"]
        mid = (goal_map.z_nodes > 0.2) & (goal_map.z_nodes < 0.8)
        finite = np.isfinite(bu) & mid
        assert np.any(finite)
        y_max = goal_map.v_nodes[-1] / math.sqrt(goal_map.tau)
        assert np.all(bu[finite] > 0.0)
        assert np.all(bu[finite] < y_max)

    def test_frictionless_comparison_rows(self, goal_map):
        rows = compare_frictionless(goal_map, sigma=0.3)
        assert rows
        for z, bu, sl, target, exceeds in rows:
            assert 0.0 < z < 1.0
            assert target == pytest.approx(browne_target(z, 0.3, goal_map.tau))
            assert isinstance(exceeds, bool)

    def test_frictionless_comparison_goal_only(self, goal_map):
        other = RegionMap(
            tau=goal_map.tau, t=goal_map.t, z_nodes=goal_map.z_nodes,
            v_nodes=goal_map.v_nodes, nu_nodes=None, labels=goal_map.labels,
            w=goal_map.w, r_pde=goal_map.r_pde, r_sell=goal_map.r_sell,
            r_buy=goal_map.r_buy, tol=goal_map.tol, utility_name="crra",
        )
        with pytest.raises(ValueError):
            compare_frictionless(other, sigma=0.3)


class TestThreeDimensionalMap:
    def test_labels_and_lookup(self, sol3d):
        rmap = classify_regions(sol3d)
        assert rmap.is_3d
        assert rmap.labels.shape == (13, 11, 5)
        with pytest.raises(ValueError):
            rmap.label_at(0.5, 0.1)
        assert rmap.label_at(0.5, 0.1, 0.0933) in REGION_NAMES.values()

    def test_per_slice_curves(self, sol3d):
        rmap = classify_regions(sol3d)
        assert set(rmap.boundary_curves) == set(range(5))
        assert set(rmap.boundary_curves[2]) == {"buy_upper", "sell_lower", "sell_upper"}

    def test_fractions_pick_slice(self, sol3d):
        rmap = classify_regions(sol3d)
        fr0 = rmap.fractions(0)
        fr2 = rmap.fractions(2)
        assert sum(fr0.values()) == pytest.approx(1.0)
        assert sum(fr2.values()) == pytest.approx(1.0)


class TestExports:
    def test_csv_layout(self, goal_map, tmp_path):
        path = export_fields(goal_map, tmp_path / "map.csv")
        lines = open(path).read().splitlines()
        assert lines[0] == "t,z,v,y,W,residual_pde,residual_sell,residual_buy,label"
        n_inside = int((goal_map.labels != EDGE).sum())
        assert len(lines) == 1 + n_inside
        first = lines[1].split(",")
        assert len(first) == 9
        assert first[-1] in REGION_NAMES.values()

    def test_sidecar_metadata(self, goal_map, tmp_path):
        path = export_fields(goal_map, tmp_path / "map.csv", metadata={"experiment": "unit"})
        meta = json.load(open(str(path) + ".meta.json"))
        assert meta["experiment"] == "unit"
        assert meta["rows"] == int((goal_map.labels != EDGE).sum())
        assert meta["utility"] == "goal_reaching"
        import hashlib
        digest = hashlib.sha256(open(path, "rb").read()).hexdigest()
        assert meta["csv_sha256"] == digest

    def test_reexport_is_byte_identical(self, goal_map, tmp_path):
        p1 = export_fields(goal_map, tmp_path / "a.csv")
        p2 = export_fields(goal_map, tmp_path / "b.csv")
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_fresh_solve_is_byte_identical(self, tmp_path):
        grid = TransformedGrid(
            z_nodes=np.linspace(0.0, 1.0, 21),
            v_nodes=stretched_v_nodes(2.0, 11, stretch=2.0),
            tau_levels=tau_ladder(0.05, 3),
        )
        payloads = []
        for name in ("first.csv", "second.csv"):
            sol = solve_qvi(goal_problem(), grid, SolverParams())
            path = export_fields(sol, tmp_path / name)
            payloads.append(open(path, "rb").read())
        assert payloads[0] == payloads[1]

    def test_solution_input_classifies(self, goal_solution, tmp_path):
        path = export_fields(goal_solution, tmp_path / "sol.csv")
        assert open(path).readline().startswith("t,z,v,y,W")

    def test_unsupported_format(self, goal_map, tmp_path):
        with pytest.raises(ValueError):
            export_fields(goal_map, tmp_path / "map.bin", format="parquet")

    def test_3d_export_has_state_column(self, sol3d, tmp_path):
        path = export_fields(sol3d, tmp_path / "map3.csv")
        header = open(path).readline().strip()
        assert header == "t,z,v,nu,y,W,residual_pde,residual_sell,residual_buy,label"


class TestPlotScript:
    def test_script_contents(self, goal_map, tmp_path):
        csv = export_fields(goal_map, tmp_path / "map.csv")
        gp = write_plot_script(csv, title="unit map")
        body = open(gp).read()
        assert gp == str(csv) + ".gp"
        assert "set datafile separator comma" in body
        assert "set title 'unit map'" in body
        for name in ("NR", "SR", "BR", "AMBIGUOUS"):
            assert f"title '{name}'" in body
        assert "strcol(9)" in body

    def test_script_uses_state_column_offset(self, sol3d, tmp_path):
        csv = export_fields(sol3d, tmp_path / "map3.csv")
        gp = write_plot_script(csv, script_path=tmp_path / "custom.gp")
        body = open(gp).read()
        assert "strcol(10)" in body
