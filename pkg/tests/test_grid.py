import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qviport.grid import (
    DegenerateTimeError,
    TransformedGrid,
    inverse_transform,
    refined_z_nodes,
    stretched_v_nodes,
    tau_ladder,
    transform_point,
    uniform_nodes,
)
from qviport.market import CostSpec

COSTS = CostSpec(theta1=5e-3, theta2=2e-3)


class TestTransform:
    def test_long_position(self):
        z, v = transform_point(0.75, 0.2, 0.4, COSTS, 1.0)
        assert z == pytest.approx(0.2 + (1 - 5e-3) * 0.4)
        assert v == pytest.approx(0.5 * 0.4)

    def test_short_position(self):
        z, v = transform_point(0.75, 1.0, -0.4, COSTS, 1.0)
        assert z == pytest.approx(1.0 - (1 + 2e-3) * 0.4)
        assert v == pytest.approx(-0.5 * 0.4)

    def test_terminal_cash_only(self):
        assert transform_point(1.0, 0.7, 0.0, COSTS, 1.0) == (0.7, 0.0)

    def test_terminal_with_stock_rejected(self):
        with pytest.raises(DegenerateTimeError):
            transform_point(1.0, 0.7, 0.1, COSTS, 1.0)
        with pytest.raises(DegenerateTimeError):
            inverse_transform(1.0, 0.7, 0.1, COSTS, 1.0)

    def test_beyond_horizon_rejected(self):
        with pytest.raises(ValueError):
            transform_point(1.5, 0.0, 0.0, COSTS, 1.0)

    @given(
        t=st.floats(0.0, 0.999),
        x=st.floats(-5.0, 5.0),
        y=st.floats(-5.0, 5.0),
    )
    def test_round_trip(self, t, x, y):
        z, v = transform_point(t, x, y, COSTS, 1.0)
        x2, y2 = inverse_transform(t, z, v, COSTS, 1.0)
        assert x2 == pytest.approx(x, abs=1e-12)
        assert y2 == pytest.approx(y, abs=1e-12)

    @given(y=st.floats(-5.0, 5.0))
    def test_wealth_never_exceeds_mark_to_market(self, y):
        z, _ = transform_point(0.5, 1.0, y, COSTS, 1.0)
        assert z <= 1.0 + y + 1e-12


class TestNodeBuilders:
    def test_uniform(self):
        nodes = uniform_nodes(0.0, 1.0, 11)
        assert nodes.size == 11
        assert np.allclose(np.diff(nodes), 0.1)
        with pytest.raises(ValueError):
            uniform_nodes(1.0, 0.0, 11)

    def test_refined_keeps_endpoints_and_point(self):
        nodes = refined_z_nodes(0.0, 2.0, 21, refine_points=(1.0,), ratio=8)
        assert nodes[0] == 0.0
        assert nodes[-1] == 2.0
        assert np.any(np.isclose(nodes, 1.0, atol=1e-12))
        assert np.all(np.diff(nodes) > 0.0)

    def test_refined_spacing_inside_window(self):
        nodes = refined_z_nodes(0.0, 2.0, 21, refine_points=(1.0,), ratio=8)
        h_c = 0.1
        inside = nodes[(nodes > 1.0 - 0.3) & (nodes < 1.0 + 0.3)]
        assert np.max(np.diff(inside)) < h_c / 8 * 1.5
        far = nodes[nodes < 0.5]
        assert np.max(np.diff(far)) == pytest.approx(h_c, rel=1e-9)

    def test_refined_without_points_is_uniform(self):
        nodes = refined_z_nodes(0.0, 1.0, 11)
        assert np.allclose(nodes, np.linspace(0.0, 1.0, 11))

    def test_refine_point_outside_domain(self):
        with pytest.raises(ValueError):
            refined_z_nodes(0.0, 1.0, 11, refine_points=(2.0,))

    def test_stretched_contains_exact_zero_and_symmetry(self):
        nodes = stretched_v_nodes(4.0, 41, stretch=4.0)
        assert np.any(nodes == 0.0)
        assert np.allclose(nodes, -nodes[::-1], atol=1e-12)
        assert nodes[0] == -4.0 and nodes[-1] == 4.0

    def test_stretched_denser_near_zero(self):
        nodes = stretched_v_nodes(4.0, 41, stretch=4.0)
        mid = np.diff(nodes)[nodes.size // 2 - 1]
        edge = np.diff(nodes)[0]
        assert mid < edge / 10

    def test_stretched_include_values(self):
        nodes = stretched_v_nodes(4.0, 41, include=(1.3333,))
        assert np.any(np.isclose(nodes, 1.3333, atol=1e-12))
        assert np.any(np.isclose(nodes, -1.3333, atol=1e-12))

    def test_stretched_one_sided(self):
        nodes = stretched_v_nodes(4.0, 41, short_sale=False)
        assert nodes[0] == 0.0
        assert np.all(nodes >= 0.0)

    def test_stretched_validation(self):
        with pytest.raises(ValueError):
            stretched_v_nodes(0.0, 41)
        with pytest.raises(ValueError):
            stretched_v_nodes(4.0, 3)
        with pytest.raises(ValueError):
            stretched_v_nodes(4.0, 41, include=(5.0,))

    def test_tau_ladder(self):
        lad = tau_ladder(0.1, 4)
        assert np.allclose(lad, [0.025, 0.05, 0.075, 0.1])
        with pytest.raises(ValueError):
            tau_ladder(0.0, 4)
        with pytest.raises(ValueError):
            tau_ladder(0.1, 0)


def small_grid(**kw):
    defaults = dict(
        z_nodes=np.linspace(0.0, 1.0, 11),
        v_nodes=np.linspace(-2.0, 2.0, 9),
        tau_levels=tau_ladder(0.1, 4),
    )
    defaults.update(kw)
    return TransformedGrid(**defaults)


class TestTransformedGrid:
    def test_shape_properties(self):
        g = small_grid()
        assert (g.nz, g.nv, g.nn) == (11, 9, 1)
        assert not g.is_3d
        assert g.dt == pytest.approx(0.025)
        assert g.v_zero_index == 4

    def test_3d_flag(self):
        g = small_grid(nu_nodes=np.linspace(-0.2, 0.4, 5))
        assert g.is_3d and g.nn == 5

    def test_level_index(self):
        g = small_grid()
        assert g.level_index(0.05) == 1
        assert g.level_index(0.1) == 3
        with pytest.raises(ValueError):
            g.level_index(0.06)

    def test_nonuniform_ladder_rejected_by_dt(self):
        g = small_grid(tau_levels=np.array([0.01, 0.02, 0.05]))
        with pytest.raises(ValueError):
            g.dt

    def test_validation(self):
        with pytest.raises(ValueError):
            small_grid(z_nodes=np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError):
            small_grid(v_nodes=np.array([-2.0, -1.0, 1.0, 2.0]))
        with pytest.raises(ValueError):
            small_grid(tau_levels=np.array([0.0, 0.1]))
        with pytest.raises(ValueError):
            small_grid(nu_nodes=np.array([0.1, 0.2]))
