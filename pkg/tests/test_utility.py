import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qviport.utility import (
    Branch,
    Utility,
    UtilityValidationError,
    aspiration,
    constant,
    crra,
    eval_with_limits,
    goal_reaching,
    make_utility,
    s_shaped,
    validate_assumption,
)


class TestGoalReaching:
    def test_values(self):
        u = goal_reaching(1.0)
        assert u.value(0.0) == 0.0
        assert u.value(0.999999) == 0.0
        assert u.value(1.0) == 1.0
        assert u.value(5.0) == 1.0

    def test_jump_list(self):
        u = goal_reaching(1.0)
        assert u.jump_points == ((1.0, 0.0, 1.0),)

    def test_left_limit_at_goal(self):
        u = goal_reaching(1.0)
        assert u.left_limit(1.0) == 0.0
        assert u.value(1.0) == 1.0

    def test_floor_shift(self):
        u = goal_reaching(2.0, floor=0.5)
        assert u.floor == 0.5
        assert u.value(0.5) == 0.0
        with pytest.raises(ValueError):
            u.value(0.4)

    def test_goal_must_exceed_floor(self):
        with pytest.raises(UtilityValidationError):
            goal_reaching(0.5, floor=0.5)

    def test_shape_checks_pass(self):
        assert validate_assumption(goal_reaching(1.0)).passed


class TestAspiration:
    def test_branch_values(self):
        u = aspiration(p=0.5, c1=0.0, c2=1.5, z_bar=1.0)
        assert u.value(0.25) == pytest.approx(math.sqrt(0.25) / 0.5)
        assert u.value(1.0) == pytest.approx(1.5 * 1.0 / 0.5)
        assert u.value(4.0) == pytest.approx(1.5 * 2.0 / 0.5)

    def test_jump_size(self):
        u = aspiration(p=0.5, c1=1.0, c2=1.5, z_bar=1.0)
        ((loc, left, jump),) = u.jump_points
        assert loc == 1.0
        assert left == pytest.approx(2.0)
        assert jump == pytest.approx(1.0 + 3.0 - 2.0)

    def test_rejects_downward_jump(self):
        with pytest.raises(UtilityValidationError):
            aspiration(p=0.5, c1=-2.0, c2=1.0, z_bar=1.0)

    @given(
        p=st.floats(0.1, 0.9),
        c1=st.floats(0.0, 2.0),
        c2=st.floats(1.01, 3.0),
        z_bar=st.floats(0.5, 2.0),
    )
    def test_always_passes_shape_checks(self, p, c1, c2, z_bar):
        u = aspiration(p=p, c1=c1, c2=c2, z_bar=z_bar)
        assert validate_assumption(u).passed


class TestSShaped:
    def test_loss_and_gain_sides(self):
        u = s_shaped(lam=2.25, p=0.5, z0=1.0)
        assert u.value(0.0) == pytest.approx(-2.25)
        assert u.value(1.0) == 0.0
        assert u.value(2.0) == pytest.approx(1.0)

    def test_continuous_at_reference(self):
        u = s_shaped(lam=2.25, p=0.5, z0=1.0)
        assert u.jump_points == ()
        v, left, jump = eval_with_limits(u, 1.0)
        assert v == left == 0.0
        assert jump == 0.0

    def test_rejects_nonpositive_loss_weight(self):
        with pytest.raises(UtilityValidationError):
            s_shaped(lam=0.0, p=0.5, z0=1.0)

    def test_shape_checks_pass(self):
        assert validate_assumption(s_shaped(lam=2.25, p=0.5, z0=1.0)).passed


class TestCrraAndConstant:
    def test_crra_values(self):
        u = crra(0.5)
        assert u.value(4.0) == pytest.approx(4.0)
        assert u.jump_points == ()

    def test_constant_is_flat(self):
        u = constant(3.0)
        zs = np.linspace(0.0, 10.0, 7)
        assert np.all(u.values(zs) == 3.0)


class TestMakeUtility:
    def test_dispatch(self):
        u = make_utility("goal_reaching", z_bar=1.0)
        assert u.name == "goal_reaching"

    def test_unknown_kind(self):
        with pytest.raises(UtilityValidationError, match="unknown utility kind"):
            make_utility("log")

    def test_bad_parameters_reported(self):
        with pytest.raises(UtilityValidationError, match="bad parameters"):
            make_utility("crra", q=0.5)


class TestUtilityContainer:
    def test_starts_must_increase(self):
        with pytest.raises(UtilityValidationError):
            Utility(starts=(0.0, 0.0), branches=(Branch(), Branch()), growth=(1.0, 1.0, 0.5))

    def test_growth_exponent_range(self):
        with pytest.raises(UtilityValidationError):
            Utility(starts=(0.0,), branches=(Branch(),), growth=(1.0, 1.0, 1.5))

    def test_vector_scalar_agreement(self):
        u = aspiration(p=0.5, c1=0.5, c2=1.5, z_bar=1.0)
        zs = np.array([0.0, 0.3, 0.999, 1.0, 1.7])
        np.testing.assert_allclose(u.values(zs), [u.value(z) for z in zs], rtol=0, atol=0)

    def test_validation_flags_decreasing_shape(self):
        u = Utility(
            starts=(0.0, 1.0),
            branches=(Branch(const=1.0), Branch(const=0.0)),
            growth=(2.0, 1.0, 0.5),
        )
        report = validate_assumption(u)
        assert not report.monotone
        assert not report.passed
        assert report.failures
