import math

import pytest
from hypothesis import given, strategies as st

from qviport.market import CostSpec, MarketModel, Position, model_coefficients


class TestCostSpec:
    def test_rates_stored(self):
        c = CostSpec(theta1=0.01, theta2=0.02)
        assert c.theta1 == 0.01
        assert c.theta2 == 0.02

    def test_round_trip(self):
        c = CostSpec(theta1=0.01, theta2=0.02)
        assert c.round_trip == pytest.approx(0.03)

    @pytest.mark.parametrize("bad", [-0.1, 0.0, 1.0, 1.5])
    def test_sale_rate_must_leave_proceeds(self, bad):
        with pytest.raises(ValueError):
            CostSpec(theta1=bad, theta2=0.01)

    @pytest.mark.parametrize("bad", [-0.01, 0.0])
    def test_purchase_rate_must_be_positive(self, bad):
        with pytest.raises(ValueError):
            CostSpec(theta1=0.01, theta2=bad)


class TestPosition:
    def test_long_liquidation_pays_sale_fee(self):
        p = Position(x=1.0, y=2.0)
        c = CostSpec(theta1=0.1, theta2=0.2)
        assert p.liquidation_value(c) == pytest.approx(1.0 + 0.9 * 2.0)

    def test_short_liquidation_pays_purchase_fee(self):
        p = Position(x=5.0, y=-2.0)
        c = CostSpec(theta1=0.1, theta2=0.2)
        assert p.liquidation_value(c) == pytest.approx(5.0 - 1.2 * 2.0)

    def test_solvency_threshold(self):
        c = CostSpec(theta1=0.1, theta2=0.1)
        assert Position(x=-0.9, y=1.0).is_solvent(c)
        assert not Position(x=-0.91, y=1.0).is_solvent(c)

    @given(
        x=st.floats(-10, 10),
        y=st.floats(-10, 10),
        t1=st.floats(1e-6, 0.5),
        t2=st.floats(1e-6, 0.5),
    )
    def test_liquidation_never_exceeds_mark_to_market(self, x, y, t1, t2):
        c = CostSpec(theta1=t1, theta2=t2)
        assert Position(x, y).liquidation_value(c) <= x + y + 1e-12


class TestMarketModel:
    def test_gbm_flags(self):
        m = MarketModel(kind="gbm", sigma=0.3, eta=0.05)
        assert not m.is_gmr

    def test_gmr_flags(self):
        m = MarketModel(kind="gmr", sigma=0.3, kappa=0.27, nu_bar=0.13, zeta=0.065, rho=-0.93)
        assert m.is_gmr

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            MarketModel(kind="heston")

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            MarketModel(kind="gbm", sigma=0.0)

    def test_correlation_bounded(self):
        with pytest.raises(ValueError):
            MarketModel(kind="gmr", sigma=0.3, kappa=0.3, zeta=0.1, rho=-1.5)


class TestModelCoefficients:
    def test_gbm_premium_is_flat(self):
        m = MarketModel(kind="gbm", sigma=0.3, eta=0.04)
        a = model_coefficients(m, 0.0)
        b = model_coefficients(m, 2.0)
        assert a.eta == b.eta == pytest.approx(0.04)
        assert a.sigma == pytest.approx(0.3)

    def test_gmr_premium_scales_with_state(self):
        m = MarketModel(kind="gmr", sigma=0.3, kappa=0.27, nu_bar=0.1333, zeta=0.065, rho=-0.93)
        c = model_coefficients(m, 0.5)
        assert c.eta == pytest.approx(0.3 * 0.5)
        assert c.m == pytest.approx(0.27 * (0.1333 - 0.5))
        assert c.zeta == pytest.approx(0.065)

    @given(nu=st.floats(-2, 2))
    def test_gmr_reversion_pulls_toward_mean(self, nu):
        m = MarketModel(kind="gmr", sigma=0.3, kappa=0.27, nu_bar=0.1333, zeta=0.065, rho=-0.93)
        drift = model_coefficients(m, nu).m
        assert drift * (0.1333 - nu) >= 0.0
