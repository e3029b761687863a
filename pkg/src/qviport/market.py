"""Market primitives: price models, trading costs, and solvency accounting.

Wealth is carried as a pair (x, y): cash in the riskless account and the
dollar value of the stock position.  The scalar summary used throughout the
solver is the forward (liquidation) wealth

    z = x + (1 - theta1) * max(y, 0) - (1 + theta2) * max(-y, 0),

the cash obtained by closing the stock position at the quoted proportional
costs.  Solvency means z >= K for the configured floor K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

__all__ = [
    "MarketModel",
    "CostSpec",
    "Position",
    "ModelCoefficients",
    "liquidation_value",
    "model_coefficients",
]


@dataclass(frozen=True)
class MarketModel:
    """Risky-asset dynamics.

    Two families are supported.

    ``gbm``
        Constant coefficients: excess return ``eta`` and volatility
        ``sigma``.  The riskless rate ``r`` is carried separately.
    ``gmr``
        Gaussian mean-return model: the instantaneous excess return is
        ``sigma * nu`` where the state ``nu`` mean-reverts with speed
        ``kappa`` toward ``nu_bar``, has volatility ``zeta``, and its
        Brownian driver has correlation ``rho`` with the price driver.
    """

    kind: str
    r: float = 0.0
    sigma: float = 0.3
    eta: float = 0.0
    kappa: float = 0.0
    nu_bar: float = 0.0
    zeta: float = 0.0
    rho: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gbm", "gmr"):
            raise ValueError(f"model kind must be 'gbm' or 'gmr', got {self.kind!r}")
        if not (self.sigma > 0.0) or not math.isfinite(self.sigma):
            raise ValueError("sigma must be positive and finite")
        if not math.isfinite(self.r):
            raise ValueError("r must be finite")
        if self.kind == "gbm":
            if not math.isfinite(self.eta):
                raise ValueError("eta must be finite")
        else:
            if not (self.zeta > 0.0) or not math.isfinite(self.zeta):
                raise ValueError("zeta must be positive and finite for gmr")
            if self.kappa < 0.0 or not math.isfinite(self.kappa):
                raise ValueError("kappa must be nonnegative and finite")
            if not (-1.0 <= self.rho <= 1.0):
                raise ValueError("rho must lie in [-1, 1]")
            if not math.isfinite(self.nu_bar):
                raise ValueError("nu_bar must be finite")

    @property
    def is_gmr(self) -> bool:
        return self.kind == "gmr"


@dataclass(frozen=True)
class CostSpec:
    """Proportional transaction costs: ``theta1`` on sales (a fraction of the
    sale amount, strictly inside (0, 1)) and ``theta2`` on purchases
    (a nonnegative markup)."""

    theta1: float
    theta2: float

    def __post_init__(self):
        if not (0.0 < self.theta1 < 1.0):
            raise ValueError("theta1 must lie strictly in (0, 1)")
        if not (self.theta2 > 0.0) or not math.isfinite(self.theta2):
            raise ValueError("theta2 must be positive and finite")

    @property
    def round_trip(self) -> float:
        """Total cost rate of a buy immediately followed by a sell."""
        return self.theta1 + self.theta2


@dataclass(frozen=True)
class Position:
    """Cash/stock account pair in dollars."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("position components must be finite")

    def liquidation_value(self, costs: CostSpec) -> float:
        return liquidation_value(self.x, self.y, costs)

    def is_solvent(self, costs: CostSpec, floor: float = 0.0) -> bool:
        return self.liquidation_value(costs) >= floor


class ModelCoefficients(NamedTuple):
    """Coefficient bundle at one state value: total drift ``mu``, price
    volatility ``sigma``, state drift ``m``, state volatility ``zeta``, and
    excess return ``eta``."""

    mu: float
    sigma: float
    m: float
    zeta: float
    eta: float


def liquidation_value(x: float, y: float, costs: CostSpec) -> float:
    """Cash value of (x, y) after closing the stock account.

    Sales of y > 0 realize (1 - theta1) * y; covering y < 0 costs
    (1 + theta2) * |y|.
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("x and y must be finite")
    if y >= 0.0:
        return x + (1.0 - costs.theta1) * y
    return x + (1.0 + costs.theta2) * y


def model_coefficients(model: MarketModel, nu: float = 0.0) -> ModelCoefficients:
    """Evaluate drift/volatility coefficients at state ``nu``.

    For ``gbm`` the state argument is ignored and the excess return is the
    configured constant.  For ``gmr`` the excess return is ``sigma * nu`` and
    the state drift is ``kappa * (nu_bar - nu)``.
    """
    if model.kind == "gbm":
        return ModelCoefficients(
            mu=model.r + model.eta,
            sigma=model.sigma,
            m=0.0,
            zeta=0.0,
            eta=model.eta,
        )
    if not math.isfinite(nu):
        raise ValueError("nu must be finite")
    eta = model.sigma * nu
    return ModelCoefficients(
        mu=model.r + eta,
        sigma=model.sigma,
        m=model.kappa * (model.nu_bar - nu),
        zeta=model.zeta,
        eta=eta,
    )
