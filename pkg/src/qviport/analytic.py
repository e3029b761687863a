"""Closed-form reference quantities used as oracles and diagnostics.

Contents: standard normal functions (complementary-error-function based),
the near-maturity value asymptote induced by utility jumps, the frictionless
goal-reaching stock target, power-utility frictionless value factors for both
market models, and the drifted-Brownian single-barrier crossing probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .market import CostSpec, MarketModel, liquidation_value, model_coefficients
from .utility import Utility

__all__ = [
    "norm_pdf",
    "norm_cdf",
    "norm_ppf",
    "AsymptoteQuery",
    "terminal_asymptote",
    "browne_target",
    "RiccatiExplosionError",
    "riccati_abc",
    "crra_frictionless_value",
    "first_passage_prob",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_pdf(q):
    """Standard normal density."""
    q = np.asarray(q, dtype=float)
    out = _INV_SQRT_2PI * np.exp(-0.5 * q * q)
    return float(out) if out.ndim == 0 else out


def norm_cdf(q):
    """Standard normal distribution function via 0.5*erfc(-q/sqrt(2)),
    accurate in both tails."""
    q = np.asarray(q, dtype=float)
    out = 0.5 * special.erfc(-q / _SQRT2)
    return float(out) if out.ndim == 0 else out


def norm_ppf(u):
    """Inverse of :func:`norm_cdf` on the open unit interval."""
    arr = np.asarray(u, dtype=float)
    if np.any((arr <= 0.0) | (arr >= 1.0)):
        raise ValueError("norm_ppf requires arguments strictly inside (0, 1)")
    out = special.ndtri(arr)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AsymptoteQuery:
    """State for the near-maturity expansion: time ``t``, account pair
    (``x``, ``y``), costs, local volatility ``sigma_hat``, horizon ``T``,
    and the terminal utility."""

    t: float
    x: float
    y: float
    costs: CostSpec
    sigma_hat: float
    T: float
    utility: Utility

    def __post_init__(self):
        if not (self.T >= self.t):
            raise ValueError("need t <= T")
        if not (self.sigma_hat > 0.0):
            raise ValueError("sigma_hat must be positive")


def terminal_asymptote(query: AsymptoteQuery) -> float:
    """Leading-order value near maturity.

    The value converges to U(z) plus, for every utility jump located above
    the current liquidation wealth z, twice the normal tail probability of
    diffusing across that jump before the deadline:

        U(z) + sum_j 2 * Phi((z - b_j) / (|b_j - x| * sigma_hat * sqrt(T-t))) * jump_j

    over jumps at b_j > z.  When the scale |b_j - x| vanishes the factor is
    taken as zero (the position cannot diffuse across the jump).
    """
    u = query.utility
    z = liquidation_value(query.x, query.y, query.costs)
    if z < u.floor:
        raise ValueError("state is insolvent: liquidation wealth below the utility floor")
    tau = query.T - query.t
    total = u.value(z)
    if tau == 0.0:
        return total
    sq = math.sqrt(tau)
    for b_j, _left, jump in u.jump_points:
        if b_j <= z:
            continue
        scale = abs(b_j - query.x) * query.sigma_hat * sq
        if scale == 0.0:
            continue
        total += 2.0 * norm_cdf((z - b_j) / scale) * jump
    return total


def browne_target(z, sigma: float, tau: float):
    """Frictionless goal-reaching stock holding at normalized wealth ``z``:
    pdf(ppf(z)) / (sigma * sqrt(tau)), for z strictly inside (0, 1)."""
    if not (sigma > 0.0 and tau > 0.0):
        raise ValueError("sigma and tau must be positive")
    arr = np.asarray(z, dtype=float)
    if np.any((arr <= 0.0) | (arr >= 1.0)):
        raise ValueError("browne_target requires 0 < z < 1")
    out = norm_pdf(special.ndtri(arr)) / (sigma * math.sqrt(tau))
    return float(out) if np.ndim(out) == 0 else out


class RiccatiExplosionError(RuntimeError):
    """Riccati coefficients diverged before the requested horizon."""

    def __init__(self, critical_tau: float):
        self.critical_tau = critical_tau
        super().__init__(
            f"exponential-affine coefficients explode at time-to-maturity ~{critical_tau:.6g}"
        )


def _riccati_rhs(state, model: MarketModel, p: float):
    a, b, _c = state
    kappa, nu_bar, zeta, rho = model.kappa, model.nu_bar, model.zeta, model.rho
    q = p / (1.0 - p)
    g = 1.0 + 2.0 * a * zeta * rho
    da = -2.0 * kappa * a + 2.0 * zeta**2 * a * a + 0.5 * q * g * g
    db = 2.0 * kappa * nu_bar * a - kappa * b + 2.0 * zeta**2 * a * b + q * zeta * rho * b * g
    dc = kappa * nu_bar * b + 0.5 * zeta**2 * b * b + zeta**2 * a + 0.5 * q * zeta**2 * rho**2 * b * b
    return np.array([da, db, dc])


def riccati_abc(model: MarketModel, p: float, tau: float, step_hint: float | None = None):
    """Integrate the exponential-affine coefficient system from 0 out to
    ``tau`` with fixed-step classical RK4.

    The step is ``tau``-resolution of the hint (default horizon/2000).
    Divergence raises :class:`RiccatiExplosionError` carrying the critical
    time-to-maturity.
    """
    if not model.is_gmr:
        raise ValueError("riccati_abc applies to the gmr model")
    if not (0.0 < p < 1.0):
        raise ValueError("p must lie in (0, 1)")
    if tau < 0.0:
        raise ValueError("tau must be nonnegative")
    if tau == 0.0:
        return 0.0, 0.0, 0.0
    h_target = step_hint if step_hint is not None else tau / 2000.0
    n = max(1, int(math.ceil(tau / h_target)))
    h = tau / n
    state = np.zeros(3)
    cap = 1e8
    for i in range(n):
        k1 = _riccati_rhs(state, model, p)
        k2 = _riccati_rhs(state + 0.5 * h * k1, model, p)
        k3 = _riccati_rhs(state + 0.5 * h * k2, model, p)
        k4 = _riccati_rhs(state + h * k3, model, p)
        state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(state)) or np.max(np.abs(state)) > cap:
            raise RiccatiExplosionError((i + 1) * h)
    return float(state[0]), float(state[1]), float(state[2])


def crra_frictionless_value(z, p: float, tau: float, model: MarketModel, nu: float = 0.0):
    """Frictionless value of the power utility z**p / p.

    Constant-coefficient model: (z**p / p) * exp(p * eta^2 * tau / (2 (1-p) sigma^2)).
    Mean-return model: (z**p / p) * exp(A tau-coeffs quadratic in nu), with
    (A, B, C) from :func:`riccati_abc`.
    """
    if not (0.0 < p < 1.0):
        raise ValueError("p must lie in (0, 1)")
    if tau < 0.0:
        raise ValueError("tau must be nonnegative")
    arr = np.asarray(z, dtype=float)
    if np.any(arr < 0.0):
        raise ValueError("wealth must be nonnegative")
    base = arr**p / p
    if model.kind == "gbm":
        factor = math.exp(p * model.eta**2 * tau / (2.0 * (1.0 - p) * model.sigma**2))
    else:
        a, b, c = riccati_abc(model, p, tau)
        factor = math.exp(a * nu * nu + b * nu + c)
    out = base * factor
    return float(out) if out.ndim == 0 else out


def first_passage_prob(a: float, s: float, b: float, tau: float) -> float:
    """P(max_{u<=tau} (a*u + s*B_u) >= b) for an upper barrier b > 0:

        Phi((a*tau - b)/(s*sqrt(tau))) + exp(2ab/s^2) * Phi((-a*tau - b)/(s*sqrt(tau)))

    reducing to 2*Phi(-b/(s*sqrt(tau))) in the driftless case.
    """
    if not (b > 0.0):
        raise ValueError("barrier b must be positive (start below the barrier)")
    if not (s > 0.0):
        raise ValueError("diffusion scale s must be positive")
    if tau < 0.0:
        raise ValueError("tau must be nonnegative")
    if tau == 0.0:
        return 0.0
    sq = s * math.sqrt(tau)
    # exp overflow is harmless here: the second Phi factor decays faster
    expo = 2.0 * a * b / (s * s)
    tail = norm_cdf((-a * tau - b) / sq)
    if tail == 0.0:
        second = 0.0
    else:
        second = math.exp(min(expo, 700.0)) * tail
    return float(norm_cdf((a * tau - b) / sq) + second)
