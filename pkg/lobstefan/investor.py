# SPDX-License-Identifier: Apache-2.0
"""Static limit-price choice of a buyer facing the ask book, and the wait/buy test.

B is the offset from the mid-price up to which the investor lifts the ask
side. The asset bought is L(B), the money spent is the price-weighted volume
over the same interval, and consumption is what is left of the wealth.
"""

import logging
import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import optimize
from scipy.integrate import IntegrationWarning, quad

from .exceptions import (DomainError, InfeasibleBudgetError, InvalidParameterError, QuadratureError,
                         UtilityInvariantError)
from .model import GridSpec, ModelParams, ScalingSpec, eval_sigma
from .simulator import BookState

logger = logging.getLogger(__name__)

SCAN_POINTS = 4001
SIGNAL_RTOL = 1e-12

class UtilityModel(ABC):
    """U(t, L, C) with the partial derivatives the drift needs. All methods accept arrays."""

    @abstractmethod
    def value(self, t, L, C):
        pass

    @abstractmethod
    def u_t(self, t, L, C):
        pass

    @abstractmethod
    def u_l(self, t, L, C):
        pass

    @abstractmethod
    def u_c(self, t, L, C):
        pass

    @abstractmethod
    def u_ll(self, t, L, C):
        pass

    @abstractmethod
    def u_cc(self, t, L, C):
        pass

    def risk_aversions(self, t, L, C) -> Tuple[float, float]:
        """Absolute risk aversions (r_L, r_C)."""
        return -self.u_ll(t, L, C) / self.u_l(t, L, C), -self.u_cc(t, L, C) / self.u_c(t, L, C)

    def check_invariants(self, t, L, C):
        u_l, u_c = self.u_l(t, L, C), self.u_c(t, L, C)
        u_ll, u_cc = self.u_ll(t, L, C), self.u_cc(t, L, C)
        if not (u_l > 0 and u_c > 0):
            raise UtilityInvariantError(f'marginal utilities must be positive at L={L:.6g}, C={C:.6g} '
                                        f'(U_L={u_l:.6g}, U_C={u_c:.6g})')
        if u_ll > 0 or u_cc > 0:
            raise UtilityInvariantError(f'utility must be concave at L={L:.6g}, C={C:.6g} '
                                        f'(U_LL={u_ll:.6g}, U_CC={u_cc:.6g})')

@dataclass(frozen=True)
class LogUtility(UtilityModel):
    """exp(-delta*t) * (a*ln L + b*ln C)"""
    a: float = 1.0
    b: float = 1.0
    delta: float = 0.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0 or self.delta < 0:
            raise InvalidParameterError(f'log utility needs a, b > 0 and delta >= 0, got {self}')

    def _discount(self, t):
        return np.exp(-self.delta * np.asarray(t, dtype=float))

    def value(self, t, L, C):
        return self._discount(t) * (self.a * np.log(L) + self.b * np.log(C))

    def u_t(self, t, L, C):
        if self.delta == 0:
            return np.zeros(np.broadcast(t, L, C).shape)
        return -self.delta * self.value(t, L, C)

    def u_l(self, t, L, C):
        return self._discount(t) * self.a / L

    def u_c(self, t, L, C):
        return self._discount(t) * self.b / C

    def u_ll(self, t, L, C):
        return -self._discount(t) * self.a / np.square(L)

    def u_cc(self, t, L, C):
        return -self._discount(t) * self.b / np.square(C)

@dataclass(frozen=True)
class LinearUtility(UtilityModel):
    """Risk-neutral exp(-delta*t) * (a*L + b*C)"""
    a: float = 1.0
    b: float = 1.0
    delta: float = 0.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0 or self.delta < 0:
            raise InvalidParameterError(f'linear utility needs a, b > 0 and delta >= 0, got {self}')

    def _discount(self, t):
        return np.exp(-self.delta * np.asarray(t, dtype=float))

    def value(self, t, L, C):
        return self._discount(t) * (self.a * np.asarray(L) + self.b * np.asarray(C))

    def u_t(self, t, L, C):
        if self.delta == 0:
            return np.zeros(np.broadcast(t, L, C).shape)
        return -self.delta * self.value(t, L, C)

    def u_l(self, t, L, C):
        return self._discount(t) * self.a * np.ones_like(np.asarray(L, dtype=float))

    def u_c(self, t, L, C):
        return self._discount(t) * self.b * np.ones_like(np.asarray(C, dtype=float))

    def u_ll(self, t, L, C):
        return np.zeros_like(np.asarray(L, dtype=float))

    def u_cc(self, t, L, C):
        return np.zeros_like(np.asarray(C, dtype=float))

@dataclass(frozen=True)
class CRRAUtility(UtilityModel):
    """exp(-delta*t) * (a*L^(1-gamma) + b*C^(1-gamma)) / (1-gamma)"""
    a: float = 1.0
    b: float = 1.0
    delta: float = 0.0
    gamma: float = 0.5

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0 or self.delta < 0:
            raise InvalidParameterError(f'CRRA utility needs a, b > 0 and delta >= 0, got {self}')
        if self.gamma <= 0 or self.gamma == 1:
            raise InvalidParameterError(f'CRRA gamma must be positive and != 1 (use log utility), got {self.gamma}')

    def _discount(self, t):
        return np.exp(-self.delta * np.asarray(t, dtype=float))

    def value(self, t, L, C):
        k = 1.0 - self.gamma
        return self._discount(t) * (self.a * np.power(L, k) + self.b * np.power(C, k)) / k

    def u_t(self, t, L, C):
        if self.delta == 0:
            return np.zeros(np.broadcast(t, L, C).shape)
        return -self.delta * self.value(t, L, C)

    def u_l(self, t, L, C):
        return self._discount(t) * self.a * np.power(L, -self.gamma)

    def u_c(self, t, L, C):
        return self._discount(t) * self.b * np.power(C, -self.gamma)

    def u_ll(self, t, L, C):
        return -self.gamma * self._discount(t) * self.a * np.power(L, -self.gamma - 1.0)

    def u_cc(self, t, L, C):
        return -self.gamma * self._discount(t) * self.b * np.power(C, -self.gamma - 1.0)

@dataclass(frozen=True)
class InvestorProblem:
    wealth: float
    book: BookState
    params: ModelParams
    grid: GridSpec
    time: Optional[float] = None

    def __post_init__(self):
        if not self.wealth > 0:
            raise InvalidParameterError(f'wealth must be positive, got {self.wealth}')
        if self.time is None:
            object.__setattr__(self, 'time', float(self.book.time))

    @property
    def mid(self) -> float:
        return float(self.book.mid)

class Signal(str, Enum):
    BUY_NOW = 'BuyNow'
    EVALUATE_FURTHER = 'EvaluateFurther'

class DriftBreakdown(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan='constants')

    time_preference: float
    order_flow: float
    asset_risk: float
    consumption_risk: float

    @property
    def total(self) -> float:
        return self.time_preference + self.order_flow + self.asset_risk + self.consumption_risk

class Decision(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan='constants')

    b_star: float
    asset: float
    consumption: float
    utility: float
    du_drift: float
    signal: Signal
    foc_residual: float
    interior: bool
    chord_slope: Optional[float] = None
    boundary_slope: float
    breakdown: DriftBreakdown

    @field_validator('consumption')
    @classmethod
    def consumption_positive(cls, v):
        if not v > 0:
            raise ValueError(f'consumption must be positive, got {v}')
        return v

def _ask_profile(book: BookState, grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes 0, dx, ..., N*dx and the ask density there (first cell extended to the boundary)."""
    ask = np.asarray(book.ask_rel, dtype=float)
    return np.concatenate(([0.0], grid.x_nodes)), np.concatenate((ask[:1], ask))

def ask_density_at(book: BookState, grid: GridSpec, offset) -> float:
    z, f = _ask_profile(book, grid)
    return np.interp(offset, z, f)

def boundary_slope(book: BookState, grid: GridSpec) -> float:
    """One-sided dV_A/dS at the mid-price, the difference the simulator drifts with."""
    return float(book.ask_rel[0] / grid.dx)

def book_integrals(book: BookState, grid: GridSpec, B):
    """(L(B), cost(B)) by the trapezoid rule over the nodes below B plus B itself."""
    z, f = _ask_profile(book, grid)
    B_arr = np.asarray(B, dtype=float)
    if np.any(B_arr < 0) or np.any(B_arr > z[-1] * (1 + 1e-12)):
        raise DomainError(f'B must lie in [0, {z[-1]:.6g}], the stored book')
    B_arr = np.minimum(B_arr, z[-1])
    priced = (book.mid + z) * f
    width = np.diff(z)
    cum_asset = np.concatenate(([0.0], np.cumsum(width * (f[1:] + f[:-1]) / 2)))
    cum_cost = np.concatenate(([0.0], np.cumsum(width * (priced[1:] + priced[:-1]) / 2)))

    idx = np.clip(np.searchsorted(z, B_arr, side='right') - 1, 0, z.size - 2)
    f_b = np.interp(B_arr, z, f)
    h = B_arr - z[idx]
    asset = cum_asset[idx] + h * (f[idx] + f_b) / 2
    cost = cum_cost[idx] + h * (priced[idx] + (book.mid + B_arr) * f_b) / 2
    if asset.ndim == 0:
        return float(asset), float(cost)
    return asset, cost

def asset_amount(book: BookState, B: float, grid: GridSpec) -> float:
    return book_integrals(book, grid, B)[0]

def purchase_cost(book: BookState, B: float, grid: GridSpec) -> float:
    return book_integrals(book, grid, B)[1]

def consumption(wealth: float, cost: float) -> float:
    c = wealth - cost
    if not c > 0:
        raise InfeasibleBudgetError(f'cost {cost:.6g} leaves no consumption out of wealth {wealth:.6g}')
    return c

def risk_integrals(sigma: ScalingSpec, mid: float, B: float) -> Tuple[float, float]:
    """(int_0^B sigma^2 dS, int_0^B (mid + S)^2 sigma^2 dS)."""
    if B < 0:
        raise DomainError(f'B must be non-negative, got {B}')
    if B == 0:
        return 0.0, 0.0
    results = []
    with warnings.catch_warnings():
        warnings.simplefilter('error', IntegrationWarning)
        for integrand in (lambda s: eval_sigma(sigma, s) ** 2,
                          lambda s: (mid + s) ** 2 * eval_sigma(sigma, s) ** 2):
            try:
                value, abserr = quad(integrand, 0.0, B, epsabs=1e-10, epsrel=1e-10, limit=200)
            except IntegrationWarning as e:
                raise QuadratureError(f'risk integral up to B={B:.6g}: {e}') from e
            if abserr > 1e-8:
                raise QuadratureError(f'risk integral up to B={B:.6g}: error estimate {abserr:.3g}')
            results.append(value)
    return results[0], results[1]

def drift_breakdown(problem: InvestorProblem, utility: UtilityModel, B: float) -> DriftBreakdown:
    """The four terms of E_t[dU/dt] at offset B."""
    book, grid = problem.book, problem.grid
    L, cost = book_integrals(book, grid, B)
    C = consumption(problem.wealth, cost)
    t = problem.time
    with np.errstate(divide='ignore', invalid='ignore'):
        u_t = float(utility.u_t(t, L, C))
        u_c = float(utility.u_c(t, L, C))
    order_flow = u_c * problem.params.alpha_ask * (ask_density_at(book, grid, B) - B * boundary_slope(book, grid))
    if B == 0:
        return DriftBreakdown(time_preference=u_t, order_flow=float(order_flow), asset_risk=0.0, consumption_risk=0.0)

    utility.check_invariants(t, L, C)
    r_l, r_c = (float(r) for r in utility.risk_aversions(t, L, C))
    asset_var, cost_var = risk_integrals(problem.params.sigma_ask, problem.mid, B)
    return DriftBreakdown(
        time_preference=u_t,
        order_flow=float(order_flow),
        asset_risk=-0.5 * u_c * r_l * (problem.mid + B) * asset_var,
        consumption_risk=-0.5 * u_c * r_c * cost_var,
    )

def expected_dU_dt(problem: InvestorProblem, utility: UtilityModel, B: float) -> float:
    return drift_breakdown(problem, utility, B).total

def timing_signal(book: BookState, b_star: float, grid: GridSpec) -> Signal:
    """BuyNow when V_A(S*+B*) <= B* * dV_A/dS(S*), i.e. the chord is no steeper than the boundary slope."""
    if b_star <= 0:
        return Signal.EVALUATE_FURTHER
    edge = float(ask_density_at(book, grid, b_star))
    bound = b_star * boundary_slope(book, grid)
    if edge <= bound + SIGNAL_RTOL * max(abs(edge), abs(bound)):
        return Signal.BUY_NOW
    return Signal.EVALUATE_FURTHER

def _budget_limit(problem: InvestorProblem) -> float:
    """Largest offset that leaves positive consumption, scanning outward from the mid-price."""
    book, grid, wealth = problem.book, problem.grid, problem.wealth
    b_max = grid.n_price * grid.dx
    scan = np.linspace(0.0, b_max, SCAN_POINTS)
    _, cost = book_integrals(book, grid, scan)
    infeasible = np.nonzero(wealth - cost <= 0)[0]
    if infeasible.size == 0:
        return b_max
    j = infeasible[0]
    if j == 0:
        raise InfeasibleBudgetError(f'wealth {wealth:.6g} buys nothing')
    root = optimize.brentq(lambda b: wealth - purchase_cost(book, b, grid), scan[j - 1], scan[j], xtol=1e-15)
    return root * (1 - 1e-12)

def _root_below(residual, first: float, halvings: int = 60) -> Optional[float]:
    """Root of the FOC residual in (0, first) when it is negative at first.

    Halves toward the mid-price until the residual turns positive.
    """
    hi = first
    for _ in range(halvings):
        lo = hi / 2
        g_lo = float(residual(lo))
        if not math.isfinite(g_lo):
            return None
        if g_lo > 0:
            return optimize.brentq(lambda b: float(residual(b)), lo, hi, xtol=lo * 1e-12, maxiter=500)
        hi = lo
    return None

def static_optimal(problem: InvestorProblem, utility: UtilityModel, tol: float = 1e-8) -> Decision:
    """Maximize U(t, L(B), W - cost(B)) over the feasible offsets.

    Interior optima solve U_L = (S* + B) U_C. B* = 0 is returned only when no
    offset right above the mid-price has a positive residual.
    """
    book, grid, t, wealth = problem.book, problem.grid, problem.time, problem.wealth
    upper = _budget_limit(problem)

    def state(B):
        L, cost = book_integrals(book, grid, B)
        return L, wealth - cost

    def residual(B):
        L, C = state(B)
        with np.errstate(divide='ignore', invalid='ignore'):
            return utility.u_l(t, L, C) - (problem.mid + B) * utility.u_c(t, L, C)

    def utility_at(B):
        L, C = state(B)
        with np.errstate(divide='ignore', invalid='ignore'):
            return float(utility.value(t, L, C))

    scan = np.linspace(0.0, upper, SCAN_POINTS)[1:]
    g = np.asarray(residual(scan), dtype=float)
    finite = np.isfinite(g)
    crossings = np.nonzero(finite[:-1] & finite[1:] & (g[:-1] > 0) & (g[1:] <= 0))[0]

    candidates = []  # (B, interior)
    for i in crossings:
        root = optimize.brentq(lambda b: float(residual(b)), scan[i], scan[i + 1], xtol=1e-15, maxiter=500)
        candidates.append((root, True))
    if g[-1] > 0:
        candidates.append((upper, False))
    if g[0] < 0:
        # the residual may still be positive closer to the mid-price than the first scan point
        root = _root_below(residual, scan[0])
        if root is not None:
            candidates.append((root, True))
        candidates.append((0.0, False))
    if crossings.size == 0 and not g[0] < 0:
        res = optimize.minimize_scalar(lambda b: -utility_at(b), bounds=(scan[0], upper), method='bounded',
                                       options={'xatol': 1e-12})
        if math.isfinite(res.fun):
            candidates.append((float(res.x), False))
    if not candidates:
        raise InfeasibleBudgetError('no admissible offset in the budget bracket')

    b_star, interior = max(candidates, key=lambda c: (utility_at(c[0]), -c[0]))
    L, C = state(b_star)
    foc = float(residual(b_star))
    if interior:
        with np.errstate(divide='ignore', invalid='ignore'):
            scale = abs(float(utility.u_l(t, L, C))) + abs(float(utility.u_c(t, L, C)))
        if abs(foc) > tol * scale:
            logger.warning(f'FOC residual {foc:.3g} above tolerance at B*={b_star:.10g}')
    else:
        logger.warning(f'optimum B*={b_star:.10g} is not interior; drift evaluated at the boundary')

    breakdown = drift_breakdown(problem, utility, b_star)
    signal = timing_signal(book, b_star, grid)
    logger.info(f'B*={b_star:.10g} L={L:.6g} C={C:.6g} drift={breakdown.total:.6g} signal={signal.value}')
    return Decision(
        b_star=b_star,
        asset=float(L),
        consumption=float(C),
        utility=utility_at(b_star),
        du_drift=breakdown.total,
        signal=signal,
        foc_residual=foc,
        interior=interior,
        chord_slope=float(ask_density_at(book, grid, b_star)) / b_star if b_star > 0 else None,
        boundary_slope=boundary_slope(book, grid),
        breakdown=breakdown,
    )

def sample_objective(problem: InvestorProblem, utility: UtilityModel, points: int = 401):
    """U(B) and the FOC residual on an even grid of feasible offsets (B = 0 excluded)."""
    book, grid, t = problem.book, problem.grid, problem.time
    offsets = np.linspace(0.0, _budget_limit(problem), points)[1:]
    L, cost = book_integrals(book, grid, offsets)
    C = problem.wealth - cost
    with np.errstate(divide='ignore', invalid='ignore'):
        values = utility.value(t, L, C)
        residuals = utility.u_l(t, L, C) - (problem.mid + offsets) * utility.u_c(t, L, C)
    return offsets, np.asarray(values, dtype=float), np.asarray(residuals, dtype=float)
