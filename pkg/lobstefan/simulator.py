# SPDX-License-Identifier: Apache-2.0
"""Explicit integration of the ask/bid system with the moving mid-price boundary.

Both sides live on boundary-relative grids x = dx*1 .. dx*N with a Dirichlet
ghost value 0 at x = 0 and a replicated ghost value past the last cell. A step
diffuses, adds the per-cell noise, moves the boundary by the Stefan drift of
the incoming state and re-interpolates both sides onto the new frame.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import IntegrationWarning, quad

from .exceptions import BoundaryBlowUp, DomainError, InvalidParameterError, QuadratureError
from .model import (GridSpec, InitialConditionSpec, ModelParams, OrderBookDataset, check_sigma_on_grid,
                    eval_sigma, eval_u0)
from .performance import SilentProgress, parallel_map

logger = logging.getLogger(__name__)

QUADRATURE_TOL = 1e-8

@dataclass(frozen=True)
class BookState:
    """Book snapshot: densities on the relative grids, log mid-price and time."""
    ask_rel: np.ndarray
    bid_rel: np.ndarray
    mid: float
    time: float = 0.0

    @classmethod
    def from_dataset(cls, dataset: OrderBookDataset, row: int = -1) -> 'BookState':
        row = range(dataset.n_time)[row]
        dx = dataset.grid.dx
        return cls(
            ask_rel=dataset.ask[row] / dx,
            bid_rel=dataset.bid[row] / dx,
            mid=float(dataset.mid[row]),
            time=row * dataset.grid.dt,
        )

class SimulationConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    grid: GridSpec
    seed: int = Field(default=0, ge=0)
    blowup_threshold: float = Field(default=1e6, gt=0, description="Max |dS*/dt| before truncation")
    blowup_rule: Literal['net', 'per_side'] = 'net'

@dataclass(frozen=True)
class SimulationResult:
    dataset: OrderBookDataset
    boundary_path: np.ndarray
    truncated: bool
    truncation_step: Optional[int]
    drift_path: np.ndarray
    final_state: BookState

    def __post_init__(self):
        if self.truncated != (self.truncation_step is not None):
            raise ValueError('truncated must be set exactly when truncation_step is present')

def sample_increments(rng: np.random.Generator, count: int, grid: GridSpec) -> np.ndarray:
    """Independent N(0, dt*dx) draws: the sheet increments over one space-time cell."""
    if count < 1:
        raise InvalidParameterError(f'count must be >= 1, got {count}')
    return rng.normal(0.0, math.sqrt(grid.dt * grid.dx), size=count)

def diffuse_step(v, alpha: float, grid: GridSpec) -> np.ndarray:
    grid.check_cfl(alpha)
    v = np.asarray(v, dtype=float)
    r = grid.cfl_ratio(alpha)
    padded = np.concatenate(([0.0], v, v[-1:]))
    return v + r * (padded[2:] - 2.0 * v + padded[:-2])

def evolve_side(v, alpha: float, amplitude, xi, grid: GridSpec) -> np.ndarray:
    """Diffuse one side and add amplitude*xi as cell volume (density += amplitude*xi/dx)."""
    out = diffuse_step(v, alpha, grid)
    if xi is not None:
        out = out + np.asarray(amplitude) * xi / grid.dx
    return out

def boundary_drift(state: BookState, params: ModelParams, grid: GridSpec) -> float:
    """dS*/dt from the one-sided slopes at the boundary.

    In relative coordinates the bid slope dV_B/dS(S*-) is -dV_B~/dx(0+).
    """
    ask_slope = (state.ask_rel[0] - 0.0) / grid.dx
    bid_slope = -(state.bid_rel[0] - 0.0) / grid.dx
    return float((ask_slope + bid_slope) / params.rho)

def _check_blowup(state: BookState, params: ModelParams, config: SimulationConfig, drift: float):
    if config.blowup_rule == 'per_side':
        speed = max(abs(state.ask_rel[0]), abs(state.bid_rel[0])) / (params.rho * config.grid.dx)
    else:
        speed = abs(drift)
    if speed >= config.blowup_threshold:
        raise BoundaryBlowUp(speed, config.blowup_threshold)

def reframe(v, shift: float, grid: GridSpec) -> np.ndarray:
    """Values of a side at x + shift for x on the grid.

    Points left of the boundary read the Dirichlet value 0, points past the last
    cell read the last cell.
    """
    v = np.asarray(v, dtype=float)
    if shift == 0.0:
        return v.copy()
    xs = grid.x_nodes
    return np.interp(xs + shift, np.concatenate(([0.0], xs)), np.concatenate(([0.0], v)), left=0.0)

def step(state: BookState, params: ModelParams, config: SimulationConfig,
         rng: Optional[np.random.Generator] = None) -> BookState:
    """Advance the book by one dt. rng=None runs the noiseless (W = 0) system."""
    grid = config.grid
    drift = boundary_drift(state, params, grid)
    _check_blowup(state, params, config, drift)

    n = grid.n_price
    if rng is None:
        ask = diffuse_step(state.ask_rel, params.alpha_ask, grid)
        bid = diffuse_step(state.bid_rel, params.alpha_bid, grid)
    else:
        xi = sample_increments(rng, 2 * n, grid)
        x = grid.x_nodes
        ask = evolve_side(state.ask_rel, params.alpha_ask, eval_sigma(params.sigma_ask, x), xi[:n], grid)
        bid = evolve_side(state.bid_rel, params.alpha_bid, eval_sigma(params.sigma_bid, x), xi[n:], grid)

    shift = drift * grid.dt
    ask = np.maximum(reframe(ask, shift, grid), 0.0)
    bid = np.maximum(reframe(bid, -shift, grid), 0.0)
    return BookState(ask_rel=ask, bid_rel=bid, mid=state.mid + shift, time=state.time + grid.dt)

def initial_state(params: ModelParams, grid: GridSpec, initial_mid: float = 0.0) -> BookState:
    x = grid.x_nodes
    sides = []
    for name, spec in (('ask', params.u0_ask), ('bid', params.u0_bid)):
        density = np.asarray(eval_u0(spec, x), dtype=float)
        if np.any(density < 0):
            logger.warning(f'u0_{name} is negative on {int(np.sum(density < 0))} cells, clamped to 0')
            density = np.maximum(density, 0.0)
        sides.append(density)
    return BookState(ask_rel=sides[0], bid_rel=sides[1], mid=float(initial_mid), time=0.0)

def _integrate(params: ModelParams, config: SimulationConfig, initial_mid: float,
               rng: Optional[np.random.Generator], progress_hooks) -> SimulationResult:
    grid = config.grid
    progress_hooks = progress_hooks or SilentProgress()
    n_time, n_price = grid.n_time, grid.n_price
    asks = np.empty((n_time, n_price))
    bids = np.empty((n_time, n_price))
    mids = np.empty(n_time)
    drifts: List[float] = []

    state = initial_state(params, grid, initial_mid)
    asks[0], bids[0], mids[0] = state.ask_rel, state.bid_rel, state.mid
    rows = 1
    truncation_step = None
    progress_hooks.phase(0, 'Integrating book', n_time - 1)
    for k in range(n_time - 1):
        drift = boundary_drift(state, params, grid)
        try:
            state = step(state, params, config, rng)
        except BoundaryBlowUp as e:
            logger.warning(f'Truncated at step {k} (t={k * grid.dt:.6g}): {e}')
            truncation_step = k
            break
        drifts.append(drift)
        asks[rows], bids[rows], mids[rows] = state.ask_rel, state.bid_rel, state.mid
        rows += 1
        progress_hooks.subphase_step()

    dataset = OrderBookDataset(
        ask=asks[:rows] * grid.dx,
        bid=bids[:rows] * grid.dx,
        mid=mids[:rows],
        grid=grid.with_n_time(rows),
    )
    return SimulationResult(
        dataset=dataset,
        boundary_path=dataset.mid.copy(),
        truncated=truncation_step is not None,
        truncation_step=truncation_step,
        drift_path=np.array(drifts),
        final_state=state,
    )

def simulate(params: ModelParams, config: SimulationConfig, initial_mid: float = 0.0,
             progress_hooks=None) -> SimulationResult:
    """Stochastic run from the u0-sampled book; blow-up returns a flagged partial result."""
    config.grid.check_cfl(params.alpha_ask, params.alpha_bid)
    check_sigma_on_grid(params.sigma_ask, config.grid)
    check_sigma_on_grid(params.sigma_bid, config.grid)
    rng = np.random.default_rng(config.seed)
    return _integrate(params, config, initial_mid, rng, progress_hooks)

def solve_deterministic(params: ModelParams, grid: GridSpec, initial_mid: float = 0.0,
                        blowup_threshold: float = math.inf, progress_hooks=None) -> SimulationResult:
    """The W = 0 system; consumes no random numbers."""
    grid.check_cfl(params.alpha_ask, params.alpha_bid)
    config = SimulationConfig(grid=grid, seed=0, blowup_threshold=blowup_threshold)
    return _integrate(params, config, initial_mid, None, progress_hooks)

def simulate_ensemble(params: ModelParams, config: SimulationConfig, seeds: Iterable[int],
                      initial_mid: float = 0.0, max_workers: Optional[int] = None) -> List[SimulationResult]:
    """Independent runs, one generator per seed, returned in seed order."""
    def run(seed):
        return simulate(params, config.model_copy(update={'seed': int(seed)}), initial_mid)
    return parallel_map(run, seeds, max_workers)

def reference_halfline_heat(u0: InitialConditionSpec, alpha: float, t: float, x: float) -> float:
    """Image-method solution of the Dirichlet heat equation on the half-line."""
    if t <= 0:
        raise DomainError(f't must be positive, got {t}')
    if x < 0:
        raise DomainError(f'x must be non-negative, got {x}')
    width = 4.0 * alpha * t
    norm = math.sqrt(math.pi * width)

    def integrand(y):
        kernel = math.exp(-(x - y) ** 2 / width) - math.exp(-(x + y) ** 2 / width)
        return kernel / norm * eval_u0(u0, y)

    # the kernel is below exp(-100) further out
    reach = 10.0 * math.sqrt(width)
    lo, hi = max(0.0, x - reach), x + reach
    points = [x] if lo < x < hi else None
    with warnings.catch_warnings():
        warnings.simplefilter('error', IntegrationWarning)
        try:
            value, abserr = quad(integrand, lo, hi, points=points, epsabs=QUADRATURE_TOL / 10, epsrel=0.0, limit=200)
        except IntegrationWarning as e:
            raise QuadratureError(f'heat reference at t={t}, x={x}: {e}') from e
    if abserr > QUADRATURE_TOL:
        raise QuadratureError(f'heat reference at t={t}, x={x}: error estimate {abserr:.3g}')
    return value
