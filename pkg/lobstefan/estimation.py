# SPDX-License-Identifier: Apache-2.0
"""Two-stage parameter estimation from order-book matrices.

Stage 1 fits the diffusion rate and the noise scaling of each side by
maximum likelihood on the residuals of the explicit scheme, choosing the
scaling degree by AIC. Stage 2 fits the initial profiles and the Stefan
constant by repeated noiseless solves, scoring candidates with
degree count + book error + theta0 * boundary error.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import optimize

from .exceptions import (ConvergenceError, DataError, InvalidParameterError, LobStefanError, ShapeMismatchError,
                         SingularMatrixError)
from .model import (SIGMA_EXPONENT, GridSpec, InitialConditionSpec, ModelParams, OrderBookDataset, ScalingSpec,
                    eval_u0)
from .performance import SilentProgress, parallel_map
from .simulator import SimulationResult, solve_deterministic

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-12

class EstimationConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    degree_range_stage1: Tuple[int, int] = (1, 10)
    degree_range_stage2: Tuple[int, int] = (0, 4)
    theta0: float = Field(default=1.0, ge=0, description="Weight of the mid-price error")
    optimizer_tol: float = Field(default=1e-8, gt=0)
    restarts: int = Field(default=5, ge=0)
    seed: int = Field(default=0, ge=0)
    stage2_restarts: int = Field(default=1, ge=1)
    stage2_max_evals: int = Field(default=400, ge=10)
    max_workers: Optional[int] = Field(default=None, ge=1)

    @field_validator('degree_range_stage1', 'degree_range_stage2')
    @classmethod
    def range_not_empty(cls, v):
        if v[0] > v[1]:
            raise ValueError(f'empty degree range {v}')
        return v

    @field_validator('degree_range_stage1')
    @classmethod
    def stage1_degree_positive(cls, v):
        if v[0] < 1:
            raise ValueError('noise scaling degree starts at 1')
        return v

    @field_validator('degree_range_stage2')
    @classmethod
    def stage2_degree_non_negative(cls, v):
        if v[0] < 0:
            raise ValueError('profile degree starts at 0')
        return v

    def stage1_degrees(self) -> List[int]:
        return list(range(self.degree_range_stage1[0], self.degree_range_stage1[1] + 1))

    def stage2_degrees(self) -> List[Tuple[int, int]]:
        lo, hi = self.degree_range_stage2
        return [(ca, cb) for ca in range(lo, hi + 1) for cb in range(lo, hi + 1)]

class DegreeFit(BaseModel):
    model_config = ConfigDict(frozen=True)

    degree: int
    alpha: float
    coeffs: Tuple[float, ...]
    neg2ll: float
    aic: float
    converged: bool = True

class Stage1Fit(BaseModel):
    model_config = ConfigDict(frozen=True)

    side: Literal['ask', 'bid']
    alpha_hat: float
    degree_hat: int
    p_hat: Tuple[float, ...]
    aic: float
    per_degree_table: List[DegreeFit]

    @model_validator(mode='after')
    def degree_hat_minimizes_aic(self):
        if self.per_degree_table:
            best = min(row.aic for row in self.per_degree_table)
            if self.aic != best:
                raise ValueError(f'aic {self.aic} is not the table minimum {best}')
        return self

    @property
    def scaling(self) -> ScalingSpec:
        return ScalingSpec(coeffs=self.p_hat)

class Stage2Candidate(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan='constants')

    degree_ask: int
    degree_bid: int
    objective: float
    converged: bool

class Stage2Fit(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan='constants')

    q_ask_hat: InitialConditionSpec
    q_bid_hat: InitialConditionSpec
    rho_hat: float
    mse1: float
    mse2: float
    theta0: float
    objective: float
    rho_identified: bool = True
    converged: bool = True
    candidates: List[Stage2Candidate] = []

    @property
    def degree_ask(self) -> int:
        return self.q_ask_hat.degree

    @property
    def degree_bid(self) -> int:
        return self.q_bid_hat.degree

    @model_validator(mode='after')
    def objective_adds_up(self):
        expected = self.degree_ask + self.degree_bid + self.mse1 + self.theta0 * self.mse2
        if not math.isclose(self.objective, expected, rel_tol=1e-12, abs_tol=1e-300):
            raise ValueError(f'objective {self.objective} != {expected}')
        return self

def _check_matrix(D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] < 2 or D.shape[1] < 3:
        raise ShapeMismatchError(f'need a T x N matrix with T >= 2 and N >= 3, got shape {D.shape}')
    return D

def residual_field(D, alpha: float, grid: GridSpec) -> np.ndarray:
    """Scheme residuals: R[t, S-1] = (D[t+1,S] - D[t,S]) - alpha*dt/dx^2 * (D[t,S-1] - 2D[t,S] + D[t,S+1])."""
    D = _check_matrix(D)
    r = grid.dt / grid.dx ** 2
    time_diff = np.diff(D[:, 1:-1], axis=0)
    space_diff = np.diff(D[:-1], n=2, axis=1)
    return time_diff - alpha * r * space_diff

def _check_coeffs(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size < 2:
        raise InvalidParameterError(f'p needs degree >= 1, got {p.size} coefficient(s)')
    if not np.all(np.isfinite(p)):
        raise InvalidParameterError('p has non-finite coefficients')
    return p

def _price_powers(n_inner: int, degree: int, dx: float) -> Tuple[np.ndarray, np.ndarray]:
    """x_S = S*dx for S = 1..n_inner and the basis x_S^(j+1), j = 0..degree."""
    x = dx * np.arange(1, n_inner + 1)
    phi = x[:, None] ** np.arange(1, degree + 2)[None, :]
    return x, phi

def neg2_loglik(D, alpha: float, p, grid: GridSpec) -> float:
    """-2 log-likelihood: sum over t, S of (R[t,S] * (1 + sum_j p_j x_S^(j+1)) / x_S^1.6)^2.

    S runs 1..N-2 and x_S = S*dx, while residual column S is centred on the
    stored cell at (S+1)*dx. The simulator scales that cell's noise with
    sigma((S+1)*dx), so on its own output the weights sit one cell closer
    to the boundary than the noise they normalize.
    """
    p = _check_coeffs(p)
    R = residual_field(D, alpha, grid)
    x, phi = _price_powers(R.shape[1], p.size - 1, grid.dx)
    weights = (1.0 + phi @ p) / x ** SIGMA_EXPONENT
    return float(np.sum((R * weights[None, :]) ** 2))

@dataclass
class LikelihoodMoments:
    """Per-column sums that make -2 log-likelihood an O(N) function of (alpha, p).

    With a = time difference and b = (dt/dx^2) * second space difference,
    sum_t R^2 = aa - 2*alpha*ab + alpha^2*bb for every price column.
    """
    aa: np.ndarray
    ab: np.ndarray
    bb: np.ndarray
    x: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, D, grid: GridSpec) -> 'LikelihoodMoments':
        D = _check_matrix(D)
        a = np.diff(D[:, 1:-1], axis=0)
        b = grid.dt / grid.dx ** 2 * np.diff(D[:-1], n=2, axis=1)
        x = grid.dx * np.arange(1, a.shape[1] + 1)
        return cls(aa=np.sum(a * a, axis=0), ab=np.sum(a * b, axis=0), bb=np.sum(b * b, axis=0), x=x)

    def residual_energy(self, alpha: float) -> np.ndarray:
        # a true sum of squares; round-off must not make it negative
        return np.maximum(self.aa - 2.0 * alpha * self.ab + alpha ** 2 * self.bb, 0.0)

    def basis(self, degree: int) -> np.ndarray:
        return self.x[:, None] ** np.arange(1, degree + 2)[None, :]

    def value(self, alpha: float, p) -> float:
        p = np.asarray(p, dtype=float)
        e = 1.0 + self.basis(p.size - 1) @ p
        return float(np.sum(e ** 2 * self.residual_energy(alpha) / self.x ** (2 * SIGMA_EXPONENT)))

    def gradient(self, alpha: float, p) -> np.ndarray:
        """Gradient in (alpha, p0, ..., pd)."""
        p = np.asarray(p, dtype=float)
        phi = self.basis(p.size - 1)
        e = 1.0 + phi @ p
        scale = self.x ** (2 * SIGMA_EXPONENT)
        energy = self.residual_energy(alpha)
        d_alpha = np.sum(np.where(energy > 0, e ** 2 * (2.0 * alpha * self.bb - 2.0 * self.ab) / scale, 0.0))
        d_p = phi.T @ (2.0 * e * energy / scale)
        return np.concatenate(([d_alpha], d_p))

    def least_squares_alpha(self, p=None) -> float:
        """Weighted least-squares alpha at fixed p (p = 0 when omitted)."""
        w2 = 1.0 / self.x ** (2 * SIGMA_EXPONENT)
        if p is not None:
            p = np.asarray(p, dtype=float)
            w2 = w2 * (1.0 + self.basis(p.size - 1) @ p) ** 2
        denom = np.sum(w2 * self.bb)
        if denom <= 0:
            return float('nan')
        return float(np.sum(w2 * self.ab) / denom)

def _weighted_fit(c: np.ndarray, phi: np.ndarray, alpha0: float, d: int) -> np.ndarray:
    """Minimize sum_S c_S * (1 + phi_S . p)^2, i.e. solve A p = -b."""
    c = np.maximum(c, 0.0)
    if not np.any(c > 0) or not np.all(np.isfinite(c)):
        raise SingularMatrixError(f'normal equations for degree {d} at alpha={alpha0:.6g} are singular')
    design = np.sqrt(c)[:, None] * phi
    # unit columns; the raw powers of x span many decades
    norms = np.linalg.norm(design, axis=0)
    solution, _, rank, _ = np.linalg.lstsq(design / norms, -np.sqrt(c), rcond=None)
    if rank < d + 1:
        logger.debug(f'normal equations for degree {d} have rank {rank} < {d + 1}; using the minimum-norm solution')
    return solution / norms

def _degenerate_from_moments(moments: LikelihoodMoments, alpha0: float, d: int) -> np.ndarray:
    c = moments.residual_energy(alpha0) / moments.x ** (2 * SIGMA_EXPONENT)
    return _weighted_fit(c, moments.basis(d), alpha0, d)

def fit_stage1_degenerate(D, alpha0: float, d: int, grid: GridSpec) -> np.ndarray:
    """Exact minimizer in p at known alpha: solves A p = -b with
    A[m,n] = sum w^2 phi_m phi_n and b[m] = sum w^2 phi_m."""
    if d < 1:
        raise InvalidParameterError(f'degree must be >= 1, got {d}')
    R = residual_field(D, alpha0, grid)
    x, phi = _price_powers(R.shape[1], d, grid.dx)
    return _weighted_fit(np.sum(R * R, axis=0) / x ** (2 * SIGMA_EXPONENT), phi, alpha0, d)

def _start_points(moments: LikelihoodMoments, d: int, config: EstimationConfig) -> List[np.ndarray]:
    alpha_ls = moments.least_squares_alpha()
    if not math.isfinite(alpha_ls) or alpha_ls <= ALPHA_FLOOR:
        alpha_ls = 1.0
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, d]))
    alphas = [alpha_ls] + list(alpha_ls * 10.0 ** rng.uniform(-1.0, 1.0, config.restarts))
    starts = []
    for alpha in alphas:
        try:
            p = _degenerate_from_moments(moments, alpha, d)
        except SingularMatrixError:
            p = np.zeros(d + 1)
        starts.append(np.concatenate(([alpha], p)))
    return starts

def _fit_degree(D, grid: GridSpec, moments: LikelihoodMoments, d: int, config: EstimationConfig) -> DegreeFit:
    def objective(theta):
        return moments.value(theta[0], theta[1:]), moments.gradient(theta[0], theta[1:])

    bounds = [(ALPHA_FLOOR, None)] + [(None, None)] * (d + 1)
    best_theta, best_value, converged = None, math.inf, False
    for i, start in enumerate(_start_points(moments, d, config)):
        start_value = moments.value(start[0], start[1:])
        candidates = [(start, start_value, False)]
        try:
            res = optimize.minimize(objective, start, jac=True, method='L-BFGS-B', bounds=bounds,
                                    options={'ftol': config.optimizer_tol * 1e-6, 'gtol': 1e-14, 'maxiter': 5000})
            candidates.append((res.x, float(res.fun), bool(res.success)))
            logger.debug(f'degree {d} restart {i}: alpha={res.x[0]:.6g} -2ll={res.fun:.6g} ({res.message})')
        except (ValueError, FloatingPointError) as e:
            logger.debug(f'degree {d} restart {i} failed: {e}')
        for theta, value, ok in candidates:
            if math.isfinite(value) and value < best_value:
                best_theta, best_value = np.array(theta, dtype=float), value
            converged = converged or ok

    if best_theta is None:
        raise ConvergenceError(f'no finite likelihood for degree {d}')

    # moments lose digits to cancellation near a perfect fit; score with the direct sum
    neg2ll = neg2_loglik(D, best_theta[0], best_theta[1:], grid)
    # p is quadratic at fixed alpha, so finish it exactly
    try:
        polished = fit_stage1_degenerate(D, best_theta[0], d, grid)
        polished_value = neg2_loglik(D, best_theta[0], polished, grid)
        if polished_value <= neg2ll:
            best_theta[1:], neg2ll = polished, polished_value
    except SingularMatrixError:
        pass

    if not converged:
        logger.warning(f'stage-1 degree {d} did not converge; keeping best value {neg2ll:.6g}')
    return DegreeFit(
        degree=d,
        alpha=float(best_theta[0]),
        coeffs=tuple(float(c) for c in best_theta[1:]),
        neg2ll=neg2ll,
        aic=2 * d + neg2ll,
        converged=converged,
    )

def fit_stage1_fixed_degree(D, d: int, grid: GridSpec, config: Optional[EstimationConfig] = None) -> DegreeFit:
    if d < 1:
        raise InvalidParameterError(f'degree must be >= 1, got {d}')
    config = config or EstimationConfig()
    return _fit_degree(D, grid, LikelihoodMoments.from_matrix(D, grid), d, config)

def select_stage1_aic(D, grid: GridSpec, config: Optional[EstimationConfig] = None,
                      side: Literal['ask', 'bid'] = 'ask', progress_hooks=None) -> Stage1Fit:
    """Fit every degree in range and keep the AIC minimum, smaller degree on ties."""
    config = config or EstimationConfig()
    progress_hooks = progress_hooks or SilentProgress()
    moments = LikelihoodMoments.from_matrix(D, grid)
    degrees = config.stage1_degrees()
    progress_hooks.set_substeps(len(degrees))

    def fit(d):
        try:
            return _fit_degree(D, grid, moments, d, config)
        except LobStefanError as e:
            logger.warning(f'{side} stage-1 degree {d} failed: {e}')
            return None
        finally:
            progress_hooks.subphase_step()

    table = [row for row in parallel_map(fit, degrees, config.max_workers) if row is not None]
    if not table:
        raise ConvergenceError(f'{side} stage-1 fit failed for every degree in {config.degree_range_stage1}')
    best = min(table, key=lambda row: (row.aic, row.degree))
    logger.info(f'{side} stage 1: degree {best.degree}, alpha={best.alpha:.6g}, AIC={best.aic:.6g}')
    return Stage1Fit(side=side, alpha_hat=best.alpha, degree_hat=best.degree, p_hat=best.coeffs,
                     aic=best.aic, per_degree_table=table)

def _vbar_dataset(vbar) -> OrderBookDataset:
    return vbar.dataset if isinstance(vbar, SimulationResult) else vbar

def mse_book(dataset: OrderBookDataset, vbar) -> float:
    """Mean squared volume error over both sides and all cells."""
    other = _vbar_dataset(vbar)
    if dataset.ask.shape != other.ask.shape:
        raise ShapeMismatchError(f'dataset is {dataset.n_time}x{dataset.n_price} '
                                 f'but the solution is {other.n_time}x{other.n_price}')
    total = np.sum((dataset.ask - other.ask) ** 2) + np.sum((dataset.bid - other.bid) ** 2)
    return float(total / (2 * dataset.n_time * dataset.n_price))

def stefan_slopes(dataset: OrderBookDataset) -> np.ndarray:
    """Net one-sided density slope at the boundary per row: (ask - bid density at the first cell) / dx."""
    dx = dataset.grid.dx
    return (dataset.ask[:, 0] - dataset.bid[:, 0]) / dx ** 2

def mse_boundary(dataset: OrderBookDataset, vbar, rho: float) -> float:
    """Mean squared Stefan residual rho * dP/dt - (boundary slopes of vbar) over t < T-1."""
    other = _vbar_dataset(vbar)
    if dataset.n_time < 2:
        raise ShapeMismatchError(f'boundary error needs T >= 2, got {dataset.n_time}')
    if other.n_time != dataset.n_time:
        raise ShapeMismatchError(f'dataset has {dataset.n_time} rows but the solution has {other.n_time}')
    velocity = np.diff(dataset.mid) / dataset.grid.dt
    residual = rho * velocity - stefan_slopes(other)[:-1]
    return float(np.mean(residual ** 2))

def _profile_basis(x: np.ndarray, degree: int, gamma: float) -> np.ndarray:
    return (x * np.exp(-gamma * x))[:, None] * x[:, None] ** np.arange(degree + 1)[None, :]

def fit_initial_profile(density: np.ndarray, grid: GridSpec, degree: int) -> InitialConditionSpec:
    """Least-squares x*q(x)*exp(-gamma*x) through one density row; gamma by bounded scalar search."""
    x = grid.x_nodes

    def solve(log_gamma):
        basis = _profile_basis(x, degree, math.exp(log_gamma))
        coeffs, *_ = np.linalg.lstsq(basis, density, rcond=None)
        return coeffs, float(np.sum((basis @ coeffs - density) ** 2))

    res = optimize.minimize_scalar(lambda lg: solve(lg)[1], bounds=(math.log(1e-3), math.log(1e3)),
                                   method='bounded', options={'xatol': 1e-12})
    coeffs, _ = solve(res.x)
    return InitialConditionSpec(coeffs=tuple(float(c) for c in coeffs), gamma=math.exp(res.x))

def initial_rho(dataset: OrderBookDataset) -> Optional[float]:
    """Least-squares rho of the data's own Stefan relation; None when the mid-price never moves."""
    velocity = np.diff(dataset.mid) / dataset.grid.dt
    denom = float(np.dot(velocity, velocity))
    if denom == 0:
        return None
    rho = float(np.dot(velocity, stefan_slopes(dataset)[:-1]) / denom)
    return rho if rho > 0 and math.isfinite(rho) else None

@dataclass
class _Stage2Problem:
    dataset: OrderBookDataset
    stage1_ask: Stage1Fit
    stage1_bid: Stage1Fit
    config: EstimationConfig
    degree_ask: int
    degree_bid: int
    memo: Dict[Tuple[float, ...], Tuple[float, float, float]] = field(default_factory=dict)

    def unpack(self, theta) -> Tuple[InitialConditionSpec, InitialConditionSpec, float]:
        na = self.degree_ask + 1
        nb = self.degree_bid + 1
        q_ask = tuple(float(c) for c in theta[:na])
        q_bid = tuple(float(c) for c in theta[na:na + nb])
        log_ga, log_gb, log_rho = theta[na + nb:]
        return (InitialConditionSpec(coeffs=q_ask, gamma=math.exp(log_ga)),
                InitialConditionSpec(coeffs=q_bid, gamma=math.exp(log_gb)),
                math.exp(log_rho))

    def pack(self, u0_ask: InitialConditionSpec, u0_bid: InitialConditionSpec, rho: float) -> np.ndarray:
        return np.array(list(u0_ask.coeffs) + list(u0_bid.coeffs)
                        + [math.log(u0_ask.gamma), math.log(u0_bid.gamma), math.log(rho)])

    def evaluate(self, theta) -> Tuple[float, float, float]:
        """(objective, mse1, mse2); inf for candidates the solver cannot use."""
        key = tuple(float(v) for v in theta)
        if key in self.memo:
            return self.memo[key]
        grid = self.dataset.grid
        try:
            u0_ask, u0_bid, rho = self.unpack(theta)
            params = ModelParams(
                alpha_ask=self.stage1_ask.alpha_hat, alpha_bid=self.stage1_bid.alpha_hat,
                sigma_ask=self.stage1_ask.scaling, sigma_bid=self.stage1_bid.scaling,
                u0_ask=u0_ask, u0_bid=u0_bid, rho=rho,
            )
            # negative initial books are outside the profile family
            if np.any(eval_u0(u0_ask, grid.x_nodes) < 0) or np.any(eval_u0(u0_bid, grid.x_nodes) < 0):
                result = (math.inf, math.inf, math.inf)
            else:
                vbar = solve_deterministic(params, grid, initial_mid=float(self.dataset.mid[0]))
                mse1 = mse_book(self.dataset, vbar)
                mse2 = mse_boundary(self.dataset, vbar, rho)
                objective = self.degree_ask + self.degree_bid + mse1 + self.config.theta0 * mse2
                result = (objective, mse1, mse2) if math.isfinite(objective) else (math.inf, math.inf, math.inf)
        except (LobStefanError, ValueError, OverflowError):
            result = (math.inf, math.inf, math.inf)
        self.memo[key] = result
        return result

    def initial_theta(self) -> Tuple[np.ndarray, bool]:
        grid = self.dataset.grid
        u0_ask = fit_initial_profile(self.dataset.ask[0] / grid.dx, grid, self.degree_ask)
        u0_bid = fit_initial_profile(self.dataset.bid[0] / grid.dx, grid, self.degree_bid)
        rho = initial_rho(self.dataset) if self.config.theta0 > 0 else None
        identified = rho is not None
        return self.pack(u0_ask, u0_bid, rho if identified else 1.0), identified

def _fit_degree_pair(problem: _Stage2Problem) -> Tuple[np.ndarray, float, bool, bool]:
    start, identified = problem.initial_theta()
    config = problem.config
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, problem.degree_ask, problem.degree_bid]))
    starts = [start] + [start + rng.normal(0.0, 0.1, start.size) * (np.abs(start) + 0.1)
                        for _ in range(config.stage2_restarts - 1)]

    best_theta, best_value, converged = start, problem.evaluate(start)[0], False
    for i, x0 in enumerate(starts):
        res = optimize.minimize(lambda th: problem.evaluate(th)[0], x0, method='Nelder-Mead',
                                options={'maxfev': config.stage2_max_evals, 'xatol': config.optimizer_tol,
                                         'fatol': config.optimizer_tol * 1e-6})
        logger.debug(f'stage 2 ({problem.degree_ask},{problem.degree_bid}) start {i}: '
                     f'objective={res.fun:.6g}, evals={res.nfev}, memo={len(problem.memo)}')
        converged = converged or bool(res.success)
        if res.fun < best_value:
            best_theta, best_value = np.array(res.x), float(res.fun)
    return best_theta, best_value, converged, identified

def fit_stage2(dataset: OrderBookDataset, stage1_ask: Stage1Fit, stage1_bid: Stage1Fit,
               config: Optional[EstimationConfig] = None, progress_hooks=None) -> Stage2Fit:
    """Search every (c_A, c_B) pair and minimize c_A + c_B + MSE1 + theta0*MSE2 within each."""
    config = config or EstimationConfig()
    progress_hooks = progress_hooks or SilentProgress()
    if dataset.n_time < 2:
        raise DataError(f'stage 2 needs T >= 2, got {dataset.n_time}')
    dataset.grid.check_cfl(stage1_ask.alpha_hat, stage1_bid.alpha_hat)
    logger.info('Stage 2 measures the mid-price error as the discrete Stefan residual '
                'rho*dP/dt - boundary slopes of the fitted book')

    pairs = config.stage2_degrees()
    progress_hooks.set_substeps(len(pairs))

    def run(pair):
        problem = _Stage2Problem(dataset, stage1_ask, stage1_bid, config, *pair)
        try:
            return problem, _fit_degree_pair(problem)
        finally:
            progress_hooks.subphase_step()

    outcomes = parallel_map(run, pairs, config.max_workers)
    candidates = [Stage2Candidate(degree_ask=p.degree_ask, degree_bid=p.degree_bid, objective=value, converged=ok)
                  for p, (_, value, ok, _) in outcomes]
    feasible = [o for o in outcomes if math.isfinite(o[1][1])]
    if not feasible:
        raise ConvergenceError('stage 2 found no candidate the solver could evaluate')
    problem, (theta, _, converged, identified) = min(
        feasible, key=lambda o: (o[1][1], o[0].degree_ask + o[0].degree_bid, o[0].degree_ask, o[0].degree_bid))

    # fresh solve, so the reported parts belong to the reported parameters
    problem.memo.clear()
    objective, mse1, mse2 = problem.evaluate(theta)
    u0_ask, u0_bid, rho = problem.unpack(theta)
    if not converged:
        logger.warning(f'stage 2 simplex did not converge for ({problem.degree_ask},{problem.degree_bid}); '
                       f'reporting best objective {objective:.6g}')
    if not identified:
        logger.warning('rho is not identified by this fit (theta0 = 0 or a flat mid-price)')
    logger.info(f'stage 2: degrees ({problem.degree_ask},{problem.degree_bid}), rho={rho:.6g}, '
                f'MSE1={mse1:.6g}, MSE2={mse2:.6g}, objective={objective:.6g}')
    return Stage2Fit(
        q_ask_hat=u0_ask,
        q_bid_hat=u0_bid,
        rho_hat=rho,
        mse1=mse1,
        mse2=mse2,
        theta0=config.theta0,
        objective=objective,
        rho_identified=identified,
        converged=converged,
        candidates=candidates,
    )
