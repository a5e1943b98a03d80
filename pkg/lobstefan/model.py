# SPDX-License-Identifier: Apache-2.0
"""Domain types, the sigma and u0 families, and the difference operators."""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .exceptions import CFLViolationError, DomainError, NegativeVolumeError, ShapeMismatchError, DataError

logger = logging.getLogger(__name__)

SIGMA_EXPONENT = 1.6
CFL_LIMIT = 0.5

def _finite(values):
    if not all(math.isfinite(v) for v in values):
        raise ValueError('coefficients must be finite')
    return values

class ScalingSpec(BaseModel):
    """Noise scaling sigma(x) = x**1.6 / (1 + x*p(x)).

    Coefficients of p are stored lowest degree first.
    """
    model_config = ConfigDict(frozen=True)

    coeffs: Tuple[float, ...]

    @field_validator('coeffs')
    @classmethod
    def degree_at_least_one(cls, v):
        if len(v) < 2:
            raise ValueError('p needs degree >= 1 (at least two coefficients)')
        return _finite(v)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

class InitialConditionSpec(BaseModel):
    """Initial book profile u0(x) = x*q(x)*exp(-gamma*x)."""
    model_config = ConfigDict(frozen=True)

    coeffs: Tuple[float, ...]
    gamma: float = Field(gt=0, description="Decay rate per unit log-price")

    @field_validator('coeffs')
    @classmethod
    def not_empty(cls, v):
        if len(v) < 1:
            raise ValueError('q needs at least one coefficient')
        return _finite(v)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

class ModelParams(BaseModel):
    """Exogenous parameters of the ask/bid system."""
    model_config = ConfigDict(frozen=True)

    alpha_ask: float = Field(gt=0)
    alpha_bid: float = Field(gt=0)
    sigma_ask: ScalingSpec
    sigma_bid: ScalingSpec
    u0_ask: InitialConditionSpec
    u0_bid: InitialConditionSpec
    rho: float = Field(gt=0, description="Stefan constant")

class GridSpec(BaseModel):
    """Sampling steps and sizes of the time/price grid."""
    model_config = ConfigDict(frozen=True)

    dt: float = Field(gt=0)
    dx: float = Field(gt=0)
    n_time: int = Field(ge=1)
    n_price: int = Field(ge=3)

    @property
    def x_nodes(self) -> np.ndarray:
        """Relative coordinates dx*1 .. dx*N of the stored cells."""
        return self.dx * np.arange(1, self.n_price + 1)

    def cfl_ratio(self, alpha: float) -> float:
        return alpha * self.dt / self.dx ** 2

    def check_cfl(self, *alphas: float):
        ratio = self.cfl_ratio(max(alphas))
        # 1e-12 absorbs round-off in ratios configured as exactly 1/2
        if ratio > CFL_LIMIT * (1 + 1e-12):
            raise CFLViolationError(
                f'CFL ratio {ratio:.6g} exceeds {CFL_LIMIT} (alpha={max(alphas):.6g}, dt={self.dt:.6g}, dx={self.dx:.6g})'
            )

    def with_n_time(self, n_time: int) -> 'GridSpec':
        return self.model_copy(update={'n_time': n_time})

@dataclass(frozen=True)
class OrderBookDataset:
    """Ask/bid volume matrices (T x N, boundary-relative) and the log mid-price path."""
    ask: np.ndarray
    bid: np.ndarray
    mid: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        ask = np.array(self.ask, dtype=float, ndmin=2)
        bid = np.array(self.bid, dtype=float, ndmin=2)
        mid = np.array(self.mid, dtype=float).reshape(-1)
        if ask.shape != bid.shape:
            raise ShapeMismatchError(f'ask is {ask.shape[0]}x{ask.shape[1]} but bid is {bid.shape[0]}x{bid.shape[1]}')
        if ask.shape[0] != mid.shape[0]:
            raise ShapeMismatchError(f'book has {ask.shape[0]} rows but mid has {mid.shape[0]} values')
        if (self.grid.n_time, self.grid.n_price) != ask.shape:
            raise ShapeMismatchError(
                f'grid declares {self.grid.n_time}x{self.grid.n_price} but book is {ask.shape[0]}x{ask.shape[1]}'
            )
        for name, arr in (('ask', ask), ('bid', bid), ('mid', mid)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f'{name} contains non-finite values')
        for name, arr in (('ask', ask), ('bid', bid)):
            if np.any(arr < 0):
                t, s = np.argwhere(arr < 0)[0]
                raise NegativeVolumeError(f'{name} has negative volume {arr[t, s]:.6g} at row {t + 1}, column {s + 1}')
        for name, arr in (('ask', ask), ('bid', bid), ('mid', mid)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_time(self) -> int:
        return self.ask.shape[0]

    @property
    def n_price(self) -> int:
        return self.ask.shape[1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.grid.dt, self.grid.dx], dtype='<f8').tobytes())
        for arr in (self.ask, self.bid, self.mid):
            h.update(np.ascontiguousarray(arr, dtype='<f8').tobytes())
        return h.hexdigest()

def _scalar_or_array(out):
    return float(out) if np.ndim(out) == 0 else out

def eval_sigma(spec: ScalingSpec, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError('sigma is defined for x >= 0 only')
    denom = 1.0 + x * P.polyval(x, spec.coeffs)
    if np.any(denom <= 0):
        bad = np.atleast_1d(x)[np.atleast_1d(denom) <= 0][0]
        raise DomainError(f'1 + x*p(x) <= 0 at x={bad:.6g}')
    return _scalar_or_array(x ** SIGMA_EXPONENT / denom)

def check_sigma_on_grid(spec: ScalingSpec, grid: GridSpec):
    """Reject a scaling whose denominator vanishes or turns negative on the grid."""
    eval_sigma(spec, np.concatenate(([0.0], grid.x_nodes)))

def eval_u0(spec: InitialConditionSpec, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError('u0 is defined for x >= 0 only')
    return _scalar_or_array(x * P.polyval(x, spec.coeffs) * np.exp(-spec.gamma * x))

def nabla(v, axis: int = -1) -> np.ndarray:
    """Forward difference (a2-a1, ..., an-a(n-1))."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 0 or v.shape[axis] < 2:
        raise ShapeMismatchError('nabla needs at least 2 entries')
    return np.diff(v, axis=axis)

def nabla2(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0 or v.shape[axis] < 3:
        raise ShapeMismatchError('nabla2 needs at least 3 entries')
    return np.diff(v, n=2, axis=axis)
