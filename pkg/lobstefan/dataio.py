# SPDX-License-Identifier: Apache-2.0
"""CSV matrices, JSON reports and tidy plot series.

Every matrix file starts with a `# dt=<dt> dx=<dx>` comment line so it
describes its own grid; values are written with 17 significant digits.
"""

import logging
import os
import re
from dataclasses import dataclass
from functools import singledispatch
from typing import Dict, List, Optional, Tuple, Type, TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError

from .estimation import EstimationConfig, Stage1Fit, Stage2Fit
from .exceptions import DataError, ParseError, ShapeMismatchError
from .investor import Decision, InvestorProblem, UtilityModel, sample_objective
from .model import GridSpec, ModelParams, OrderBookDataset
from .simulator import SimulationResult

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'
HEADER_PATTERN = re.compile(r'^#\s*dt=(\S+)\s+dx=(\S+)')

Model = TypeVar('Model', bound=BaseModel)

class Provenance(BaseModel):
    model_config = ConfigDict(frozen=True)

    estimation: EstimationConfig
    grid: GridSpec
    paths: Dict[str, Optional[str]] = {}
    checksum: str

class FitReport(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan='constants')

    stage1_ask: Stage1Fit
    stage1_bid: Stage1Fit
    stage2: Stage2Fit
    provenance: Provenance

class SimulationManifest(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan='constants')

    params: ModelParams
    grid: GridSpec
    seed: int
    initial_mid: float
    blowup_threshold: float
    blowup_rule: str
    truncated: bool
    truncation_step: Optional[int] = None
    checksum: str

def _grid_header(path: str) -> Optional[Tuple[float, float]]:
    with open(path) as f:
        first = f.readline()
    match = HEADER_PATTERN.match(first)
    if match is None:
        return None
    try:
        return float(match.group(1)), float(match.group(2))
    except ValueError as e:
        raise ParseError(f'{path}: bad grid header {first.strip()!r}') from e

def read_matrix(path: str) -> Tuple[np.ndarray, Optional[Tuple[float, float]]]:
    """Numeric matrix of a CSV file plus its (dt, dx) header if present."""
    try:
        header = _grid_header(path)
        frame = pd.read_csv(path, header=None, comment='#', dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise DataError(f'{path}: no data rows') from e
    except pd.errors.ParserError as e:
        raise ParseError(f'{path}: {e}') from e
    except OSError as e:
        raise DataError(f'cannot read {path}: {e}') from e

    numbers = frame.apply(pd.to_numeric, errors='coerce')
    bad = numbers.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ParseError(f'{path}: row {row + 1}, column {col + 1}: cannot parse {frame.iat[row, col]!r}')
    # float() on the text keeps every value bit-exact
    return frame.to_numpy(dtype=float), header

def load_dataset(ask_path: str, bid_path: str, mid_path: Optional[str] = None,
                 grid: Optional[GridSpec] = None) -> OrderBookDataset:
    ask, ask_header = read_matrix(ask_path)
    bid, bid_header = read_matrix(bid_path)
    if ask.shape != bid.shape:
        raise ShapeMismatchError(f'{ask_path} is {ask.shape[0]}x{ask.shape[1]} '
                                 f'but {bid_path} is {bid.shape[0]}x{bid.shape[1]}')
    if mid_path is not None:
        mid, _ = read_matrix(mid_path)
        if mid.shape[1] != 1:
            raise ShapeMismatchError(f'{mid_path} must have one value per line, got {mid.shape[1]} columns')
        mid = mid[:, 0]
        if mid.size != ask.shape[0]:
            raise ShapeMismatchError(f'{ask_path} has {ask.shape[0]} rows but {mid_path} has {mid.size} values')
    else:
        logger.warning('no mid-price file given; using a flat zero mid-price path')
        mid = np.zeros(ask.shape[0])

    if grid is None:
        if ask_header is None:
            raise DataError(f'{ask_path} has no "# dt=.. dx=.." header and no grid was given')
        if bid_header is not None and bid_header != ask_header:
            raise DataError(f'grid headers disagree: {ask_path} {ask_header}, {bid_path} {bid_header}')
        dt, dx = ask_header
    else:
        dt, dx = grid.dt, grid.dx
    try:
        grid = GridSpec(dt=dt, dx=dx, n_time=ask.shape[0], n_price=ask.shape[1])
    except ValidationError as e:
        raise DataError(f'{ask_path}: invalid grid: {e}') from e
    return OrderBookDataset(ask=ask, bid=bid, mid=mid, grid=grid)

def _write_csv(path: str, values: np.ndarray, grid: GridSpec):
    with open(path, 'w', newline='') as f:
        f.write(f'# dt={grid.dt!r} dx={grid.dx!r}\n')
        pd.DataFrame(np.atleast_2d(values)).to_csv(f, header=False, index=False, float_format=FLOAT_FORMAT,
                                                   lineterminator='\n')

def save_dataset(dataset: OrderBookDataset, out_dir: str) -> Dict[str, str]:
    """Write ask.csv, bid.csv and mid.csv; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, f'{name}.csv') for name in ('ask', 'bid', 'mid')}
    try:
        _write_csv(paths['ask'], dataset.ask, dataset.grid)
        _write_csv(paths['bid'], dataset.bid, dataset.grid)
        _write_csv(paths['mid'], dataset.mid.reshape(-1, 1), dataset.grid)
    except OSError as e:
        raise DataError(f'cannot write dataset to {out_dir}: {e}') from e
    return paths

def save_series(path: str, values: np.ndarray, grid: GridSpec) -> str:
    try:
        _write_csv(path, np.asarray(values, dtype=float).reshape(-1, 1), grid)
    except OSError as e:
        raise DataError(f'cannot write {path}: {e}') from e
    return path

def write_json(path: str, model: BaseModel) -> str:
    try:
        with open(path, 'w') as f:
            f.write(model.model_dump_json(indent=2))
            f.write('\n')
    except OSError as e:
        raise DataError(f'cannot write {path}: {e}') from e
    return path

def read_json(path: str, model_type: Type[Model]) -> Model:
    try:
        with open(path) as f:
            return model_type.model_validate_json(f.read())
    except OSError as e:
        raise DataError(f'cannot read {path}: {e}') from e
    except ValidationError as e:
        raise DataError(f'{path} is not a valid {model_type.__name__}: {e}') from e

@dataclass(frozen=True)
class DecisionPlot:
    """A decision with the problem it answers, enough to redraw the utility curve."""
    decision: Decision
    problem: InvestorProblem
    utility: UtilityModel

def _rows(series: str, x, y) -> List[Tuple[str, float, float]]:
    return [(series, float(a), float(b)) for a, b in zip(np.atleast_1d(x), np.atleast_1d(y))]

@singledispatch
def plot_rows(result) -> List[Tuple[str, float, float]]:
    raise TypeError(f'no plot series for {type(result).__name__}')

@plot_rows.register
def _(result: SimulationResult):
    data = result.dataset
    grid = data.grid
    times = grid.dt * np.arange(data.n_time)
    x = grid.x_nodes
    rows = _rows('boundary', times, result.boundary_path)
    rows += _rows('drift', times[:result.drift_path.size], result.drift_path)
    rows += _rows('ask_initial', x, data.ask[0])
    rows += _rows('bid_initial', -x, data.bid[0])
    rows += _rows('ask_final', x, data.ask[-1])
    rows += _rows('bid_final', -x, data.bid[-1])
    return rows

@plot_rows.register
def _(report: FitReport):
    rows = []
    for fit in (report.stage1_ask, report.stage1_bid):
        table = sorted(fit.per_degree_table, key=lambda r: r.degree)
        rows += _rows(f'aic_{fit.side}', [r.degree for r in table], [r.aic for r in table])
        rows += _rows(f'alpha_{fit.side}', [r.degree for r in table], [r.alpha for r in table])
    for c in report.stage2.candidates:
        rows += _rows(f'stage2_objective_ask_degree_{c.degree_ask}', [c.degree_bid], [c.objective])
    return rows

@plot_rows.register
def _(plot: DecisionPlot):
    decision, problem = plot.decision, plot.problem
    offsets, values, residuals = sample_objective(problem, plot.utility)
    rows = _rows('utility', offsets, values)
    rows += _rows('foc_residual', offsets, residuals)
    grid = problem.grid
    rows += _rows('ask_density', grid.x_nodes, problem.book.ask_rel)
    if decision.chord_slope is not None:
        rows += _rows('chord_slope', [decision.b_star], [decision.chord_slope])
    rows += _rows('boundary_slope', [decision.b_star], [decision.boundary_slope])
    return rows

def emit_plot_series(result, path: str) -> str:
    """Tidy (series, x, y) CSV for a simulation, a fit report or a decision."""
    frame = pd.DataFrame(plot_rows(result), columns=['series', 'x', 'y'])
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    except OSError as e:
        raise DataError(f'cannot write {path}: {e}') from e
    return path
