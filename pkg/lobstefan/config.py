# SPDX-License-Identifier: Apache-2.0

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .estimation import EstimationConfig
from .exceptions import ConfigError
from .investor import CRRAUtility, LinearUtility, LogUtility, UtilityModel
from .model import GridSpec, ModelParams
from .simulator import SimulationConfig

XDG_CONFIG_HOME = 'XDG_CONFIG_HOME'
CONFIG_NAME = 'lobstefan.json'
OUT_DIR = 'out'

def load_config() -> dict:
    """User defaults from $XDG_CONFIG_HOME/lobstefan.json, {} when absent."""
    if XDG_CONFIG_HOME in os.environ:
        cfg_dir = os.environ[XDG_CONFIG_HOME]
    else:
        cfg_dir = f'{Path.home()}/.config'
    try:
        with open(f'{cfg_dir}/{CONFIG_NAME}') as cfgfile:
            return json.load(cfgfile)
    except FileNotFoundError:
        return {}
    except json.JSONDecodeError as e:
        raise ConfigError(f'{cfg_dir}/{CONFIG_NAME} is not valid JSON: {e}') from e

class UtilityConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Literal['log', 'linear', 'crra'] = 'log'
    a: float = Field(default=1.0, gt=0)
    b: float = Field(default=1.0, gt=0)
    delta: float = Field(default=0.0, ge=0, description="Time discount rate")
    gamma: float = Field(default=0.5, gt=0, description="Relative risk aversion (crra only)")

    @field_validator('gamma')
    @classmethod
    def gamma_not_one(cls, v):
        if v == 1:
            raise ValueError('gamma = 1 is the log family')
        return v

    def build(self) -> UtilityModel:
        if self.family == 'log':
            return LogUtility(a=self.a, b=self.b, delta=self.delta)
        if self.family == 'linear':
            return LinearUtility(a=self.a, b=self.b, delta=self.delta)
        return CRRAUtility(a=self.a, b=self.b, delta=self.delta, gamma=self.gamma)

class IOPaths(BaseModel):
    model_config = ConfigDict(frozen=True)

    out_dir: str = OUT_DIR
    ask: Optional[str] = None
    bid: Optional[str] = None
    mid: Optional[str] = None

    @property
    def has_dataset(self) -> bool:
        return self.ask is not None and self.bid is not None

class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: Literal['simulate', 'estimate', 'optimize']
    model: Optional[ModelParams] = None
    grid: Optional[GridSpec] = None
    estimation: EstimationConfig = EstimationConfig()
    utility: Optional[UtilityConfig] = None
    wealth: Optional[float] = Field(default=None, gt=0)
    seed: int = Field(default=0, ge=0)
    blowup_threshold: float = Field(default=1e6, gt=0)
    blowup_rule: Literal['net', 'per_side'] = 'net'
    initial_mid: float = 0.0
    snapshot_row: int = -1
    paths: IOPaths = IOPaths()

    @model_validator(mode='after')
    def mode_fields_present(self):
        missing = []
        if self.mode == 'simulate':
            missing = [name for name in ('model', 'grid') if getattr(self, name) is None]
        elif self.mode == 'estimate':
            if not self.paths.has_dataset:
                missing = ['paths.ask', 'paths.bid']
            elif self.estimation.theta0 > 0 and self.paths.mid is None:
                missing = ['paths.mid (required when theta0 > 0)']
        elif self.mode == 'optimize':
            missing = [name for name in ('model', 'utility', 'wealth') if getattr(self, name) is None]
            if not self.paths.has_dataset and self.grid is None:
                missing.append('grid or paths.ask/paths.bid')
        if missing:
            raise ValueError(f'{self.mode} needs: {", ".join(missing)}')
        return self

    def simulation_config(self) -> SimulationConfig:
        return SimulationConfig(grid=self.grid, seed=self.seed, blowup_threshold=self.blowup_threshold,
                                blowup_rule=self.blowup_rule)

    def with_overrides(self, seed: Optional[int] = None, out_dir: Optional[str] = None,
                       max_workers: Optional[int] = None) -> 'RunConfig':
        """Copy with CLI flag values applied, validated like the file itself."""
        data = self.model_dump()
        if seed is not None:
            data['seed'] = seed
            data['estimation']['seed'] = seed
        if max_workers is not None:
            data['estimation']['max_workers'] = max_workers
        if out_dir is not None:
            data['paths']['out_dir'] = out_dir
        try:
            return RunConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f'invalid command-line override:\n{e}') from e

def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f'cannot read run config {path}: {e}') from e
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f'invalid run config {path}:\n{e}') from e
