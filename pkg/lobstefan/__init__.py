# SPDX-License-Identifier: Apache-2.0

def cli_main():
    import sys
    from .cli import main
    sys.exit(main())

from .model import GridSpec, InitialConditionSpec, ModelParams, OrderBookDataset, ScalingSpec
from .simulator import BookState, SimulationConfig, simulate, solve_deterministic
from .estimation import EstimationConfig, fit_stage2, select_stage1_aic
from .investor import InvestorProblem, static_optimal
