# SPDX-License-Identifier: Apache-2.0

import logging
import os
import sys
from argparse import ArgumentParser

from jinja2 import Environment
from pydantic import ValidationError
from tqdm import tqdm

from .config import RunConfig, load_config, load_run_config
from .dataio import (DecisionPlot, FitReport, Provenance, SimulationManifest, emit_plot_series, load_dataset,
                     save_dataset, save_series, write_json)
from .estimation import fit_stage2, select_stage1_aic
from .exceptions import ConfigError, DataError, LobStefanError, NumericalError
from .investor import InvestorProblem, static_optimal
from .performance import PerformanceTracker, create_performance_config, get_hardware_info
from .simulator import BookState, simulate

logger = logging.getLogger(__name__)

MODES = ('simulate', 'estimate', 'optimize')
PHASES = {'simulate': 2, 'estimate': 4, 'optimize': 3}

class ProgressHooks(object):
    def __init__(self, total=1):
        # disable=None turns the bars off when stderr is not a terminal
        self.top_bar = tqdm(total=total, position=0, disable=None, bar_format='{l_bar}{bar}| {n_fmt}/{total_fmt} ')
        self.last_top = 0
        self.sub_bar = None
    def phase(self, idx, name, substeps=0):
        up_by = idx - self.last_top
        self.last_top = idx
        self.last_sub = 0
        if self.sub_bar is not None:
            self.sub_bar.close()
        self.top_bar.set_description(name)
        self.top_bar.update(up_by)
        if substeps != 0:
            self.sub_bar = tqdm(total=substeps, position=1, disable=None, leave=False)
        else:
            self.sub_bar = None
    def subphase_step(self, val = None):
        if self.sub_bar is None:
            return
        if val is None:
            self.sub_bar.update()
            return
        up_by = val - self.last_sub
        self.last_sub = val
        self.sub_bar.update(up_by)
    def set_substeps(self, num):
        if self.sub_bar is None:
            self.sub_bar = tqdm(total=num, position=1, disable=None, leave=False)
        else:
            self.sub_bar.reset(total=num)
    def close(self):
        self.top_bar.close()
        if self.sub_bar is not None:
            self.sub_bar.close()

def render_summary(path, **context):
    env = Environment(autoescape=True)
    template_path = f'{os.path.dirname(__file__)}/template.html'
    with open(template_path) as f:
        templ = env.from_string(f.read())
    try:
        with open(path, 'w', encoding='utf-8') as out:
            out.write(templ.render(**context))
    except OSError as e:
        raise DataError(f'cannot write {path}: {e}') from e
    return path

def _out(config: RunConfig, name):
    os.makedirs(config.paths.out_dir, exist_ok=True)
    return os.path.join(config.paths.out_dir, name)

def run_simulate(config: RunConfig, progress, tracker: PerformanceTracker) -> int:
    grid = config.grid
    logger.info(f'Simulating {grid.n_time}x{grid.n_price} book, seed {config.seed}')
    with tracker.track_phase('simulate'):
        result = simulate(config.model, config.simulation_config(), config.initial_mid, progress)

    progress.phase(1, 'Writing files')
    with tracker.track_phase('write'):
        dataset = result.dataset
        save_dataset(dataset, config.paths.out_dir)
        save_series(_out(config, 'boundary.csv'), result.boundary_path, dataset.grid)
        write_json(_out(config, 'manifest.json'), SimulationManifest(
            params=config.model,
            grid=dataset.grid,
            seed=config.seed,
            initial_mid=config.initial_mid,
            blowup_threshold=config.blowup_threshold,
            blowup_rule=config.blowup_rule,
            truncated=result.truncated,
            truncation_step=result.truncation_step,
            checksum=dataset.checksum(),
        ))
        emit_plot_series(result, _out(config, 'plot.csv'))
    progress.phase(2, 'Done')
    status = f'truncated at step {result.truncation_step}' if result.truncated else 'complete'
    print(f'Simulated {dataset.n_time} rows ({status}), output in {config.paths.out_dir}')
    return 0

def run_estimate(config: RunConfig, progress, tracker: PerformanceTracker) -> int:
    paths = config.paths
    est = config.estimation
    with tracker.track_phase('load'):
        dataset = load_dataset(paths.ask, paths.bid, paths.mid, grid=config.grid)
    logger.info(f'Estimating from {dataset.n_time}x{dataset.n_price} book, stage-1 degrees '
                f'{est.degree_range_stage1}, stage-2 degrees {est.degree_range_stage2}')

    fits = {}
    for idx, side in enumerate(('ask', 'bid')):
        progress.phase(idx, f'Stage 1 ({side})', len(est.stage1_degrees()))
        with tracker.track_phase(f'stage1_{side}'):
            fits[side] = select_stage1_aic(getattr(dataset, side), dataset.grid, est, side, progress)

    progress.phase(2, 'Stage 2', len(est.stage2_degrees()))
    with tracker.track_phase('stage2'):
        stage2 = fit_stage2(dataset, fits['ask'], fits['bid'], est, progress)

    progress.phase(3, 'Writing report')
    report = FitReport(
        stage1_ask=fits['ask'],
        stage1_bid=fits['bid'],
        stage2=stage2,
        provenance=Provenance(
            estimation=est,
            grid=dataset.grid,
            paths={'ask': paths.ask, 'bid': paths.bid, 'mid': paths.mid},
            checksum=dataset.checksum(),
        ),
    )
    write_json(_out(config, 'report.json'), report)
    emit_plot_series(report, _out(config, 'plot.csv'))
    render_summary(_out(config, 'summary.html'), mode='estimate', report=report)
    progress.phase(4, 'Done')
    print(f'alpha ask={fits["ask"].alpha_hat:.6g} bid={fits["bid"].alpha_hat:.6g}, '
          f'rho={stage2.rho_hat:.6g}, objective={stage2.objective:.6g}')
    return 0

def run_optimize(config: RunConfig, progress, tracker: PerformanceTracker) -> int:
    paths = config.paths
    with tracker.track_phase('snapshot'):
        if paths.has_dataset:
            dataset = load_dataset(paths.ask, paths.bid, paths.mid, grid=config.grid)
            book = BookState.from_dataset(dataset, config.snapshot_row)
            grid = dataset.grid
        else:
            result = simulate(config.model, config.simulation_config(), config.initial_mid, progress)
            book = result.final_state
            grid = result.dataset.grid

    progress.phase(1, 'Optimizing')
    problem = InvestorProblem(wealth=config.wealth, book=book, params=config.model, grid=grid)
    utility = config.utility.build()
    with tracker.track_phase('optimize'):
        decision = static_optimal(problem, utility)

    progress.phase(2, 'Writing decision')
    write_json(_out(config, 'decision.json'), decision)
    emit_plot_series(DecisionPlot(decision, problem, utility), _out(config, 'plot.csv'))
    render_summary(_out(config, 'summary.html'), mode='optimize', decision=decision, wealth=config.wealth,
                   time=problem.time, mid=problem.mid)
    progress.phase(3, 'Done')
    print(f'B*={decision.b_star:.10g}, signal {decision.signal.value}, drift {decision.du_drift:.6g}')
    return 0

COMMANDS = {'simulate': run_simulate, 'estimate': run_estimate, 'optimize': run_optimize}

def main(argv=None) -> int:
    try:
        config = load_config()
    except ConfigError as e:
        print(f'lobstefan: {e}', file=sys.stderr)
        return e.exit_code
    parser = ArgumentParser(prog='lobstefan')
    parser.add_argument('mode', choices=MODES)
    parser.add_argument('-c', '--config', required=True, help='JSON run configuration')
    parser.add_argument('-s', '--seed', type=int, help='Override the run seed')
    parser.add_argument('-o', '--out', default=config.get('out_dir'), help='Output directory')
    parser.add_argument('-w', '--workers', type=int, default=config.get('max_workers'),
                        help='Worker threads for candidate fits')
    parser.add_argument('-v', '--verbose', default=config.get('verbose'), action='store_true')
    parser.add_argument('--performance-report', action='store_true', default=config.get('performance_report', False),
                        help='Show timing and memory statistics after the run')
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stderr)],
    )
    if args.verbose:
        hardware = get_hardware_info()
        perf_config = create_performance_config(hardware, args.workers)
        logger.debug(f"Hardware: {hardware['cpu_count']} CPUs, {hardware['memory_available_mb']:.0f}MB RAM, "
                     f"{perf_config.max_workers} worker(s)")

    tracker = PerformanceTracker()
    progress = ProgressHooks(PHASES[args.mode])
    try:
        run_config = load_run_config(args.config).with_overrides(seed=args.seed, out_dir=args.out,
                                                                  max_workers=args.workers)
        if run_config.mode != args.mode:
            raise ConfigError(f'{args.config} is a {run_config.mode} config, not {args.mode}')
        status = COMMANDS[args.mode](run_config, progress, tracker)
    except LobStefanError as e:
        logger.error(f'{type(e).__name__}: {e}')
        return e.exit_code
    except ValidationError as e:
        # configs are validated in load_run_config/with_overrides; this is a result the run produced
        logger.error(f'invalid intermediate result: {e}')
        return NumericalError.exit_code
    except OSError as e:
        logger.error(f'I/O error: {e}')
        return DataError.exit_code
    finally:
        progress.close()

    if args.verbose or args.performance_report:
        logger.info(tracker.report_statistics())
    return status
