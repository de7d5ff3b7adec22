"""
Sweep Controller - the variants x seeds x bit widths grid and its metrics
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

from config import worker_count
from controllers.base import (CommandBlueprint, LoadedRun, add_experiment_arguments, experiment_from_args,
                              load_run, open_manifest, run_name)
from controllers.corrupt import DEFAULT_LEVELS, ROBUSTNESS_COLUMNS, model_instance
from controllers.hessian import run_hessian
from controllers.landscape import GRID_COLUMNS, run_landscape
from controllers.modeconn import run_max_mc
from controllers.train import experiment_dataset, run_training
from models import get_spec
from services.cka import cka_grid
from services.corruption import STRESSORS, robustness_sweep
from services.hessian import HessianReport
from services.reporting import Manifest
from services.trainer import delta_sweep

logger = logging.getLogger(__name__)

DEFAULT_DELTA_GRID = [0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1]
HESSIAN_COLUMNS = ['bit_width', 'variant', 'seed', 'top_eigenvalue', 'trace', 'stderr']
CKA_COLUMNS = ['bit_width', 'variant', 'mean_cka']
MC_COLUMNS = ['bit_width', 'variant', 'max_mc']
DELTA_COLUMNS = ['delta', 'clean_loss', 'noisy_loss']


def _label(run: LoadedRun) -> str:
    c = run.checkpoint
    return run_name(c.model_name, c.variant, c.bits, c.seed)


def _groups(runs: List[LoadedRun]) -> Dict[Tuple[Optional[int], str], List[LoadedRun]]:
    groups: Dict[Tuple[Optional[int], str], List[LoadedRun]] = {}
    for run in runs:
        groups.setdefault((run.checkpoint.bits, run.checkpoint.variant), []).append(run)
    return dict(sorted(groups.items(), key=lambda kv: (kv[0][0] or 0, kv[0][1])))


def hessian_metrics(runs: List[LoadedRun], manifest: Manifest, workers: int) -> Dict[str, HessianReport]:
    reports, rows = {}, []
    for run in runs:
        report = run_hessian(run, workers=workers)
        reports[_label(run)] = report
        manifest.write_json(f'{_label(run)}/hessian.json', report.to_dict())
        rows.append({'bit_width': run.checkpoint.bits, 'variant': run.checkpoint.variant,
                     'seed': run.checkpoint.seed, 'top_eigenvalue': report.eigenvalues[0],
                     'trace': report.trace, 'stderr': report.stderr})
    manifest.write_csv('hessian_summary.csv', rows, HESSIAN_COLUMNS)
    return reports


def landscape_metrics(runs: List[LoadedRun], manifest: Manifest, reports: Dict[str, HessianReport], workers: int):
    for run in runs:
        grid = run_landscape(run, 'eigen', report=reports.get(_label(run)), workers=workers)
        manifest.write_csv(f'{_label(run)}/landscape_eigen.csv', grid.rows(), GRID_COLUMNS)


def cka_metrics(runs: List[LoadedRun], manifest: Manifest, workers: int):
    rows = []
    for (bits, variant), members in _groups(runs).items():
        if len(members) < 2:
            continue
        result = cka_grid([(r.graph, r.params) for r in members], members[0].dataset, workers=workers)
        rows.append({'bit_width': bits, 'variant': variant, 'mean_cka': result.mean_offdiag})
    manifest.write_csv('cka_summary.csv', rows, CKA_COLUMNS)


def modeconn_metrics(runs: List[LoadedRun], manifest: Manifest):
    rows = []
    for (bits, variant), members in _groups(runs).items():
        if len(members) < 2:
            continue
        rows.append({'bit_width': bits, 'variant': variant, 'max_mc': run_max_mc(members).value})
    manifest.write_csv('modeconn_summary.csv', rows, MC_COLUMNS)


def corruption_metrics(runs: List[LoadedRun], manifest: Manifest, reports: Dict[str, HessianReport]):
    data = runs[0].dataset.split('test')
    for stressor in STRESSORS:
        if stressor.startswith('bitflip') and any(r.checkpoint.bits is None for r in runs):
            logger.warning(f"Skipping {stressor}: some runs are not quantized")
            continue
        instances = [model_instance(run, stressor, hessian=reports.get(_label(run))) for run in runs]
        curve = robustness_sweep(instances, data, stressor, DEFAULT_LEVELS[stressor])
        manifest.write_csv(f'robustness_{stressor}.csv', curve.rows, ROBUSTNESS_COLUMNS)


def run_delta_grid(experiment, manifest: Manifest, deltas: List[float]):
    dataset = experiment_dataset(experiment)
    base = experiment.train_config('baseline', experiment.bits[0], experiment.seeds[0])
    for regularizer in ('jacobian', 'orthogonal'):
        rows = delta_sweep(get_spec(experiment.model), dataset, regularizer, deltas, base)
        manifest.write_csv(f'delta_{regularizer}.csv', rows, DELTA_COLUMNS)
        manifest.write_plot(f'delta_{regularizer}.svg', f'delta_{regularizer}.csv', 'line',
                            title=f'{regularizer} strength')


def register(parser):
    add_experiment_arguments(parser)
    parser.add_argument('--grid', choices=['default', 'delta'], default='default')
    parser.add_argument('--deltas', type=float, nargs='+', default=DEFAULT_DELTA_GRID,
                        help='regularization strengths for --grid delta')


def handle(args) -> int:
    experiment = experiment_from_args(args)
    out_dir = experiment.out_dir()
    manifest = open_manifest(args, out_dir, experiment.to_dict())
    workers = worker_count()
    if args.grid == 'delta':
        run_delta_grid(experiment, manifest, args.deltas)
        manifest.save()
        return 0

    dataset = experiment_dataset(experiment)
    jobs = [(bits, variant, seed) for bits in experiment.bits
            for variant in experiment.variants for seed in experiment.seeds]
    logger.info(f"Sweep of {len(jobs)} runs on {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        paths = list(pool.map(lambda job: run_training(experiment, job[1], job[0], job[2], dataset, manifest), jobs))
    runs = [load_run(path) for path in paths]

    reports: Dict[str, HessianReport] = {}
    if experiment.metric_enabled('hessian'):
        reports = hessian_metrics(runs, manifest, workers)
    if experiment.metric_enabled('landscape'):
        landscape_metrics(runs, manifest, reports, workers)
    if experiment.metric_enabled('cka'):
        cka_metrics(runs, manifest, workers)
    if experiment.metric_enabled('modeconn'):
        modeconn_metrics(runs, manifest)
    if experiment.metric_enabled('corruption'):
        corruption_metrics(runs, manifest, reports)
    manifest.save()
    logger.info(f"Sweep finished: {len(manifest.files)} artifacts in {out_dir}")
    return 0


sweep_bp = CommandBlueprint('sweep', 'train the experiment grid and compute every enabled metric', register, handle)
