"""
Landscape Controller
"""
import logging
from typing import List, Optional

from config import Config
from controllers.base import CommandBlueprint, LoadedRun, add_output_argument, load_run, open_manifest, output_dir, workers_from
from services.errors import ConfigurationError
from services.hessian import HessianReport, evaluation_batch, top_eigenpairs
from services.landscape import LandscapeGrid, make_direction, make_direction_pair, scan
from services.reporting import Manifest

logger = logging.getLogger(__name__)

GRID_COLUMNS = ['alpha', 'beta', 'loss']


def eigen_report(run: LoadedRun, k: int, batch_seed: int = 0) -> HessianReport:
    batch = evaluation_batch(run.dataset, Config.EVAL_BATCH, batch_seed)
    report = top_eigenpairs(run.graph, run.params, batch, k=k, seed=batch_seed)
    report.batch_seed = batch_seed
    return report


def run_landscape(run: LoadedRun, kind: str, dims: int = 1, nu_min: float = -1.0, nu_max: float = 1.0,
                  count: Optional[int] = None, seed: int = 0, report: Optional[HessianReport] = None,
                  workers: int = 1) -> LandscapeGrid:
    """1D or 2D slice of a checkpoint's test loss"""
    if dims not in (1, 2):
        raise ConfigurationError(f"dims must be 1 or 2, got {dims}")
    count = count or (41 if dims == 1 else 21)
    if kind == 'eigen' and report is None:
        report = eigen_report(run, dims, seed)
    if dims == 1:
        sigma, eta = make_direction(kind, run.graph, run.params, seed=seed, index=1, report=report), None
    else:
        sigma, eta = make_direction_pair(kind, run.graph, run.params, seed=seed, report=report)
    return scan(run.graph, run.params, run.dataset.split('test'), sigma, eta, nu_min, nu_max, count, workers)


def write_grid(manifest: Manifest, kind: str, grid: LandscapeGrid) -> List[str]:
    csv_name = f'landscape_{kind}.csv'
    manifest.write_csv(csv_name, grid.rows(), GRID_COLUMNS)
    names = [csv_name]
    if grid.dims == 1:
        manifest.write_plot(f'landscape_{kind}.svg', csv_name, 'line', title=f'{kind} direction')
        names.append(f'landscape_{kind}.svg')
    return names


def register(parser):
    parser.add_argument('--checkpoint', required=True, help='checkpoint file')
    parser.add_argument('--directions', choices=['random', 'eigen', 'both'], default='eigen')
    parser.add_argument('--dims', type=int, choices=[1, 2], default=1)
    parser.add_argument('--nu-min', type=float, default=-1.0)
    parser.add_argument('--nu-max', type=float, default=1.0)
    parser.add_argument('--steps', type=int, default=None, help='grid points per axis')
    parser.add_argument('--seed', type=int, default=0, help='seed of random directions / eigen batch')
    add_output_argument(parser)


def handle(args) -> int:
    run = load_run(args.checkpoint)
    kinds = ['random', 'eigen'] if args.directions == 'both' else [args.directions]
    manifest = open_manifest(args, output_dir(args, run.path.parent), run.checkpoint.config)
    for kind in kinds:
        grid = run_landscape(run, kind, args.dims, args.nu_min, args.nu_max, args.steps, args.seed,
                             workers=workers_from(args))
        write_grid(manifest, kind, grid)
    manifest.save()
    return 0


landscape_bp = CommandBlueprint('landscape', 'loss-landscape slices around a checkpoint', register, handle)
