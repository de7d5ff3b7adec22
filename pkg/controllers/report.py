"""
Report Controller - SVG rendering of report CSVs and 1D slice overlays
"""
import logging
from pathlib import Path

from controllers.base import CommandBlueprint, LoadedRun, add_output_argument, load_runs, open_manifest, output_dir, workers_from
from controllers.landscape import run_landscape
from services.errors import ConfigurationError
from services.reporting import emit_plot

logger = logging.getLogger(__name__)

OVERLAY_COLUMNS = ['series', 'alpha', 'loss']


def series_label(run: LoadedRun, series: str) -> str:
    if series == 'bits':
        bits = run.checkpoint.bits
        return f'b{bits}' if bits is not None else 'fp'
    if series == 'variant':
        return run.checkpoint.variant
    return run.label


def overlay_rows(runs, series: str = 'label', nu_min: float = -1.0, nu_max: float = 1.0, count: int = 41,
                 workers: int = 1):
    """Top-eigenvector 1D slices of several checkpoints, one series each"""
    rows = []
    for run in runs:
        name = series_label(run, series)
        grid = run_landscape(run, 'eigen', 1, nu_min, nu_max, count, workers=workers)
        rows += [{'series': name, 'alpha': r['alpha'], 'loss': r['loss']} for r in grid.rows()]
    return rows


def register(parser):
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument('--csv', help='report CSV to render')
    source.add_argument('--checkpoints', nargs='+', help='checkpoints whose eigen slices are overlaid')
    parser.add_argument('--kind', choices=['line', 'multi-line'], default=None)
    parser.add_argument('--title', default=None)
    parser.add_argument('--series', choices=['label', 'bits', 'variant'], default='label',
                        help='legend entry of each overlaid checkpoint')
    parser.add_argument('--steps', type=int, default=41)
    add_output_argument(parser)


def handle(args) -> int:
    if args.csv:
        csv_path = Path(args.csv)
        if not csv_path.exists():
            raise ConfigurationError(f"CSV {csv_path} does not exist")
        out_dir = output_dir(args, csv_path.parent)
        manifest = open_manifest(args, out_dir)
        manifest.register(emit_plot(csv_path, args.kind or 'line', out_dir / f'{csv_path.stem}.svg', args.title))
        manifest.save()
        return 0

    runs = load_runs(args.checkpoints)
    labels = [series_label(run, args.series) for run in runs]
    if len(set(labels)) != len(labels):
        raise ConfigurationError(f"Series labels {labels} are not distinct; pick another --series")
    manifest = open_manifest(args, output_dir(args, runs[0].path.parent))
    manifest.write_csv('overlay.csv', overlay_rows(runs, args.series, count=args.steps, workers=workers_from(args)),
                       OVERLAY_COLUMNS)
    manifest.write_plot('overlay.svg', 'overlay.csv', args.kind or 'multi-line', title=args.title or 'eigen slices')
    manifest.save()
    return 0


report_bp = CommandBlueprint('report', 'render report CSVs and overlay eigen slices', register, handle)
