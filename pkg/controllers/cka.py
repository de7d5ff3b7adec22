"""
CKA Controller
"""
import logging

from controllers.base import CommandBlueprint, add_output_argument, load_runs, open_manifest, output_dir, workers_from
from services.cka import DEFAULT_M, cka_grid, cka_m_sweep, cka_noise_sweep

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ['setting', 'value', 'mean_cka']


def register(parser):
    parser.add_argument('--checkpoints', nargs='+', required=True, help='two or more checkpoints')
    parser.add_argument('--m', type=int, default=DEFAULT_M, help='number of shared test samples')
    parser.add_argument('--noise', type=float, default=None, help='Gaussian input noise sigma')
    parser.add_argument('--m-sweep', type=int, nargs='*', default=[], help='m values for the sample-count sweep')
    parser.add_argument('--noise-sweep', type=float, nargs='*', default=[], help='sigmas for the noise sweep')
    parser.add_argument('--seed', type=int, default=0, help='sample selection seed')
    add_output_argument(parser)


def handle(args) -> int:
    runs = load_runs(args.checkpoints)
    models = [(run.graph, run.params) for run in runs]
    dataset = runs[0].dataset
    result = cka_grid(models, dataset, m=args.m, noise=args.noise, seed=args.seed, workers=workers_from(args))
    payload = result.to_dict()
    payload['checkpoints'] = [run.label for run in runs]

    sweep_rows = []
    if args.m_sweep:
        matrices = cka_m_sweep(models, dataset, args.m_sweep, seed=args.seed)
        payload['m_sweep'] = [mat.to_dict() for mat in matrices]
        sweep_rows += [{'setting': 'm', 'value': mat.m, 'mean_cka': mat.mean_offdiag} for mat in matrices]
    if args.noise_sweep:
        matrices = cka_noise_sweep(models, dataset, args.noise_sweep, m=args.m, seed=args.seed)
        payload['noise_sweep'] = [mat.to_dict() for mat in matrices]
        sweep_rows += [{'setting': 'noise', 'value': mat.noise or 0.0, 'mean_cka': mat.mean_offdiag}
                       for mat in matrices]

    manifest = open_manifest(args, output_dir(args, runs[0].path.parent))
    manifest.write_json('cka.json', payload)
    if sweep_rows:
        manifest.write_csv('cka_sweep.csv', sweep_rows, SWEEP_COLUMNS)
    manifest.save()
    return 0


cka_bp = CommandBlueprint('cka', 'CKA similarity between trained instances', register, handle)
