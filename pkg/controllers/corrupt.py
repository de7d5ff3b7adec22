"""
Corruption Controller
"""
import logging

from config import Config
from controllers.base import CommandBlueprint, LoadedRun, add_output_argument, load_run, open_manifest, output_dir
from controllers.landscape import eigen_report
from services.corruption import STRESSORS, ModelInstance, robustness_sweep

logger = logging.getLogger(__name__)

ROBUSTNESS_COLUMNS = ['bit_width', 'variant', 'stressor_param', 'mean_loss', 'std_loss', 'n_seeds']

DEFAULT_LEVELS = {
    'gaussian': [0.0, 0.05, 0.1, 0.2],
    'salt-pepper': [0.0, 0.01, 0.05, 0.1],
    'bitflip-random': [0, 1, 10, 100],
    'bitflip-fkeras': [0, 1, 5],
}


def model_instance(run: LoadedRun, stressor: str, k_eigs: int = Config.HESSIAN_K,
                   hessian=None) -> ModelInstance:
    """Sweep entry for a checkpoint; Hessian eigenpairs are computed for FKeras plans"""
    if stressor == 'bitflip-fkeras' and hessian is None:
        hessian = eigen_report(run, k_eigs)
    return ModelInstance(variant=run.checkpoint.variant, bits=run.checkpoint.bits, seed=run.checkpoint.seed,
                         model=run.graph, params=run.params, hessian=hessian)


def register(parser):
    parser.add_argument('--checkpoint', required=True, help='checkpoint file')
    parser.add_argument('--stressor', choices=STRESSORS, required=True)
    parser.add_argument('--levels', type=float, nargs='+', default=None,
                        help='noise intensities or flip counts (0 is the clean reference)')
    parser.add_argument('--k-eigs', type=int, default=Config.HESSIAN_K, help='eigenpairs used by FKeras scores')
    add_output_argument(parser)


def handle(args) -> int:
    run = load_run(args.checkpoint)
    levels = args.levels or DEFAULT_LEVELS[args.stressor]
    instance = model_instance(run, args.stressor, args.k_eigs)
    curve = robustness_sweep([instance], run.dataset.split('test'), args.stressor, levels, k_eigs=args.k_eigs)
    manifest = open_manifest(args, output_dir(args, run.path.parent), run.checkpoint.config)
    manifest.write_csv('corrupt.csv', curve.rows, ROBUSTNESS_COLUMNS)
    payload = curve.to_dict()
    payload['checkpoint'] = run.label
    manifest.write_json('corrupt.json', payload)
    manifest.save()
    return 0


corrupt_bp = CommandBlueprint('corrupt', 'test loss under input noise or weight bit flips', register, handle)
