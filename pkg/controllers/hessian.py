"""
Hessian Controller
"""
import logging

from config import Config
from controllers.base import CommandBlueprint, LoadedRun, add_output_argument, load_run, open_manifest, output_dir, workers_from
from services.hessian import HessianReport, analyze, evaluation_batch

logger = logging.getLogger(__name__)


def run_hessian(run: LoadedRun, k: int = Config.HESSIAN_K, probes: int = Config.HUTCHINSON_PROBES,
                batch_seed: int = 0, workers: int = 1) -> HessianReport:
    """Eigenpairs and trace of a checkpoint on its fixed evaluation batch"""
    batch = evaluation_batch(run.dataset, Config.EVAL_BATCH, batch_seed)
    return analyze(run.graph, run.params, batch, k=k, probes=probes, seed=batch_seed,
                   batch_seed=batch_seed, workers=workers)


def register(parser):
    parser.add_argument('--checkpoint', required=True, help='checkpoint file')
    parser.add_argument('--k', type=int, default=Config.HESSIAN_K, help='number of eigenpairs')
    parser.add_argument('--probes', type=int, default=Config.HUTCHINSON_PROBES, help='Hutchinson probes')
    parser.add_argument('--batch-seed', type=int, default=0, help='seed of the evaluation batch')
    add_output_argument(parser)


def handle(args) -> int:
    run = load_run(args.checkpoint)
    report = run_hessian(run, args.k, args.probes, args.batch_seed, workers_from(args))
    manifest = open_manifest(args, output_dir(args, run.path.parent), run.checkpoint.config)
    manifest.write_json('hessian.json', report.to_dict())
    manifest.save()
    if not report.all_converged:
        logger.warning(f"Some eigenpairs of {run.label} did not converge")
    return 0


hessian_bp = CommandBlueprint('hessian', 'top Hessian eigenpairs and trace of a checkpoint', register, handle)
