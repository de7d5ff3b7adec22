"""
Mode Connectivity Controller
"""
import logging
from typing import List

from controllers.base import CommandBlueprint, LoadedRun, add_output_argument, load_runs, open_manifest, output_dir, workers_from
from services.connectivity import (BEND_EPOCHS, DEFAULT_SAMPLES, MaxMcReport, connectivity_ablation,
                                   linear_path, max_mc, mode_connectivity, train_bends)
from services.errors import ConfigurationError
from services.trainer import TrainConfig

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ['t', 'loss', 'd']
ABLATION_COLUMNS = ['bends', 'epochs', 'mc', 'classification']


def bend_config(run: LoadedRun, seed: int) -> TrainConfig:
    """Optimizer of the endpoints' training run, lr 1e-3"""
    config = run.checkpoint.config
    return TrainConfig(lr=1e-3, optimizer=config.get('optimizer', 'adam'),
                       batch_size=int(config.get('batch_size', 32)), seed=seed)


def run_max_mc(runs: List[LoadedRun], m: int = DEFAULT_SAMPLES, bends: int = 2, epochs: int = BEND_EPOCHS,
               seed: int = 0, curves=None) -> MaxMcReport:
    return max_mc(runs[0].graph, [run.params for run in runs], runs[0].dataset, m=m, k=bends, epochs=epochs,
                  config=bend_config(runs[0], seed), curves=curves)


def register(parser):
    parser.add_argument('--checkpoints', nargs='+', required=True, help='two or more checkpoints')
    parser.add_argument('--bends', type=int, default=2, help='k, the curve has k + 1 anchors')
    parser.add_argument('--epochs', type=int, default=BEND_EPOCHS, help='bend training epochs')
    parser.add_argument('--m', type=int, default=DEFAULT_SAMPLES, help='sampled curve points')
    parser.add_argument('--epsilon', type=float, default=None, help='classification threshold')
    parser.add_argument('--linear', action='store_true', help='also report the straight-line path')
    parser.add_argument('--ablation', action='store_true', help='sweep bends and epochs')
    parser.add_argument('--ablation-bends', type=int, nargs='+', default=[1, 2, 3])
    parser.add_argument('--ablation-epochs', type=int, nargs='+', default=[1, 15, 30, 50])
    parser.add_argument('--seed', type=int, default=0, help='bend training seed')
    add_output_argument(parser)


def handle(args) -> int:
    if len(args.checkpoints) < 2:
        raise ConfigurationError(f"modeconn needs at least 2 checkpoints, got {len(args.checkpoints)}")
    runs = load_runs(args.checkpoints)
    first, second = runs[0], runs[1]
    graph, data = first.graph, first.dataset.split('test')
    workers = workers_from(args)
    config = bend_config(first, args.seed)
    manifest = open_manifest(args, output_dir(args, first.path.parent), first.checkpoint.config)

    curve = train_bends(graph, first.params, second.params, first.dataset, k=args.bends, epochs=args.epochs,
                        config=config)
    report = mode_connectivity(graph, curve, data, m=args.m, epsilon=args.epsilon, workers=workers)
    payload = report.to_dict()
    payload['checkpoints'] = [first.label, second.label]
    manifest.write_json('modeconn.json', payload)
    manifest.write_csv('modeconn.csv', report.rows(), CURVE_COLUMNS)

    if args.linear:
        linear = mode_connectivity(graph, linear_path(first.params, second.params), data, m=args.m,
                                   epsilon=args.epsilon, workers=workers)
        manifest.write_json('modeconn_linear.json', linear.to_dict())
        manifest.write_csv('modeconn_linear.csv', linear.rows(), CURVE_COLUMNS)

    overall = run_max_mc(runs, args.m, args.bends, args.epochs, args.seed, curves={(0, 1): curve})
    max_payload = overall.to_dict()
    max_payload['checkpoints'] = [run.label for run in runs]
    manifest.write_json('max_mc.json', max_payload)

    if args.ablation:
        rows = connectivity_ablation(graph, first.params, second.params, first.dataset,
                                     args.ablation_bends, args.ablation_epochs, m=args.m, config=config)
        manifest.write_csv('modeconn_ablation.csv', rows, ABLATION_COLUMNS)
    manifest.save()
    return 0


modeconn_bp = CommandBlueprint('modeconn', 'Bezier mode connectivity between checkpoints', register, handle)
