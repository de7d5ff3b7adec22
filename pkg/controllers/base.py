"""
Command blueprints and helpers shared by the controllers
"""
import argparse
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

from config import ExperimentConfig, default_out_dir, load_experiment, worker_count
from models import Dataset, ModelGraph
from services import checkpoint as ckpt
from services.autodiff import ParamVector
from services.errors import ConfigurationError
from services.reporting import Manifest

logger = logging.getLogger(__name__)


@dataclass
class CommandBlueprint:
    """One sub-command: its arguments and the handler that runs it"""
    name: str
    help: str
    register: Callable[[argparse.ArgumentParser], None]
    handler: Callable[[argparse.Namespace], int]

    def attach(self, subparsers) -> argparse.ArgumentParser:
        parser = subparsers.add_parser(self.name, help=self.help, description=self.help)
        self.register(parser)
        parser.set_defaults(handler=self.handler, command=self.name)
        return parser


@dataclass
class LoadedRun:
    """A checkpoint rebuilt into something the services can evaluate"""
    path: Path
    checkpoint: ckpt.Checkpoint
    graph: ModelGraph
    params: ParamVector
    dataset: Dataset

    @property
    def label(self) -> str:
        return self.path.stem


def add_experiment_arguments(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='TOML experiment file')
    parser.add_argument('--bits', type=int, action='append', help='bit width override (repeatable)')
    parser.add_argument('--variant', choices=['baseline', 'jacobian', 'orthogonal'], help='variant override')
    parser.add_argument('--seed', type=int, help='seed override')
    parser.add_argument('--out', help='output directory')


def add_output_argument(parser: argparse.ArgumentParser):
    parser.add_argument('--out', help='output directory (default: next to the first checkpoint)')
    parser.add_argument('--workers', type=int, default=None, help='parallel evaluation workers')


def experiment_from_args(args) -> ExperimentConfig:
    experiment = load_experiment(args.config)
    return experiment.with_overrides(bits=args.bits, variant=args.variant, seed=args.seed, out=args.out)


def run_name(model: str, variant: str, bits: Optional[int], seed: int) -> str:
    return f"{model}_{variant}_b{bits if bits is not None else 'fp'}_s{seed}"


def load_run(path) -> LoadedRun:
    path = Path(path)
    checkpoint = ckpt.load(path)
    return LoadedRun(path=path, checkpoint=checkpoint, graph=checkpoint.graph(), params=checkpoint.params,
                     dataset=checkpoint.restore_dataset())


def load_runs(paths) -> List[LoadedRun]:
    """Checkpoints that must share one model and dataset"""
    runs = [load_run(p) for p in paths]
    first = runs[0].checkpoint
    for run in runs[1:]:
        if run.checkpoint.model_name != first.model_name or run.checkpoint.dataset != first.dataset:
            raise ConfigurationError(f"{run.path} does not share model and dataset with {runs[0].path}")
    return runs


def output_dir(args, fallback: Optional[Path] = None) -> Path:
    if getattr(args, 'out', None):
        return Path(args.out)
    return fallback if fallback is not None else default_out_dir()


def open_manifest(args, out_dir: Path, config=None) -> Manifest:
    return Manifest(out_dir, getattr(args, 'argv', [args.command]), config)


def workers_from(args) -> int:
    return args.workers if getattr(args, 'workers', None) else worker_count()

