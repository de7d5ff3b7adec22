"""
Train Controller
"""
import logging
from pathlib import Path
from typing import Optional

from config import Config, ExperimentConfig
from controllers.base import CommandBlueprint, add_experiment_arguments, experiment_from_args, open_manifest, run_name
from models import Dataset, generate_dataset, get_spec
from services import checkpoint as ckpt
from services.reporting import Manifest, history_rows
from services.trainer import train

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['epoch', 'train_loss', 'test_loss', 'penalty']


def experiment_dataset(experiment: ExperimentConfig) -> Dataset:
    """The dataset every run of an experiment shares"""
    return generate_dataset(get_spec(experiment.model).task, experiment.dataset_size, Config.DATA_SEED)


def run_training(experiment: ExperimentConfig, variant: str, bits: Optional[int], seed: int,
                 dataset: Dataset, manifest: Manifest) -> Path:
    """Train one (variant, bits, seed) run and write its checkpoint and history"""
    name = run_name(experiment.model, variant, bits, seed)
    config = experiment.train_config(variant, bits, seed)
    logger.info(f"Training {name} (delta={config.delta:g})")
    trained = train(get_spec(experiment.model), dataset, config)
    path = manifest.write_bytes(f'{name}.llab', ckpt.encode(ckpt.Checkpoint.from_trained(trained, dataset, variant)))
    manifest.write_csv(f'{name}_history.csv', history_rows(trained.history), HISTORY_COLUMNS)
    return path


def register(parser):
    add_experiment_arguments(parser)


def handle(args) -> int:
    """Train every (bits, variant, seed) run of the configured experiment"""
    experiment = experiment_from_args(args)
    out_dir = experiment.out_dir()
    manifest = open_manifest(args, out_dir, experiment.to_dict())
    dataset = experiment_dataset(experiment)
    paths = [run_training(experiment, variant, bits, seed, dataset, manifest)
             for bits in experiment.bits for variant in experiment.variants for seed in experiment.seeds]
    manifest.save()
    logger.info(f"Trained {len(paths)} runs into {out_dir}")
    return 0


train_bp = CommandBlueprint('train', 'train quantized models and write checkpoints', register, handle)
