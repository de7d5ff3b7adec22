"""
Workbench Configuration
"""
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from dotenv import load_dotenv

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from models import REGISTRY
from services.errors import ConfigurationError
from services.quantizer import MAX_BITS, MIN_BITS
from services.trainer import DEFAULT_DELTAS, OPTIMIZERS, VARIANT_REGULARIZER, TrainConfig

basedir = os.path.abspath(os.path.dirname(__file__))
load_dotenv(os.path.join(basedir, '.env'))


class Config:
    """Base configuration"""
    OUT_DIR = os.environ.get('LLAB_OUT') or os.path.join(os.getcwd(), 'runs')
    WORKERS = 1
    LOG_LEVEL = os.environ.get('LLAB_LOG_LEVEL')

    # Defaults shared by the metric commands
    DATASET_SIZE = 512
    DATA_SEED = 0
    EVAL_BATCH = 256
    HESSIAN_K = 4
    HUTCHINSON_PROBES = 100


class DevelopmentConfig(Config):
    """Development configuration"""
    DEBUG = True


class ProductionConfig(Config):
    """Production configuration"""
    DEBUG = False


def get_config():
    """Configuration class selected by ENV"""
    return DevelopmentConfig if os.environ.get('ENV') == 'development' else ProductionConfig


def default_out_dir() -> Path:
    """LLAB_OUT at call time, else the configured default"""
    return Path(os.environ.get('LLAB_OUT') or get_config().OUT_DIR)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get('LLAB_WORKERS', get_config().WORKERS)))
    except ValueError:
        raise ConfigurationError(f"LLAB_WORKERS must be an integer, got {os.environ.get('LLAB_WORKERS')!r}") from None


METRICS = ('hessian', 'landscape', 'cka', 'modeconn', 'corruption')
ALL_BITS = list(range(MIN_BITS, MAX_BITS + 1))
_TOP_KEYS = {'model', 'bits', 'variants', 'seeds', 'out', 'dataset_size', 'train', 'delta', 'metrics'}
_TRAIN_KEYS = {'epochs', 'batch_size', 'lr', 'optimizer'}


@dataclass
class ExperimentConfig:
    """One experiment grid: model x bit widths x variants x seeds"""
    model: str = 'econ-s'
    bits: List[int] = field(default_factory=lambda: list(ALL_BITS))
    variants: List[str] = field(default_factory=lambda: ['baseline', 'jacobian', 'orthogonal'])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    out: Optional[str] = None
    dataset_size: int = Config.DATASET_SIZE
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = 'adam'
    delta: Dict[str, float] = field(default_factory=dict)
    metrics: Dict[str, bool] = field(default_factory=lambda: {m: True for m in METRICS})

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model not in REGISTRY:
            raise ConfigurationError(f"Unknown model spec '{self.model}'; registered: {sorted(REGISTRY)}")
        if not self.bits:
            raise ConfigurationError("At least one bit width is required")
        bad = [b for b in self.bits if not isinstance(b, int) or not MIN_BITS <= b <= MAX_BITS]
        if bad:
            raise ConfigurationError(f"Bit widths {bad} outside [{MIN_BITS}, {MAX_BITS}]")
        unknown = [v for v in self.variants if v not in VARIANT_REGULARIZER]
        if unknown or not self.variants:
            raise ConfigurationError(f"Unknown variants {unknown}; expected {sorted(VARIANT_REGULARIZER)}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"Seeds must be a non-empty list of distinct values, got {self.seeds}")
        if self.dataset_size < 8:
            raise ConfigurationError(f"dataset_size must be at least 8, got {self.dataset_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"Unknown optimizer '{self.optimizer}'")
        unknown_delta = set(self.delta) - {'jacobian', 'orthogonal'}
        if unknown_delta:
            raise ConfigurationError(f"Unknown delta keys {sorted(unknown_delta)}")
        unknown_metrics = set(self.metrics) - set(METRICS)
        if unknown_metrics:
            raise ConfigurationError(f"Unknown metrics {sorted(unknown_metrics)}")

    def delta_for(self, variant: str) -> float:
        regularizer = VARIANT_REGULARIZER[variant]
        if regularizer == 'none':
            return 0.0
        if regularizer in self.delta:
            return float(self.delta[regularizer])
        return DEFAULT_DELTAS.get(self.model, {}).get(regularizer, 0.0)

    def train_config(self, variant: str, bits: Optional[int], seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, optimizer=self.optimizer,
                           regularizer=VARIANT_REGULARIZER[variant], delta=self.delta_for(variant),
                           bits=bits, seed=seed)

    def metric_enabled(self, name: str) -> bool:
        return bool(self.metrics.get(name, True))

    def out_dir(self) -> Path:
        return Path(self.out) if self.out else default_out_dir()

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def with_overrides(self, bits: Optional[Sequence[int]] = None, variant: Optional[str] = None,
                       seed: Optional[int] = None, out: Optional[str] = None) -> 'ExperimentConfig':
        """Apply the --bits / --variant / --seed / --out command-line flags"""
        changes = {}
        if bits:
            changes['bits'] = list(bits)
        if variant:
            changes['variants'] = [variant]
        if seed is not None:
            changes['seeds'] = [seed]
        if out:
            changes['out'] = out
        return replace(self, **changes)


def _check_keys(table: Dict[str, object], allowed, where: str):
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigurationError(f"Unknown keys in {where}: {sorted(unknown)}")


def parse_experiment(document: Dict[str, object]) -> ExperimentConfig:
    """ExperimentConfig from a parsed TOML document"""
    _check_keys(document, _TOP_KEYS, 'config')
    train = document.get('train', {})
    if not isinstance(train, dict):
        raise ConfigurationError("[train] must be a table")
    _check_keys(train, _TRAIN_KEYS, '[train]')
    values = {k: document[k] for k in ('model', 'bits', 'variants', 'seeds', 'out', 'dataset_size') if k in document}
    values.update(train)
    if 'delta' in document:
        values['delta'] = {k: float(v) for k, v in dict(document['delta']).items()}
    if 'metrics' in document:
        values['metrics'] = {**{m: True for m in METRICS}, **dict(document['metrics'])}
    try:
        return ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigurationError(f"Invalid config value: {e}") from e


def load_experiment(path=None) -> ExperimentConfig:
    """Read a TOML experiment file; defaults when ``path`` is None"""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, 'rb') as handle:
            document = tomllib.load(handle)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"Cannot parse {path}: {e}") from e
    return parse_experiment(document)
