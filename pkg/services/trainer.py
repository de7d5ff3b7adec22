"""
Seeded QAT training loop with Jacobian and orthogonal regularization
"""
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from models import ModelSpec, build_model, evaluate
from services import autodiff as ad
from services.autodiff import Batch, ParamVector, Tape, Tensor
from services.corruption import NoiseSpec, corrupt_inputs
from services.errors import ConfigurationError, NumericError
from services.quantizer import MAX_BITS, MIN_BITS
from services.seeding import rng_for

logger = logging.getLogger(__name__)

OPTIMIZERS = ('sgd', 'adam')
REGULARIZERS = ('none', 'jacobian', 'orthogonal')
VARIANT_REGULARIZER = {'baseline': 'none', 'jacobian': 'jacobian', 'orthogonal': 'orthogonal'}

# regularization weights used for the registered surrogates
DEFAULT_DELTAS: Dict[str, Dict[str, float]] = {
    'econ-s': {'jacobian': 0.1, 'orthogonal': 1e-5},
    'fusion-s': {'jacobian': 1e-6, 'orthogonal': 1e-6},
}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run"""
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = 'adam'
    regularizer: str = 'none'
    delta: float = 0.0
    bits: Optional[int] = None
    seed: int = 0
    nproj: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"Unknown optimizer '{self.optimizer}'")
        if self.regularizer not in REGULARIZERS:
            raise ConfigurationError(f"Unknown regularizer '{self.regularizer}'")
        if self.delta < 0:
            raise ConfigurationError(f"delta must be >= 0, got {self.delta}")
        if self.bits is not None and not MIN_BITS <= self.bits <= MAX_BITS:
            raise ConfigurationError(f"Bit width {self.bits} outside [{MIN_BITS}, {MAX_BITS}]")
        if self.nproj < 1:
            raise ConfigurationError(f"nproj must be >= 1, got {self.nproj}")

    @property
    def penalty_active(self) -> bool:
        return self.regularizer != 'none' and self.delta > 0

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def default_config(model_name: str, variant: str = 'baseline', bits: Optional[int] = None,
                   seed: int = 0, **overrides) -> TrainConfig:
    """Registered defaults for a (model, variant) pair"""
    if variant not in VARIANT_REGULARIZER:
        raise ConfigurationError(f"Unknown variant '{variant}'; expected one of {sorted(VARIANT_REGULARIZER)}")
    regularizer = VARIANT_REGULARIZER[variant]
    delta = DEFAULT_DELTAS.get(model_name, {}).get(regularizer, 0.0)
    return TrainConfig(regularizer=regularizer, delta=delta, bits=bits, seed=seed, **overrides)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    penalty: float


@dataclass
class TrainedModel:
    """Result of a training run: final graph (frozen scales), parameters and history"""
    model: object
    params: ParamVector
    config: TrainConfig
    history: List[EpochRecord] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Regularizers
# ---------------------------------------------------------------------------

def _unit_rows(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def jacobian_penalty_node(tape: Tape, nproj: int, rng: Optional[np.random.Generator] = None,
                          exact: bool = False) -> Tensor:
    """Differentiable estimate of the batch-mean squared Frobenius norm of df/dx

    Random mode sums ||d(v.f)/dx||^2 over ``nproj`` unit projections per
    sample and rescales by d_out / nproj. Exact mode uses the standard basis
    without rescaling.
    """
    outputs = tape.outputs
    n_samples, d_out = outputs.shape[0], outputs.shape[-1]
    if exact:
        projections = [np.eye(d_out)[i] for i in range(d_out)]
        factor = 1.0 / n_samples
    else:
        if nproj < 1:
            raise ConfigurationError(f"nproj must be >= 1, got {nproj}")
        projections = [_unit_rows(rng, outputs.shape) for _ in range(nproj)]
        factor = d_out / (nproj * n_samples)
    accumulated = None
    for v in projections:
        g = ad.input_gradient(tape, v, create_graph=True)
        term = ad.total(ad.mul(g, g))
        accumulated = term if accumulated is None else ad.add(accumulated, term)
    return ad.scale(accumulated, factor)


def jacobian_penalty(model, params: ParamVector, batch: Batch, nproj: int = 1, seed: int = 0,
                     exact: bool = False) -> float:
    """Estimate of ||J(x)||_F^2 averaged over the batch"""
    if nproj < 1:
        raise ConfigurationError(f"nproj must be >= 1, got {nproj}")
    _, tape = ad.forward(model, params, batch, track_inputs=True)
    return jacobian_penalty_node(tape, nproj, rng_for('jacobian', seed), exact=exact).item()


def orthogonal_penalty_node(segments: Dict[str, Tensor], names: Sequence[str]) -> Tensor:
    """Sum over weights of ||W^T W - I||_F with W reshaped to (out, fan_in)

    Uses ||W^T W - I||_F^2 = ||W W^T||_F^2 - 2||W||_F^2 + fan_in so only the
    (out x out) Gram matrix is formed.
    """
    accumulated = None
    for name in names:
        w = segments[name]
        fan_in = int(np.prod(w.shape[1:]))
        w2 = ad.reshape(w, (w.shape[0], fan_in))
        gram = ad.matmul(w2, ad.transpose(w2))
        squared = ad.add(ad.sub(ad.total(ad.mul(gram, gram)), ad.scale(ad.total(ad.mul(w2, w2)), 2.0)),
                         float(fan_in))
        term = ad.sqrt(ad.relu(squared))
        accumulated = term if accumulated is None else ad.add(accumulated, term)
    if accumulated is None:
        raise ConfigurationError("No weight tensors to regularize")
    return accumulated


def weight_names(params: ParamVector) -> List[str]:
    return [name for name in params.layout.names if name.endswith('.weight')]


def orthogonal_penalty(params: ParamVector, names: Optional[Sequence[str]] = None) -> float:
    """Soft orthogonality penalty over every dense / conv weight"""
    names = weight_names(params) if names is None else list(names)
    tape = Tape()
    tape.recording = False
    segments = {name: Tensor(tape, -1, params.segment(name), 'leaf') for name in names}
    return orthogonal_penalty_node(segments, names).item()


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGD:
    """Plain gradient descent"""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, values: np.ndarray, grads: np.ndarray) -> np.ndarray:
        return values - self.lr * grads


class Adam:
    """Adam with bias correction"""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, values: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1 - self.beta2) * grads * grads
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == 'sgd':
        return SGD(lr)
    if name == 'adam':
        return Adam(lr)
    raise ConfigurationError(f"Unknown optimizer '{name}'")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def regularized_step(model, params: ParamVector, batch: Batch, config: TrainConfig,
                     rng: Optional[np.random.Generator] = None):
    """(task loss, penalty, gradient of task loss + delta * penalty)"""
    use_jacobian = config.penalty_active and config.regularizer == 'jacobian'
    loss_value, tape = ad.forward(model, params, batch, track_inputs=use_jacobian)
    objective = tape.loss
    penalty_value = 0.0
    if config.penalty_active:
        if use_jacobian:
            penalty = jacobian_penalty_node(tape, config.nproj, rng)
        else:
            penalty = orthogonal_penalty_node(tape.segments, weight_names(params))
        penalty_value = penalty.item()
        objective = ad.add(objective, ad.scale(penalty, config.delta))
    leaves = [tape.segments[seg.name] for seg in params.layout]
    grads = tape.backward(objective, leaves)
    flat = ParamVector(np.concatenate([g.data.reshape(-1) for g in grads]), params.layout)
    return loss_value, penalty_value, flat


def train(model, dataset, config: TrainConfig, init_params: Optional[ParamVector] = None) -> TrainedModel:
    """Train ``model`` on the train split; total loss = task loss + delta * penalty

    ``model`` is a ModelSpec (parameters initialized from ``config.seed``) or
    a graph-like object together with ``init_params``. With ``config.bits``
    weight scales are recalibrated at every epoch boundary and frozen at the
    end.
    """
    if isinstance(model, ModelSpec):
        model, built = build_model(model, config.seed)
        params = init_params if init_params is not None else built
    else:
        if init_params is None:
            raise ConfigurationError("init_params is required when training a prebuilt graph")
        params = init_params
    params = params.to_float32()

    train_split = dataset.split('train')
    test_split = dataset.split('test')
    if len(train_split) == 0:
        raise ConfigurationError("Training split is empty")
    shuffle_rng = rng_for('shuffle', config.seed)
    projection_rng = rng_for('jacobian', config.seed)
    optimizer = make_optimizer(config.optimizer, config.lr)
    quantized = config.bits is not None and hasattr(model, 'calibrated')

    result = TrainedModel(model=model, params=params, config=config)
    for epoch in range(config.epochs):
        if quantized:
            model = model.calibrated(params, config.bits)
        order = shuffle_rng.permutation(len(train_split))
        penalties = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = Batch(train_split.inputs[idx], train_split.targets[idx])
            try:
                _, penalty, grads = regularized_step(model, params, batch, config, projection_rng)
                updated = ParamVector(optimizer.step(params.values, grads.values), params.layout)
            except NumericError as e:
                logger.error(f"Training diverged at epoch {epoch}: {e}")
                raise NumericError(f"Training diverged at epoch {epoch}: {e}", op_id=e.op_id,
                                   checkpoint=result) from e
            if not np.all(np.isfinite(updated.values)):
                raise NumericError(f"Non-finite parameters after epoch {epoch} update", checkpoint=result)
            params = updated.to_float32()
            penalties.append(penalty)
        record = EpochRecord(
            epoch=epoch,
            train_loss=evaluate(model, params, train_split, config.batch_size),
            test_loss=evaluate(model, params, test_split, config.batch_size) if len(test_split) else float('nan'),
            penalty=float(np.mean(penalties)) if penalties else 0.0,
        )
        result = TrainedModel(model=model, params=params, config=config, history=result.history + [record])
        logger.debug(f"epoch {epoch}: train {record.train_loss:.6g} test {record.test_loss:.6g} "
                     f"penalty {record.penalty:.6g}")
    if quantized:
        model = model.calibrated(params, config.bits)
    result = replace(result, model=model, params=params)
    if result.history:
        last = result.history[-1]
        logger.info(f"Trained {getattr(model, 'name', 'model')} ({config.regularizer}, bits={config.bits}, "
                    f"seed={config.seed}): train {last.train_loss:.6g}, test {last.test_loss:.6g}")
    return result


def delta_sweep(spec, dataset, regularizer: str, deltas: Sequence[float], base: TrainConfig,
                noise_sigma: float = 0.1) -> List[Dict[str, float]]:
    """Clean and Gaussian-perturbed test loss of one model trained per delta"""
    test_split = dataset.split('test')
    noisy = corrupt_inputs(test_split, NoiseSpec('gaussian', noise_sigma, base.seed))
    rows = []
    for delta in deltas:
        config = replace(base, regularizer=regularizer, delta=float(delta))
        trained = train(spec, dataset, config)
        rows.append({
            'delta': float(delta),
            'clean_loss': evaluate(trained.model, trained.params, test_split),
            'noisy_loss': evaluate(trained.model, trained.params, noisy),
        })
        logger.info(f"delta {delta:g}: clean {rows[-1]['clean_loss']:.6g}, noisy {rows[-1]['noisy_loss']:.6g}")
    return rows
