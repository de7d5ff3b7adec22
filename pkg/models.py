"""
Model Zoo - surrogate benchmark models and synthetic datasets
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from services import autodiff as ad
from services.autodiff import Batch, Layout, ParamVector, Tensor
from services.errors import ConfigurationError
from services.quantizer import QuantSpec, calibrate_all, fake_quant_forward
from services.seeding import rng_for

logger = logging.getLogger(__name__)

PARAMETRIC = ('conv2d', 'dense')
ACTIVATIONS = ('relu', 'sigmoid')


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind plus shape hyperparameters"""
    kind: str
    name: Optional[str] = None
    size: Optional[int] = None  # output channels or units
    kernel: int = 3
    padding: int = 0

    def __post_init__(self):
        if self.kind not in PARAMETRIC + ACTIVATIONS + ('flatten',):
            raise ConfigurationError(f"Unsupported layer kind: {self.kind}")
        if self.kind in PARAMETRIC and (not self.name or not self.size or self.size < 1):
            raise ConfigurationError(f"{self.kind} layer needs a name and a positive size")


@dataclass(frozen=True)
class ModelSpec:
    """Static description of a model"""
    name: str
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]
    task: str = 'regress'
    loss: str = 'mse'
    # weights exposed to bit flips; empty means every weight
    fault_layers: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        object.__setattr__(self, 'input_shape', tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, 'fault_layers', tuple(self.fault_layers))
        if self.loss != 'mse':
            raise ConfigurationError(f"Unsupported loss: {self.loss}")
        self.param_shapes()

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Parameter segments in layer order; raises when shapes do not compose"""
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            if layer.kind == 'conv2d':
                if len(shape) != 3:
                    raise ConfigurationError(f"conv2d layer {layer.name} expects (C, H, W) input, got {shape}")
                channels, height, width = shape
                ho = height + 2 * layer.padding - layer.kernel + 1
                wo = width + 2 * layer.padding - layer.kernel + 1
                if ho < 1 or wo < 1:
                    raise ConfigurationError(f"conv2d layer {layer.name} kernel larger than its input {shape}")
                shapes.append((f'{layer.name}.weight', (layer.size, channels, layer.kernel, layer.kernel)))
                shapes.append((f'{layer.name}.bias', (layer.size,)))
                shape = (layer.size, ho, wo)
            elif layer.kind == 'dense':
                if len(shape) != 1:
                    raise ConfigurationError(f"dense layer {layer.name} expects flat input, got {shape}")
                shapes.append((f'{layer.name}.weight', (layer.size, shape[0])))
                shapes.append((f'{layer.name}.bias', (layer.size,)))
                shape = (layer.size,)
            elif layer.kind == 'flatten':
                shape = (int(np.prod(shape)),)
        if len(shape) != 1:
            raise ConfigurationError(f"Model {self.name} must end with a flat output, got {shape}")
        return shapes

    @property
    def output_dim(self) -> int:
        shape = self.input_shape
        for layer in self.layers:
            if layer.kind in PARAMETRIC:
                shape = (layer.size,)
            elif layer.kind == 'flatten':
                shape = (int(np.prod(shape)),)
        return shape[0]

    @property
    def parameter_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    @property
    def weight_names(self) -> List[str]:
        return [name for name, _ in self.param_shapes() if name.endswith('.weight')]

    @property
    def fault_weight_names(self) -> List[str]:
        if not self.fault_layers:
            return self.weight_names
        return [f'{layer}.weight' for layer in self.fault_layers]


ECON_S = ModelSpec(
    name='econ-s',
    layers=(
        LayerSpec('conv2d', 'conv1', 4, kernel=3),
        LayerSpec('relu'),
        LayerSpec('flatten'),
        LayerSpec('dense', 'enc', 16),
        LayerSpec('dense', 'dec', 64),
    ),
    input_shape=(1, 8, 8),
    task='autoencode',
    fault_layers=('conv1', 'enc'),
)

FUSION_S = ModelSpec(
    name='fusion-s',
    layers=(
        LayerSpec('conv2d', 'conv1', 4, kernel=3, padding=1),
        LayerSpec('relu'),
        LayerSpec('conv2d', 'conv2', 16, kernel=3, padding=1),
        LayerSpec('relu'),
        LayerSpec('flatten'),
        LayerSpec('dense', 'head', 1),
    ),
    input_shape=(1, 16, 16),
    task='regress',
)

REGISTRY: Dict[str, ModelSpec] = {spec.name: spec for spec in (ECON_S, FUSION_S)}


def get_spec(name: str) -> ModelSpec:
    try:
        return REGISTRY[name]
    except KeyError:
        raise ConfigurationError(f"Unknown model spec '{name}'; registered: {sorted(REGISTRY)}") from None


class ModelGraph:
    """Executable model: spec plus optional frozen weight quantization"""

    def __init__(self, spec: ModelSpec, quant: Optional[Dict[str, QuantSpec]] = None):
        self.spec = spec
        self.layout = Layout.from_shapes(spec.param_shapes())
        self.quant = dict(quant or {})
        unknown = set(self.quant) - set(spec.weight_names)
        if unknown:
            raise ConfigurationError(f"Quantization specs for unknown weights: {sorted(unknown)}")

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def bits(self) -> Optional[int]:
        if not self.quant:
            return None
        return next(iter(self.quant.values())).bits

    def with_quantization(self, quant: Optional[Dict[str, QuantSpec]]) -> 'ModelGraph':
        return ModelGraph(self.spec, quant)

    def calibrated(self, params: ParamVector, bits: int) -> 'ModelGraph':
        """Graph whose weight scales are calibrated on ``params``"""
        return self.with_quantization(calibrate_all(params.unflatten(), self.spec.weight_names, bits))

    def _weight(self, segments: Dict[str, Tensor], name: str) -> Tensor:
        w = segments[name]
        spec = self.quant.get(name)
        return fake_quant_forward(w, spec) if spec is not None else w

    def apply(self, segments: Dict[str, Tensor], x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ConfigurationError(
                f"Batch shape {x.shape[1:]} does not match {self.spec.name} input {self.spec.input_shape}")
        for layer in self.spec.layers:
            if layer.kind == 'conv2d':
                x = ad.conv2d(x, self._weight(segments, f'{layer.name}.weight'),
                              segments[f'{layer.name}.bias'], pad=layer.padding)
            elif layer.kind == 'dense':
                x = ad.dense(x, self._weight(segments, f'{layer.name}.weight'), segments[f'{layer.name}.bias'])
            elif layer.kind == 'relu':
                x = ad.relu(x)
            elif layer.kind == 'sigmoid':
                x = ad.sigmoid(x)
            elif layer.kind == 'flatten':
                x = ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        return x

    def build(self, segments: Dict[str, Tensor], inputs: Tensor, targets: Tensor) -> Tuple[Tensor, Tensor]:
        outputs = self.apply(segments, inputs)
        if targets.shape != outputs.shape:
            raise ConfigurationError(f"Target shape {targets.shape} does not match output {outputs.shape}")
        return ad.mse(outputs, targets), outputs

    def predict(self, params: ParamVector, inputs: np.ndarray) -> np.ndarray:
        """Model outputs f(x) for a stack of inputs"""
        tape = ad.Tape()
        tape.recording = False
        segments = {seg.name: ad.Tensor(tape, -1, params.segment(seg.name), 'leaf') for seg in params.layout}
        return self.apply(segments, ad.Tensor(tape, -1, inputs, 'leaf')).data.copy()

    def __repr__(self):
        return f'<ModelGraph {self.spec.name} n={self.layout.n} bits={self.bits}>'


def build_model(spec: ModelSpec, seed: int) -> Tuple[ModelGraph, ParamVector]:
    """Graph plus He-uniform initialized parameters (biases start at zero)"""
    graph = ModelGraph(spec)
    rng = rng_for('init', seed, spec.name)
    arrays = []
    for name, shape in spec.param_shapes():
        if name.endswith('.weight'):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arrays.append((name, rng.uniform(-bound, bound, size=shape)))
        else:
            arrays.append((name, np.zeros(shape)))
    params = ParamVector.flatten(arrays).to_float32()
    logger.debug(f"Built {spec.name} with {len(params)} parameters (seed {seed})")
    return graph, params


@dataclass(frozen=True)
class Dataset:
    """Inputs in [0, 1], targets and a train/test tag per sample"""
    inputs: np.ndarray
    targets: np.ndarray
    split_tags: np.ndarray
    seed: int
    task: str
    size: int = 0

    def __len__(self):
        return int(self.inputs.shape[0])

    def split(self, name: str) -> 'Dataset':
        mask = self.split_tags == name
        return replace(self, inputs=self.inputs[mask], targets=self.targets[mask], split_tags=self.split_tags[mask])

    def batches(self, batch_size: int) -> Iterator[Batch]:
        for start in range(0, len(self), batch_size):
            yield Batch(self.inputs[start:start + batch_size], self.targets[start:start + batch_size])

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.targets)

    def subset(self, indices) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, inputs=self.inputs[indices], targets=self.targets[indices],
                       split_tags=self.split_tags[indices])

    def with_inputs(self, inputs: np.ndarray) -> 'Dataset':
        targets = inputs.reshape(len(inputs), -1).copy() if self.task == 'autoencode' else self.targets
        return replace(self, inputs=inputs, targets=targets)

    def descriptor(self) -> Dict[str, object]:
        return {'task': self.task, 'size': self.size, 'seed': self.seed}


def _charge_deposits(rng: np.random.Generator, size: int) -> np.ndarray:
    images = np.zeros((size, 64))
    for i in range(size):
        count = int(rng.integers(1, 5))
        cells = rng.choice(64, size=count, replace=False)
        images[i, cells] = rng.exponential(1.0, size=count) + 1e-3
        images[i] /= images[i].sum()
    return images.reshape(size, 1, 8, 8)


def mode_pattern(amplitude: float, phase: float, side: int = 16) -> np.ndarray:
    """n=1 mode: 0.5 + 0.5 * a * (r / r_max) * cos(angle - phase)"""
    centre = (side - 1) / 2.0
    yy, xx = np.mgrid[0:side, 0:side].astype(float) - centre
    radius = np.hypot(xx, yy)
    angle = np.arctan2(yy, xx)
    return 0.5 + 0.5 * amplitude * (radius / radius.max()) * np.cos(angle - phase)


def generate_dataset(task: str, size: int, seed: int, amplitudes: Optional[Sequence[float]] = None,
                     test_fraction: float = 0.25) -> Dataset:
    """Seeded synthetic stand-in for the detector / camera data

    autoencode: 8x8 sum-normalized charge deposits, targets equal inputs.
    regress: 16x16 n=1 mode images, target is the amplitude in [0, 1].
    The last ``ceil(size * test_fraction)`` samples form the test split.
    """
    if size < 2:
        raise ConfigurationError(f"Dataset size must be at least 2, got {size}")
    rng = rng_for('data', seed, task, size)
    if task == 'autoencode':
        inputs = _charge_deposits(rng, size)
        targets = inputs.reshape(size, -1).copy()
    elif task == 'regress':
        drawn = rng.uniform(0.0, 1.0, size=size)
        phases = rng.uniform(-np.pi, np.pi, size=size)
        amps = drawn if amplitudes is None else np.asarray(amplitudes, dtype=float)
        if amps.shape != (size,) or np.any((amps < 0) | (amps > 1)):
            raise ConfigurationError("Forced amplitudes must be a length-size array in [0, 1]")
        inputs = np.stack([mode_pattern(a, p) for a, p in zip(amps, phases)])[:, None]
        targets = amps.reshape(size, 1).copy()
    else:
        raise ConfigurationError(f"Unknown task '{task}' (expected autoencode or regress)")
    n_test = min(size - 1, max(1, int(np.ceil(size * test_fraction))))
    tags = np.array(['train'] * (size - n_test) + ['test'] * n_test)
    return Dataset(inputs=inputs, targets=targets, split_tags=tags, seed=int(seed), task=task, size=int(size))


def evaluate(model: ModelGraph, params: ParamVector, data, batch_size: int = 64) -> float:
    """Mean per-sample loss over a dataset split, in fixed batch order"""
    batches = [data] if isinstance(data, Batch) else list(data.batches(batch_size))
    count = sum(len(b) for b in batches)
    if count == 0:
        raise ConfigurationError("Cannot evaluate on an empty split")
    weighted = 0.0
    for batch in batches:
        loss, _ = ad.forward(model, params, batch)
        weighted += loss * len(batch)
    return weighted / count
