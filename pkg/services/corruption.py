"""
Input noise, weight bit flips and Hessian-ranked fault plans
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import evaluate
from services.autodiff import Batch, ParamVector
from services.errors import ConfigurationError, PlanError
from services.quantizer import QuantizedTensor, quantize
from services.seeding import rng_for

logger = logging.getLogger(__name__)

NOISE_KINDS = ('gaussian', 'salt-pepper')
STRESSORS = NOISE_KINDS + ('bitflip-random', 'bitflip-fkeras')


@dataclass(frozen=True)
class NoiseSpec:
    """gaussian: sigma as a fraction of the [0, 1] range; salt-pepper: per-pixel probability"""
    kind: str
    intensity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigurationError(f"Unknown noise kind '{self.kind}'; expected one of {NOISE_KINDS}")
        if self.intensity < 0:
            raise ConfigurationError(f"Noise intensity must be >= 0, got {self.intensity}")
        if self.kind == 'salt-pepper' and self.intensity > 1:
            raise ConfigurationError(f"Salt-and-pepper probability must be <= 1, got {self.intensity}")


def corrupt_array(inputs: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    if spec.intensity == 0:
        return inputs
    rng = rng_for('noise', spec.seed, spec.kind)
    if spec.kind == 'gaussian':
        return np.clip(inputs + rng.normal(0.0, spec.intensity, size=inputs.shape), 0.0, 1.0)
    hit = rng.random(inputs.shape) < spec.intensity
    salt = rng.random(inputs.shape) < 0.5
    return np.where(hit, salt.astype(float), inputs)


def corrupt_inputs(data, spec: NoiseSpec):
    """Same dataset (or batch) with corrupted inputs; autoencoder targets follow the inputs"""
    if spec.intensity == 0:
        return data
    corrupted = corrupt_array(data.inputs, spec)
    if isinstance(data, Batch):
        return Batch(corrupted, data.targets)
    return data.with_inputs(corrupted)


@dataclass(frozen=True)
class QuantizedModel:
    """Quantized graph with the integer codes of its weights"""
    model: object
    params: ParamVector
    codes: Dict[str, QuantizedTensor]

    @classmethod
    def from_trained(cls, model, params: ParamVector) -> 'QuantizedModel':
        if not getattr(model, 'quant', None):
            raise PlanError("Model has no quantized weights")
        codes = {name: quantize(params.segment(name), spec) for name, spec in model.quant.items()}
        return cls(model, params, codes)

    @property
    def fault_names(self) -> List[str]:
        names = getattr(getattr(self.model, 'spec', None), 'fault_weight_names', None) or list(self.codes)
        return [name for name in names if name in self.codes]

    def dequantized_params(self) -> ParamVector:
        params = self.params
        for name, q in self.codes.items():
            params = params.replace_segment(name, q.dequantize())
        return params

    def evaluate(self, data) -> float:
        return evaluate(self.model, self.dequantized_params(), data)

    def candidate_indices(self) -> np.ndarray:
        """Flat parameter indices of every weight exposed to flips"""
        ranges = [np.arange(self.params.layout.get(name).offset, self.params.layout.get(name).stop)
                  for name in self.fault_names]
        return np.concatenate(ranges) if ranges else np.zeros(0, dtype=np.int64)

    def bits_of(self, name: str) -> int:
        return self.codes[name].spec.bits


@dataclass(frozen=True)
class FaultPlan:
    """Ordered (flat parameter index, bit position) targets"""
    targets: Tuple[Tuple[int, int], ...]
    method: str = 'random'
    k_eigs: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        targets = tuple((int(i), int(b)) for i, b in self.targets)
        object.__setattr__(self, 'targets', targets)
        if len(set(targets)) != len(targets):
            raise PlanError("Fault plan contains duplicate targets")
        if any(i < 0 or b < 0 for i, b in targets):
            raise PlanError("Fault plan indices and bit positions must be non-negative")

    def __len__(self):
        return len(self.targets)


@dataclass(frozen=True)
class FlipRecord:
    index: int
    bit: int
    old_code: int
    new_code: int
    delta: float


def flip_code(code: int, bit: int, bits: int) -> int:
    """XOR one bit of a two's-complement code of width ``bits``"""
    unsigned = (int(code) & ((1 << bits) - 1)) ^ (1 << bit)
    return unsigned - (1 << bits) if unsigned >= 1 << (bits - 1) else unsigned


def _locate(params: ParamVector, index: int):
    for seg in params.layout:
        if seg.offset <= index < seg.stop:
            return seg
    raise PlanError(f"Parameter index {index} outside the model ({params.layout.n} parameters)")


def flip_bits(qmodel: QuantizedModel, plan: FaultPlan) -> Tuple[QuantizedModel, List[FlipRecord]]:
    """Apply every target of the plan cumulatively to a private copy of the codes"""
    codes = {name: q.codes.copy() for name, q in qmodel.codes.items()}
    records = []
    for index, bit in plan.targets:
        seg = _locate(qmodel.params, index)
        if seg.name not in codes:
            raise PlanError(f"Target {index} lies in '{seg.name}', which is not quantized")
        spec = qmodel.codes[seg.name].spec
        if bit >= spec.bits:
            raise PlanError(f"Bit {bit} outside a {spec.bits}-bit code")
        flat = codes[seg.name].reshape(-1)
        old = int(flat[index - seg.offset])
        new = flip_code(old, bit, spec.bits)
        flat[index - seg.offset] = new
        records.append(FlipRecord(index, bit, old, new, float(new - old) * spec.scale))
    flipped = {name: QuantizedTensor(arr, qmodel.codes[name].spec) for name, arr in codes.items()}
    logger.debug(f"Flipped {len(records)} bits ({plan.method})")
    return replace(qmodel, codes=flipped), records


@dataclass
class SensitivityRanking:
    """Per-parameter H' scores and their order, with the eigenpairs behind them

    ``directions`` holds one eigenvector per row.
    """
    scores: np.ndarray
    order: np.ndarray
    k: int
    eigenvalues: np.ndarray
    directions: np.ndarray


def low_rank_hessian(report, k: int) -> np.ndarray:
    """sum_i lambda_i v_i v_i^T over the first k eigenpairs"""
    vectors = np.stack([v.values for v in report.eigenvectors[:k]])
    return vectors.T @ (np.asarray(report.eigenvalues[:k])[:, None] * vectors)


def sensitivity_scores(params: ParamVector, report, k: Optional[int] = None) -> SensitivityRanking:
    """H' = sum_i lambda_i (v_i . theta) v_i

    Order: descending |H'|, then descending |theta|, then ascending index.
    """
    k = report.k if k is None else k
    if k < 1 or k > report.k:
        raise ConfigurationError(f"k={k} but the Hessian report holds {report.k} eigenpairs")
    theta = params.values
    eigenvalues = np.asarray(report.eigenvalues[:k], dtype=float)
    directions = np.stack([v.values for v in report.eigenvectors[:k]])
    scores = directions.T @ (eigenvalues * (directions @ theta))
    index = np.arange(theta.size)
    order = np.lexsort((index, -np.abs(theta), -np.abs(scores)))
    return SensitivityRanking(scores=scores, order=order, k=k, eigenvalues=eigenvalues, directions=directions)


def _code_shifts(codes: np.ndarray, bits: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """new - old code for XOR-ing ``bits`` into two's-complement ``codes``"""
    unsigned = (codes & ((1 << widths) - 1)) ^ (1 << bits)
    return np.where(unsigned >= 1 << (widths - 1), unsigned - (1 << widths), unsigned) - codes


def plan_fkeras(qmodel: QuantizedModel, ranking: SensitivityRanking, count: int) -> FaultPlan:
    """Greedy worst-case plan over the ranked weights

    Each step adds the bit whose flip, on top of the flips already chosen,
    maximizes the predicted loss increase 0.5 sum_i lambda_i (v_i . delta)^2,
    delta being the cumulative change of the dequantized weights. Shifts are
    read off the current codes, so a weight hit twice sees its first flip.
    Within a weight, bits are taken MSB to LSB. Equal predictions go to the
    higher bit, then to the better H' rank; without curvature the plan is
    therefore the MSB of every ranked weight first.
    """
    allowed = set(int(i) for i in qmodel.candidate_indices())
    ranked = np.array([int(i) for i in ranking.order if int(i) in allowed], dtype=np.int64)
    segments = [_locate(qmodel.params, int(i)) for i in ranked]
    widths = np.array([qmodel.bits_of(seg.name) for seg in segments], dtype=np.int64)
    available = int(widths.sum())
    if count > available:
        raise PlanError(f"Requested {count} flips but only {available} candidate bits exist")
    scales = np.array([qmodel.codes[seg.name].spec.scale for seg in segments])
    codes = np.array([qmodel.codes[seg.name].codes.reshape(-1)[i - seg.offset] for seg, i in zip(segments, ranked)],
                     dtype=np.int64)

    weight = np.repeat(np.arange(len(ranked)), widths)
    bit = np.concatenate([np.arange(w) for w in widths]) if len(widths) else np.zeros(0, dtype=np.int64)
    priority = np.lexsort((weight, -bit))
    weight, bit = weight[priority], bit[priority]
    columns = ranking.directions[:, ranked[weight]]
    eigenvalues = ranking.eigenvalues[:, None]

    ceiling = widths.copy()
    projection = np.zeros(ranking.directions.shape[0])
    targets = []
    for step in range(count):
        # bits above the pick are given up; enough must stay open for the remaining steps
        open_bits = int(ceiling.sum())
        eligible = (bit < ceiling[weight]) & (open_bits - (ceiling[weight] - bit) >= count - step - 1)
        shift = _code_shifts(codes[weight], bit, widths[weight]) * scales[weight]
        moved = projection[:, None] + columns * shift
        damage = 0.5 * np.sum(eigenvalues * moved ** 2, axis=0)
        damage[~eligible] = -np.inf
        pick = int(np.argmax(damage))
        w, b = int(weight[pick]), int(bit[pick])
        projection = moved[:, pick]
        codes[w] = flip_code(int(codes[w]), b, int(widths[w]))
        ceiling[w] = b
        targets.append((int(ranked[w]), b))
    predicted = 0.5 * float(np.sum(ranking.eigenvalues * projection ** 2))
    logger.debug(f"FKeras plan of {count} flips, predicted loss increase {predicted:.6g}")
    return FaultPlan(tuple(targets), method='fkeras', k_eigs=ranking.k)


def plan_random(qmodel: QuantizedModel, count: int, seed: int = 0) -> FaultPlan:
    """``count`` distinct (parameter, bit) targets drawn uniformly"""
    candidates = [(int(i), bit) for i in qmodel.candidate_indices()
                  for bit in range(qmodel.bits_of(_locate(qmodel.params, int(i)).name))]
    if count > len(candidates):
        raise PlanError(f"Requested {count} flips but only {len(candidates)} candidate bits exist")
    picks = rng_for('bitflip', seed, count).choice(len(candidates), size=count, replace=False)
    return FaultPlan(tuple(candidates[p] for p in picks), method='random', seed=seed)


@dataclass
class ModelInstance:
    """One trained run entering a robustness sweep"""
    variant: str
    bits: Optional[int]
    seed: int
    model: object
    params: ParamVector
    hessian: Optional[object] = None


@dataclass
class RobustnessCurve:
    stressor: str
    rows: List[Dict[str, object]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {'stressor': self.stressor, 'rows': self.rows}


def stressed_loss(instance: ModelInstance, data, stressor: str, level: float, k_eigs: Optional[int] = None) -> float:
    """Test loss of one instance under one stressor level"""
    if stressor not in STRESSORS:
        raise ConfigurationError(f"Unknown stressor '{stressor}'; expected one of {STRESSORS}")
    if level == 0:
        return evaluate(instance.model, instance.params, data)
    if stressor in NOISE_KINDS:
        return evaluate(instance.model, instance.params,
                        corrupt_inputs(data, NoiseSpec(stressor, float(level), instance.seed)))
    count = int(level)
    qmodel = QuantizedModel.from_trained(instance.model, instance.params)
    if stressor == 'bitflip-random':
        plan = plan_random(qmodel, count, seed=instance.seed)
    else:
        if instance.hessian is None:
            raise ConfigurationError("bitflip-fkeras needs a Hessian report for every model")
        plan = plan_fkeras(qmodel, sensitivity_scores(qmodel.dequantized_params(), instance.hessian, k_eigs), count)
    flipped, _ = flip_bits(qmodel, plan)
    return flipped.evaluate(data)


def robustness_sweep(instances: Sequence[ModelInstance], data, stressor: str, levels: Sequence[float],
                     k_eigs: Optional[int] = None) -> RobustnessCurve:
    """Mean and std of the test loss over seeds per (bit width, variant, level)"""
    groups: Dict[Tuple[Optional[int], str], List[ModelInstance]] = {}
    for instance in instances:
        groups.setdefault((instance.bits, instance.variant), []).append(instance)
    curve = RobustnessCurve(stressor)
    for (bits, variant), members in sorted(groups.items(), key=lambda kv: (kv[0][0] or 0, kv[0][1])):
        for level in levels:
            losses = np.array([stressed_loss(m, data, stressor, level, k_eigs) for m in members])
            curve.rows.append({
                'bit_width': bits,
                'variant': variant,
                'stressor_param': float(level),
                'mean_loss': float(losses.mean()),
                'std_loss': float(losses.std()),
                'n_seeds': len(members),
            })
    logger.info(f"Robustness sweep '{stressor}': {len(curve.rows)} rows over {len(instances)} models")
    return curve
