"""
Bezier-curve mode connectivity between trained minima
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import comb
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import evaluate
from services import autodiff as ad
from services.autodiff import Batch, ParamVector
from services.errors import ConfigurationError, NumericError, RangeError
from services.seeding import rng_for
from services.trainer import TrainConfig, make_optimizer

logger = logging.getLogger(__name__)

MAX_BENDS = 10
DEFAULT_SAMPLES = 60
BEND_EPOCHS = 30

BETTER_MINIMA = 'better-minima'
BARRIER = 'barrier'
WELL_CONNECTED = 'well-connected'


@dataclass(frozen=True)
class BezierCurve:
    """Anchors theta_0..theta_k; the two ends are the compared models"""
    anchors: Tuple[ParamVector, ...]
    epochs: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'anchors', tuple(self.anchors))
        if len(self.anchors) < 2:
            raise ConfigurationError("A curve needs at least two anchors")
        if len(self.anchors) - 1 > MAX_BENDS:
            raise ConfigurationError(f"At most {MAX_BENDS} bends are supported, got k={len(self.anchors) - 1}")
        layout = self.anchors[0].layout
        if any(a.layout != layout for a in self.anchors):
            raise ConfigurationError("Curve anchors do not share one layout")

    @property
    def k(self) -> int:
        return len(self.anchors) - 1

    @property
    def start(self) -> ParamVector:
        return self.anchors[0]

    @property
    def end(self) -> ParamVector:
        return self.anchors[-1]


def bernstein(k: int, t: float) -> np.ndarray:
    """C(k, j) (1 - t)^(k - j) t^j for j = 0..k"""
    return np.array([comb(k, j) * (1.0 - t) ** (k - j) * t ** j for j in range(k + 1)])


def _combine(anchors: Sequence[ParamVector], weights: np.ndarray) -> np.ndarray:
    point = weights[0] * anchors[0].values
    for w, anchor in zip(weights[1:], anchors[1:]):
        point = point + w * anchor.values
    return point


def curve_point(curve: BezierCurve, t: float) -> ParamVector:
    """gamma(t) = sum_j C(k, j) (1 - t)^(k - j) t^j theta_j"""
    if not 0.0 <= t <= 1.0:
        raise RangeError(f"Curve parameter t={t} outside [0, 1]")
    if t == 0.0:
        return curve.start
    if t == 1.0:
        return curve.end
    return ParamVector(_combine(curve.anchors, bernstein(curve.k, t)), curve.start.layout)


def linear_path(theta_a: ParamVector, theta_b: ParamVector) -> BezierCurve:
    """Straight segment between two models (k = 1)"""
    return BezierCurve((theta_a, theta_b))


def _interpolated_anchors(theta_a: ParamVector, theta_b: ParamVector, k: int) -> List[ParamVector]:
    return [theta_a] + [theta_a + (theta_b - theta_a) * (j / k) for j in range(1, k)] + [theta_b]


def train_bends(model, theta_a: ParamVector, theta_b: ParamVector, dataset, k: int = 2,
                epochs: int = BEND_EPOCHS, config: Optional[TrainConfig] = None) -> BezierCurve:
    """Fit the interior anchors to minimize the expected loss along the curve

    Interior anchors start on the straight line. Each step draws one t
    uniformly, evaluates the loss at gamma(t) and moves only the interior
    anchors. The ends are never modified.
    """
    if theta_a.layout != theta_b.layout:
        raise ConfigurationError("Endpoints do not share one layout")
    if not 1 <= k <= MAX_BENDS:
        raise ConfigurationError(f"k must be in [1, {MAX_BENDS}], got {k}")
    if epochs < 0:
        raise ConfigurationError(f"epochs must be >= 0, got {epochs}")
    config = config or TrainConfig(lr=1e-3)
    anchors = _interpolated_anchors(theta_a, theta_b, k)
    if k == 1 or epochs == 0:
        return BezierCurve(anchors, epochs=0)

    train_split = dataset.split('train')
    if len(train_split) == 0:
        raise ConfigurationError("Training split is empty")
    n = theta_a.layout.n
    interior = np.concatenate([a.values for a in anchors[1:-1]])
    optimizer = make_optimizer(config.optimizer, config.lr)
    shuffle_rng = rng_for('bend-shuffle', config.seed)
    t_rng = rng_for('bend-t', config.seed)
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(train_split))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            t = float(t_rng.uniform(0.0, 1.0))
            weights = bernstein(k, t)
            current = [theta_a] + [ParamVector(interior[j * n:(j + 1) * n], theta_a.layout)
                                   for j in range(k - 1)] + [theta_b]
            point = ParamVector(_combine(current, weights), theta_a.layout)
            try:
                _, tape = ad.forward(model, point, Batch(train_split.inputs[idx], train_split.targets[idx]))
                grad = ad.gradient(tape).values
            except NumericError as e:
                raise NumericError(f"Bend training diverged at epoch {epoch}: {e}", op_id=e.op_id) from e
            interior = optimizer.step(interior, np.concatenate([weights[j] * grad for j in range(1, k)]))
            if not np.all(np.isfinite(interior)):
                raise NumericError(f"Bend training diverged at epoch {epoch}")
        logger.debug(f"bend epoch {epoch} done")
    bends = [ParamVector(interior[j * n:(j + 1) * n], theta_a.layout).to_float32() for j in range(k - 1)]
    logger.info(f"Trained {k - 1} interior bends for {epochs} epochs")
    return BezierCurve([theta_a] + bends + [theta_b], epochs=epochs)


@dataclass
class ModeConnectivityReport:
    t_values: List[float]
    curve_losses: List[float]
    d_values: List[float]
    mc: float
    t_star: float
    classification: str
    loss_a: float
    loss_b: float
    epsilon: float
    bends: int = 1
    epochs: int = 0

    def to_dict(self) -> Dict[str, object]:
        return {
            't_values': self.t_values,
            'curve_losses': self.curve_losses,
            'd_values': self.d_values,
            'mc': self.mc,
            't_star': self.t_star,
            'classification': self.classification,
            'epsilon': self.epsilon,
            'bends': self.bends,
            'epochs': self.epochs,
        }

    def rows(self) -> List[Dict[str, float]]:
        return [{'t': t, 'loss': loss, 'd': d} for t, loss, d in zip(self.t_values, self.curve_losses, self.d_values)]


def sample_grid(m: int) -> np.ndarray:
    """t_i = i / (m - 1), both boundaries included"""
    if m <= 2:
        raise ConfigurationError(f"Need m > 2 curve samples, got {m}")
    return np.arange(m) / (m - 1)


def classify(mc: float, epsilon: float) -> str:
    if mc > epsilon:
        return BETTER_MINIMA
    if mc < -epsilon:
        return BARRIER
    return WELL_CONNECTED


def connectivity_from_losses(t_values: Sequence[float], curve_losses: Sequence[float], loss_a: float,
                             loss_b: float, epsilon: Optional[float] = None) -> ModeConnectivityReport:
    """d(t) = (L_a + L_b) / 2 - L(gamma(t)); mc = d(t*) with t* = argmax |d| (first on ties)"""
    losses = np.asarray(curve_losses, dtype=float)
    average = 0.5 * (loss_a + loss_b)
    d = average - losses
    star = int(np.argmax(np.abs(d)))
    mc = float(d[star])
    epsilon = 0.05 * abs(average) if epsilon is None else float(epsilon)
    return ModeConnectivityReport(
        t_values=[float(t) for t in t_values],
        curve_losses=[float(v) for v in losses],
        d_values=[float(v) for v in d],
        mc=mc,
        t_star=float(t_values[star]),
        classification=classify(mc, epsilon),
        loss_a=float(loss_a),
        loss_b=float(loss_b),
        epsilon=epsilon,
    )


def mode_connectivity(model, curve: BezierCurve, data, m: int = DEFAULT_SAMPLES,
                      epsilon: Optional[float] = None, workers: int = 1) -> ModeConnectivityReport:
    """Loss along the curve at m evenly spaced t, and its mode-connectivity statistics"""
    t_values = sample_grid(m)

    def loss_at(t):
        return evaluate(model, curve_point(curve, float(t)), data)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            losses = list(pool.map(loss_at, t_values))
    else:
        losses = [loss_at(t) for t in t_values]
    report = connectivity_from_losses(t_values, losses, losses[0], losses[-1], epsilon)
    report.bends = curve.k
    report.epochs = curve.epochs
    logger.info(f"mc={report.mc:.6g} at t*={report.t_star:.3f} ({report.classification}, k={curve.k})")
    return report


@dataclass
class MaxMcReport:
    value: float
    pairs: List[Dict[str, object]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {'max_mc': self.value, 'pairs': self.pairs}


def extreme_mc(t_values: Sequence[float], curve_losses: Sequence[float]) -> Tuple[float, float, float]:
    """mc of the sampled pair (t_a, t_b), a < b, with the largest |mc|; returns (mc, t_a, t_b)

    Each pair is joined by the arc of the curve between its two samples, so
    its d values come from the losses already sampled there. Ties keep the
    first pair in (a, b) order.
    """
    losses = np.asarray(curve_losses, dtype=float)
    best = (0.0, float(t_values[0]), float(t_values[-1]))
    for a in range(len(losses) - 1):
        for b in range(a + 1, len(losses)):
            d = 0.5 * (losses[a] + losses[b]) - losses[a:b + 1]
            mc = float(d[int(np.argmax(np.abs(d)))])
            if abs(mc) > abs(best[0]):
                best = (mc, float(t_values[a]), float(t_values[b]))
    return best


def max_mc(model, instances: Sequence[ParamVector], dataset, m: int = DEFAULT_SAMPLES, k: int = 2,
           epochs: int = BEND_EPOCHS, config: Optional[TrainConfig] = None,
           epsilon: Optional[float] = None,
           curves: Optional[Dict[Tuple[int, int], BezierCurve]] = None) -> MaxMcReport:
    """Most extreme mc over the pairs in T x T, T being the m samples of each trained curve

    Every pair of instances gets its own curve; its samples are paired among
    themselves and no further curves are trained. ``curves`` supplies already
    trained curves keyed by instance pair (i, j).
    """
    if len(instances) < 2:
        raise ConfigurationError(f"Max mc needs at least 2 models, got {len(instances)}")
    data = dataset.split('test')
    pairs = []
    for i in range(len(instances)):
        for j in range(i + 1, len(instances)):
            curve = (curves or {}).get((i, j))
            if curve is None:
                curve = train_bends(model, instances[i], instances[j], dataset, k=k, epochs=epochs, config=config)
            report = mode_connectivity(model, curve, data, m=m, epsilon=epsilon)
            extreme, t_a, t_b = extreme_mc(report.t_values, report.curve_losses)
            pairs.append({'i': i, 'j': j, 'mc': report.mc, 't_star': report.t_star,
                          'classification': report.classification, 'max_mc': extreme, 't_a': t_a, 't_b': t_b})
    value = pairs[0]['max_mc']
    for pair in pairs[1:]:
        if abs(pair['max_mc']) > abs(value):
            value = pair['max_mc']
    logger.info(f"Max mc over {len(pairs)} curves of {m} samples: {value:.6g}")
    return MaxMcReport(value, pairs)


def connectivity_ablation(model, theta_a: ParamVector, theta_b: ParamVector, dataset,
                          bends_grid: Sequence[int] = (1, 2, 3), epochs_grid: Sequence[int] = (1, 15, 30, 50),
                          m: int = DEFAULT_SAMPLES, config: Optional[TrainConfig] = None) -> List[Dict[str, object]]:
    """mc for every (bends, epochs) combination on one pair of models"""
    data = dataset.split('test')
    rows = []
    for k in bends_grid:
        for epochs in epochs_grid:
            curve = train_bends(model, theta_a, theta_b, dataset, k=k, epochs=epochs, config=config)
            report = mode_connectivity(model, curve, data, m=m)
            rows.append({'bends': k, 'epochs': epochs, 'mc': report.mc, 'classification': report.classification})
    return rows
