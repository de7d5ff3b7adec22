"""
Loss-landscape slices L(theta + alpha*sigma + beta*eta)
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from models import evaluate
from services.autodiff import ParamVector
from services.errors import ConfigurationError, NumericError
from services.seeding import rng_for

logger = logging.getLogger(__name__)

DIRECTION_KINDS = ('random', 'eigen')


@dataclass(frozen=True)
class Direction:
    """Perturbation direction with its provenance"""
    vector: ParamVector
    kind: str
    index: Optional[int] = None
    seed: Optional[int] = None
    dead_filters: int = 0

    def describe(self) -> Dict[str, object]:
        return {'kind': self.kind, 'index': self.index, 'seed': self.seed,
                'norm': self.vector.norm(), 'dead_filters': self.dead_filters}


def _filter_slices(params: ParamVector):
    """(segment name, weight array) for every weight; axis 0 indexes filters"""
    return [(seg.name, params.segment(seg.name)) for seg in params.layout if seg.name.endswith('.weight')]


def filter_normalize(raw: np.ndarray, params: ParamVector, reference: Optional[np.ndarray] = None) -> Tuple[ParamVector, int]:
    """Rescale every filter of ``raw`` to the norm of the matching filter of params

    Biases get a zero direction. With ``reference`` each filter is first
    made orthogonal to the matching filter of that vector.
    """
    template = ParamVector(raw, params.layout)
    ref = ParamVector(reference, params.layout) if reference is not None else None
    out = np.zeros(params.layout.n)
    dead = 0
    for name, theta in _filter_slices(params):
        seg = params.layout.get(name)
        d = template.segment(name).reshape(theta.shape[0], -1).copy()
        t = theta.reshape(theta.shape[0], -1)
        if ref is not None:
            r = ref.segment(name).reshape(theta.shape[0], -1)
            rr = np.einsum('ij,ij->i', r, r)
            coef = np.divide(np.einsum('ij,ij->i', d, r), rr, out=np.zeros_like(rr), where=rr > 0)
            d = d - coef[:, None] * r
        theta_norm = np.linalg.norm(t, axis=1)
        d_norm = np.linalg.norm(d, axis=1)
        live = (theta_norm > 0) & (d_norm > 0)
        dead += int(np.sum(~live))
        d[live] *= (theta_norm[live] / d_norm[live])[:, None]
        d[~live] = 0.0
        out[seg.offset:seg.stop] = d.reshape(-1)
    if dead:
        logger.warning(f"{dead} zero-norm filters; their direction slices are set to zero")
    return ParamVector(out, params.layout), dead


def make_direction(kind: str, model, params: ParamVector, seed: Optional[int] = None,
                   index: Optional[int] = None, report=None) -> Direction:
    """Filter-normalized random direction, or eigenvector ``index`` (1-based) of ``report``"""
    if getattr(model, 'layout', params.layout) != params.layout:
        raise ConfigurationError("Parameters do not match the model layout")
    if kind == 'random':
        seed = 0 if seed is None else seed
        raw = rng_for('direction', seed, 'sigma').standard_normal(params.layout.n)
        vector, dead = filter_normalize(raw, params)
        return Direction(vector, 'random', seed=seed, dead_filters=dead)
    if kind == 'eigen':
        index = 1 if index is None else index
        if report is None or not 1 <= index <= report.k:
            available = 0 if report is None else report.k
            raise ConfigurationError(f"Eigen direction {index} requested but {available} eigenpairs available")
        return Direction(report.eigenvectors[index - 1], 'eigen', index=index)
    raise ConfigurationError(f"Unknown direction kind '{kind}'; expected one of {DIRECTION_KINDS}")


def make_direction_pair(kind: str, model, params: ParamVector, seed: int = 0, report=None) -> Tuple[Direction, Direction]:
    """Two directions for a 2D slice

    Random: eta is orthogonalized against sigma filter by filter before
    normalization, so sigma . eta vanishes. Eigen: top two eigenvectors.
    """
    if kind == 'eigen':
        return (make_direction('eigen', model, params, index=1, report=report),
                make_direction('eigen', model, params, index=2, report=report))
    sigma = make_direction(kind, model, params, seed=seed)
    raw = rng_for('direction', seed, 'eta').standard_normal(params.layout.n)
    vector, dead = filter_normalize(raw, params, reference=sigma.vector.values)
    return sigma, Direction(vector, 'random', seed=seed, dead_filters=dead)


def steps(nu_min: float, nu_max: float, count: int) -> np.ndarray:
    """nu_min + i (nu_max - nu_min) / (count - 1), exact at both ends"""
    if count < 2:
        raise ConfigurationError(f"Need at least 2 steps, got {count}")
    if not nu_min < nu_max:
        raise ConfigurationError(f"nu_min ({nu_min}) must be below nu_max ({nu_max})")
    i = np.arange(count, dtype=float)
    values = (nu_min * (count - 1 - i) + nu_max * i) / (count - 1)
    values[0], values[-1] = nu_min, nu_max
    return values


@dataclass
class LandscapeGrid:
    """Loss at every (alpha, beta); non-finite cells are NaN and listed in ``flagged``"""
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray
    sigma: Dict[str, object]
    eta: Optional[Dict[str, object]]
    theta_digest: str
    flagged: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def dims(self) -> int:
        return 1 if self.eta is None else 2

    def rows(self) -> List[Dict[str, float]]:
        return [{'alpha': float(a), 'beta': float(b), 'loss': float(self.losses[i, j])}
                for i, a in enumerate(self.alphas) for j, b in enumerate(self.betas)]

    def slice_1d(self) -> np.ndarray:
        return self.losses[:, int(np.argmin(np.abs(self.betas)))]


def scan(model, params: ParamVector, data, sigma: Direction, eta: Optional[Direction] = None,
         nu_min: float = -1.0, nu_max: float = 1.0, count: int = 41, workers: int = 1) -> LandscapeGrid:
    """Evaluate the loss on the (alpha, beta) grid; 1D when ``eta`` is None (beta = 0)"""
    alphas = steps(nu_min, nu_max, count)
    betas = steps(nu_min, nu_max, count) if eta is not None else np.zeros(1)
    theta = params.values
    s = sigma.vector.values
    e = eta.vector.values if eta is not None else np.zeros_like(theta)
    cells = [(i, j) for i in range(len(alphas)) for j in range(len(betas))]

    def cell_loss(cell):
        i, j = cell
        point = params.with_values(theta + alphas[i] * s + betas[j] * e)
        try:
            value = evaluate(model, point, data)
        except NumericError:
            return float('nan')
        return value if np.isfinite(value) else float('nan')

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(cell_loss, cells))
    else:
        values = [cell_loss(c) for c in cells]
    losses = np.array(values).reshape(len(alphas), len(betas))
    flagged = [cell for cell, v in zip(cells, values) if not np.isfinite(v)]
    if flagged:
        logger.warning(f"{len(flagged)} landscape cells produced non-finite losses")
    logger.info(f"Scanned {len(cells)} landscape cells ({sigma.kind} directions)")
    return LandscapeGrid(alphas=alphas, betas=betas, losses=losses, sigma=sigma.describe(),
                         eta=eta.describe() if eta is not None else None,
                         theta_digest=params.digest(), flagged=flagged)
