"""
Linear CKA similarity between output representations
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.corruption import NoiseSpec, corrupt_inputs
from services.errors import ConfigurationError
from services.seeding import rng_for

logger = logging.getLogger(__name__)

DEFAULT_M = 10


@dataclass(frozen=True)
class OutputMatrix:
    """Model outputs on m shared test samples, rows ordered by sample id"""
    values: np.ndarray
    sample_ids: Tuple[int, ...]
    noise: Optional[float] = None

    @property
    def m(self) -> int:
        return int(self.values.shape[0])


@dataclass
class CkaMatrix:
    """Pairwise CKA over model instances; None where undefined"""
    pairwise: List[List[Optional[float]]]
    m: int
    noise: Optional[float] = None

    @property
    def mean_offdiag(self) -> Optional[float]:
        upper = [self.pairwise[i][j] for i in range(len(self.pairwise))
                 for j in range(i + 1, len(self.pairwise))]
        defined = [v for v in upper if v is not None]
        return float(np.mean(defined)) if defined else None

    def to_dict(self) -> Dict[str, object]:
        return {'m': self.m, 'noise': self.noise, 'pairwise': self.pairwise, 'mean_offdiag': self.mean_offdiag}


def _centered_gram(x: np.ndarray) -> np.ndarray:
    gram = x @ x.T
    return gram - gram.mean(axis=0, keepdims=True) - gram.mean(axis=1, keepdims=True) + gram.mean()


def cov(x, y) -> float:
    """(m - 1)^-2 tr(X X^T H Y Y^T H) with H the centering matrix"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ConfigurationError(f"Sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    m = x.shape[0]
    if m < 2:
        raise ConfigurationError(f"Need at least 2 samples, got {m}")
    # tr(K H L H) = sum(HKH * L) since H is symmetric and idempotent
    return float(np.sum(_centered_gram(x) * (y @ y.T))) / (m - 1) ** 2


def _is_constant(x: np.ndarray, eps: float) -> bool:
    x = x.reshape(x.shape[0], -1)
    spread = np.abs(x - x.mean(axis=0)).max(initial=0.0)
    return spread <= eps * max(np.abs(x).max(initial=0.0), np.finfo(float).tiny)


def cka(f, g, eps: float = 1e-12) -> Optional[float]:
    """cov(F, G) / sqrt(cov(F, F) cov(G, G)); None when either matrix has constant rows"""
    f = f.values if isinstance(f, OutputMatrix) else np.asarray(f, dtype=float)
    g = g.values if isinstance(g, OutputMatrix) else np.asarray(g, dtype=float)
    if f.shape[0] != g.shape[0]:
        raise ConfigurationError(f"Output matrices have different m: {f.shape[0]} vs {g.shape[0]}")
    if _is_constant(f, eps) or _is_constant(g, eps):
        return None
    return cov(f, g) / np.sqrt(cov(f, f) * cov(g, g))


def sample_ids(dataset, m: int, seed: int = 0) -> Tuple[int, ...]:
    """m distinct test-split ids, sorted"""
    n = len(dataset.split('test'))
    if not 2 <= m <= n:
        raise ConfigurationError(f"m must be in [2, {n}], got {m}")
    return tuple(int(i) for i in np.sort(rng_for('cka', seed).choice(n, size=m, replace=False)))


def output_matrix(model, params, dataset, ids: Sequence[int], noise: Optional[float] = None,
                  noise_seed: int = 0) -> OutputMatrix:
    """F = [f(x_1) ... f(x_m)]^T on the chosen test samples, optionally noise-perturbed"""
    subset = dataset.split('test').subset(list(ids))
    if noise:
        subset = corrupt_inputs(subset, NoiseSpec('gaussian', noise, noise_seed))
    values = model.predict(params, subset.inputs)
    return OutputMatrix(values.reshape(len(ids), -1), tuple(ids), noise)


def pairwise(outputs: Sequence[OutputMatrix]) -> List[List[Optional[float]]]:
    count = len(outputs)
    table: List[List[Optional[float]]] = [[None] * count for _ in range(count)]
    for i in range(count):
        for j in range(i, count):
            value = cka(outputs[i], outputs[j])
            if value is not None and i == j:
                value = 1.0
            table[i][j] = table[j][i] = value
    undefined = sum(v is None for row in table for v in row)
    if undefined:
        logger.warning(f"{undefined} CKA entries undefined (constant outputs)")
    return table


def cka_grid(models: Sequence[Tuple[object, object]], dataset, m: int = DEFAULT_M, noise: Optional[float] = None,
             seed: int = 0, workers: int = 1) -> CkaMatrix:
    """Pairwise CKA over (graph, params) instances on one shared sample set"""
    if len(models) < 2:
        raise ConfigurationError(f"CKA needs at least 2 models, got {len(models)}")
    ids = sample_ids(dataset, m, seed)

    def collect(entry):
        graph, params = entry
        return output_matrix(graph, params, dataset, ids, noise, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(collect, models))
    else:
        outputs = [collect(entry) for entry in models]
    result = CkaMatrix(pairwise(outputs), m, noise)
    logger.info(f"CKA over {len(models)} models (m={m}, noise={noise}): mean {result.mean_offdiag}")
    return result


def cka_m_sweep(models, dataset, m_values: Sequence[int], seed: int = 0) -> List[CkaMatrix]:
    return [cka_grid(models, dataset, m=m, seed=seed) for m in m_values]


def cka_noise_sweep(models, dataset, sigmas: Sequence[float], m: int = DEFAULT_M, seed: int = 0) -> List[CkaMatrix]:
    return [cka_grid(models, dataset, m=m, noise=float(s) or None, seed=seed) for s in sigmas]
