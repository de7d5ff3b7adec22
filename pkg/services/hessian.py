"""
Hessian spectrum of the training loss

Top eigenpairs by power iteration with deflation, trace by Hutchinson
estimation with Rademacher probes, and a dense Hessian assembled column by
column for small models. Every product goes through ``autodiff.hvp``.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from services.autodiff import Batch, ParamVector, hvp
from services.errors import ConfigurationError, NumericError
from services.seeding import rng_for

logger = logging.getLogger(__name__)

MAX_EIGENPAIRS = 10
DENSE_LIMIT = 512
DEFAULT_BATCH = 256


@dataclass
class HessianReport:
    """Eigenpairs (descending |lambda|), optional trace estimate and provenance"""
    eigenvalues: List[float] = field(default_factory=list)
    eigenvectors: List[ParamVector] = field(default_factory=list)
    iterations: List[int] = field(default_factory=list)
    converged: List[bool] = field(default_factory=list)
    trace: Optional[float] = None
    stderr: Optional[float] = None
    probes: int = 0
    batch_seed: Optional[int] = None
    batch_size: int = 0

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    @property
    def all_converged(self) -> bool:
        return all(self.converged)

    def to_dict(self) -> Dict[str, object]:
        def finite(x):
            return None if x is None or not math.isfinite(x) else float(x)
        return {
            'eigenvalues': [float(v) for v in self.eigenvalues],
            'trace': finite(self.trace),
            'stderr': finite(self.stderr),
            'k': self.k,
            'probes': self.probes,
            'batch_seed': self.batch_seed,
            'batch_size': self.batch_size,
            'iterations': list(self.iterations),
            'converged': list(self.converged),
        }


def evaluation_batch(dataset, size: int = DEFAULT_BATCH, seed: int = 0) -> Batch:
    """Fixed seeded subset of the test split; ids sorted so the batch is order-stable"""
    test = dataset.split('test')
    if len(test) == 0:
        raise ConfigurationError("Test split is empty")
    if size >= len(test):
        return test.as_batch()
    ids = np.sort(rng_for('hessian-batch', seed).choice(len(test), size=size, replace=False))
    return test.subset(ids).as_batch()


def _project_out(x: np.ndarray, basis: List[np.ndarray]) -> np.ndarray:
    for b in basis:
        x = x - np.dot(b, x) * b
    return x


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def _hvp_values(model, params: ParamVector, batch: Batch, v: np.ndarray) -> np.ndarray:
    out = hvp(model, params, batch, ParamVector(v, params.layout)).values
    if not np.all(np.isfinite(out)):
        raise NumericError("Non-finite Hessian-vector product")
    return out


def top_eigenpairs(model, params: ParamVector, batch: Batch, k: int = 1, tol: float = 1e-4,
                   max_iters: int = 100, seed: int = 0) -> HessianReport:
    """Top-k eigenpairs of the loss Hessian by deflated power iteration

    Iteration stops when successive Rayleigh quotients differ by less than
    ``tol`` relative to the current estimate; pairs that hit ``max_iters``
    are kept and flagged as not converged.
    """
    if not 1 <= k <= MAX_EIGENPAIRS:
        raise ConfigurationError(f"k must be in [1, {MAX_EIGENPAIRS}], got {k}")
    n = params.layout.n
    if k > n:
        raise ConfigurationError(f"k={k} exceeds the parameter count {n}")
    if max_iters < 1:
        raise ConfigurationError(f"max_iters must be >= 1, got {max_iters}")

    rng = rng_for('power', seed)
    found: List[np.ndarray] = []
    values, iterations, converged = [], [], []
    for index in range(k):
        v = _project_out(rng.standard_normal(n), found)
        v = v / np.linalg.norm(v)
        previous = None
        done = False
        steps = 0
        for steps in range(1, max_iters + 1):
            hv = _project_out(_hvp_values(model, params, batch, v), found)
            rayleigh = float(np.dot(v, hv))
            norm = np.linalg.norm(hv)
            if norm == 0.0:
                done = True
                break
            v = _project_out(hv / norm, found)
            v = v / np.linalg.norm(v)
            if previous is not None and abs(rayleigh - previous) <= tol * max(abs(rayleigh), 1e-12):
                done = True
                break
            previous = rayleigh
        v = _fix_sign(v)
        eigenvalue = float(np.dot(v, _hvp_values(model, params, batch, v)))
        if not done:
            logger.warning(f"Power iteration for eigenpair {index + 1} did not converge in {max_iters} iterations")
        found.append(v)
        values.append(eigenvalue)
        iterations.append(steps)
        converged.append(done)
        logger.debug(f"eigenpair {index + 1}: lambda={eigenvalue:.6g} after {steps} iterations")

    order = sorted(range(k), key=lambda i: -abs(values[i]))
    return HessianReport(
        eigenvalues=[values[i] for i in order],
        eigenvectors=[ParamVector(found[i], params.layout) for i in order],
        iterations=[iterations[i] for i in order],
        converged=[converged[i] for i in order],
        batch_size=len(batch),
    )


def hutchinson_trace(model, params: ParamVector, batch: Batch, probes: int = 100, seed: int = 0,
                     workers: int = 1) -> Tuple[float, float]:
    """Mean of z^T H z over Rademacher probes and its standard error"""
    if probes < 1:
        raise ConfigurationError(f"probes must be >= 1, got {probes}")
    n = params.layout.n
    bank = rng_for('hutchinson', seed).integers(0, 2, size=(probes, n)) * 2.0 - 1.0

    def quadratic_form(z):
        return float(np.dot(z, _hvp_values(model, params, batch, z)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = np.array(list(pool.map(quadratic_form, bank)))
    else:
        samples = np.array([quadratic_form(z) for z in bank])
    trace = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(probes)) if probes > 1 else float('nan')
    logger.debug(f"Hutchinson trace {trace:.6g} +- {stderr:.3g} over {probes} probes")
    return trace, stderr


def dense_hessian(model, params: ParamVector, batch: Batch, limit: int = DENSE_LIMIT) -> Tuple[np.ndarray, float]:
    """Symmetrized Hessian (column i = H e_i) and the largest asymmetry seen"""
    n = params.layout.n
    if n > limit:
        raise ConfigurationError(f"Dense Hessian refused for {n} parameters (limit {limit})")
    columns = np.empty((n, n))
    for i in range(n):
        basis = np.zeros(n)
        basis[i] = 1.0
        columns[:, i] = _hvp_values(model, params, batch, basis)
    asymmetry = float(np.max(np.abs(columns - columns.T))) if n else 0.0
    return (columns + columns.T) / 2.0, asymmetry


def analyze(model, params: ParamVector, batch: Batch, k: int = 4, probes: int = 100, seed: int = 0,
            batch_seed: Optional[int] = None, tol: float = 1e-4, max_iters: int = 100,
            workers: int = 1) -> HessianReport:
    """Eigenpairs plus trace on one evaluation batch"""
    report = top_eigenpairs(model, params, batch, k=k, tol=tol, max_iters=max_iters, seed=seed)
    report.trace, report.stderr = hutchinson_trace(model, params, batch, probes=probes, seed=seed, workers=workers)
    report.probes = probes
    report.batch_seed = batch_seed
    logger.info(f"Hessian: top eigenvalue {report.eigenvalues[0]:.6g}, trace {report.trace:.6g} "
                f"(k={k}, probes={probes})")
    return report
