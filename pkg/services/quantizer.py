"""
Uniform integer fake-quantization of weights

Per-tensor symmetric scale, signed codes in [-2^(b-1), 2^(b-1)-1], round
half to even. ``fake_quant_forward`` records a tape op whose backward is the
clipped straight-through estimator.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from services.autodiff import DTYPE, Tensor, mul
from services.errors import ConfigurationError

logger = logging.getLogger(__name__)

MIN_BITS = 3
MAX_BITS = 12


@dataclass(frozen=True)
class QuantSpec:
    """Bit width and per-tensor scale"""
    bits: int
    scale: float

    def __post_init__(self):
        if not MIN_BITS <= int(self.bits) <= MAX_BITS:
            raise ConfigurationError(f"Bit width {self.bits} outside [{MIN_BITS}, {MAX_BITS}]")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ConfigurationError(f"Quantization scale must be positive, got {self.scale}")
        object.__setattr__(self, 'bits', int(self.bits))
        object.__setattr__(self, 'scale', float(np.float32(self.scale)))

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes of one weight tensor together with their spec"""
    codes: np.ndarray
    spec: QuantSpec

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def calibrate(weights, bits: int) -> QuantSpec:
    """Scale mapping max |w| onto the largest positive code"""
    weights = np.asarray(weights, dtype=DTYPE)
    if weights.size == 0:
        raise ConfigurationError("Cannot calibrate an empty tensor")
    peak = float(np.max(np.abs(weights)))
    if peak == 0.0:
        return QuantSpec(bits, 1.0)
    return QuantSpec(bits, peak / ((1 << (bits - 1)) - 1))


def quantize(weights, spec: QuantSpec) -> QuantizedTensor:
    weights = np.asarray(weights, dtype=DTYPE)
    codes = np.clip(np.rint(weights / spec.scale), spec.qmin, spec.qmax).astype(np.int16)
    return QuantizedTensor(codes, spec)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.codes.astype(DTYPE) * q.spec.scale


def fake_quant_values(weights, spec: QuantSpec) -> np.ndarray:
    return dequantize(quantize(weights, spec))


def ste_mask(weights, spec: QuantSpec) -> np.ndarray:
    """1 where the straight-through gradient passes, 0 where the value clamps"""
    weights = np.asarray(weights, dtype=DTYPE)
    return (np.abs(weights / spec.scale) <= spec.qmax).astype(DTYPE)


def fake_quant_forward(w: Tensor, spec: QuantSpec) -> Tensor:
    """dequantize(quantize(w)) with clipped straight-through backward"""
    def vjp(g, out):
        return [mul(g, g.tape.constant(ste_mask(w.data, spec)))]
    return w.tape.record('fake_quant', fake_quant_values(w.data, spec), (w,), vjp,
                         lambda v: fake_quant_values(v, spec))


def calibrate_all(segments: Dict[str, np.ndarray], names, bits: int) -> Dict[str, QuantSpec]:
    """Fresh specs for the named weight segments"""
    specs = {name: calibrate(segments[name], bits) for name in names}
    logger.debug(f"Calibrated {len(specs)} tensors at {bits} bits")
    return specs
