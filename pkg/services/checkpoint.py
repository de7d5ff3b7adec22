"""
Self-describing binary checkpoints

Layout: magic ``LLAB``, u16 format version, u32 header length, UTF-8 JSON
header, then one little-endian payload per parameter record. Float records
hold f32 values; quantized weights hold an f32 scale, a u8 bit width and the
i16 codes.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from models import Dataset, ModelGraph, generate_dataset, get_spec
from services.autodiff import ParamVector
from services.errors import CheckpointError, ConfigurationError
from services.quantizer import QuantSpec, dequantize, quantize
from services.reporting import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b'LLAB'
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct('<4sHI')
_QUANT_HEADER = struct.Struct('<fB')


@dataclass
class Checkpoint:
    """Everything needed to rebuild a trained model and its dataset"""
    model_name: str
    params: ParamVector
    quant: Dict[str, QuantSpec] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)
    seed: int = 0
    dataset: Dict[str, object] = field(default_factory=dict)
    variant: str = 'baseline'

    @classmethod
    def from_trained(cls, trained, dataset: Optional[Dataset] = None, variant: str = 'baseline') -> 'Checkpoint':
        """Freeze a TrainedModel; quantized weights are stored as their codes"""
        graph = trained.model
        params = trained.params
        for name, spec in graph.quant.items():
            params = params.replace_segment(name, dequantize(quantize(params.segment(name), spec)))
        return cls(model_name=graph.name, params=params, quant=dict(graph.quant),
                   config=trained.config.to_dict(), seed=trained.config.seed,
                   dataset=dataset.descriptor() if dataset is not None else {}, variant=variant)

    @property
    def bits(self) -> Optional[int]:
        return next(iter(self.quant.values())).bits if self.quant else None

    def graph(self) -> ModelGraph:
        return ModelGraph(get_spec(self.model_name), self.quant)

    def restore_dataset(self) -> Dataset:
        if not self.dataset:
            raise ConfigurationError("Checkpoint carries no dataset descriptor")
        return generate_dataset(self.dataset['task'], int(self.dataset['size']), int(self.dataset['seed']))

    def equals(self, other: 'Checkpoint') -> bool:
        return (self.model_name == other.model_name and self.params.equals(other.params)
                and self.quant == other.quant and self.config == other.config and self.seed == other.seed
                and self.dataset == other.dataset and self.variant == other.variant)


def encode(checkpoint: Checkpoint) -> bytes:
    records = []
    payloads = []
    for seg in checkpoint.params.layout:
        values = checkpoint.params.segment(seg.name)
        spec = checkpoint.quant.get(seg.name)
        if spec is None:
            records.append({'name': seg.name, 'shape': list(seg.shape), 'dtype': 'f32'})
            payloads.append(values.astype('<f4').tobytes())
        else:
            records.append({'name': seg.name, 'shape': list(seg.shape), 'dtype': 'i16'})
            codes = quantize(values, spec).codes
            payloads.append(_QUANT_HEADER.pack(spec.scale, spec.bits) + codes.astype('<i2').tobytes())
    header = json.dumps({
        'model': checkpoint.model_name,
        'variant': checkpoint.variant,
        'seed': checkpoint.seed,
        'config': checkpoint.config,
        'dataset': checkpoint.dataset,
        'records': records,
    }, sort_keys=True).encode('utf-8')
    return _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b''.join(payloads)


def _take(blob: bytes, offset: int, size: int) -> Tuple[bytes, int]:
    if offset + size > len(blob):
        raise CheckpointError("Checkpoint is truncated")
    return blob[offset:offset + size], offset + size


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < _PREAMBLE.size:
        raise CheckpointError("Checkpoint is truncated")
    magic, version, header_len = _PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("Not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format version {version}")
    raw, offset = _take(blob, _PREAMBLE.size, header_len)
    try:
        header = json.loads(raw.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint header: {e}") from e
    missing = {'model', 'variant', 'seed', 'config', 'dataset', 'records'} - set(header)
    if missing:
        raise CheckpointError(f"Checkpoint header lacks {sorted(missing)}")

    try:
        expected = dict(get_spec(header['model']).param_shapes())
    except ConfigurationError as e:
        raise CheckpointError(f"Checkpoint names an unknown model: {e}") from e
    arrays = []
    quant = {}
    for record in header['records']:
        name, shape = record['name'], tuple(record['shape'])
        if expected.get(name) != shape:
            raise CheckpointError(f"Record {name} {shape} does not match model {header['model']}")
        count = int(np.prod(shape, dtype=np.int64))
        if record['dtype'] == 'f32':
            data, offset = _take(blob, offset, 4 * count)
            arrays.append((name, np.frombuffer(data, dtype='<f4').reshape(shape)))
        elif record['dtype'] == 'i16':
            head, offset = _take(blob, offset, _QUANT_HEADER.size)
            scale, bits = _QUANT_HEADER.unpack(head)
            spec = QuantSpec(bits, scale)
            data, offset = _take(blob, offset, 2 * count)
            codes = np.frombuffer(data, dtype='<i2').reshape(shape)
            arrays.append((name, codes.astype(np.float64) * spec.scale))
            quant[name] = spec
        else:
            raise CheckpointError(f"Unknown dtype tag '{record['dtype']}' for {name}")
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after the last record")
    if [name for name, _ in arrays] != list(expected):
        raise CheckpointError(f"Checkpoint records do not cover model {header['model']}")
    return Checkpoint(model_name=header['model'], params=ParamVector.flatten(arrays), quant=quant,
                      config=header['config'], seed=header['seed'], dataset=header['dataset'],
                      variant=header['variant'])


def save(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode(checkpoint))
    logger.info(f"Saved checkpoint {path}")
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    checkpoint = decode(blob)
    logger.debug(f"Loaded checkpoint {path} ({checkpoint.model_name}, bits={checkpoint.bits})")
    return checkpoint
