"""
Reverse-mode automatic differentiation over dense numpy tensors

Every backward rule is written with the same recorded primitives, so a
gradient taken with ``create_graph=True`` is itself differentiable. That is
how Hessian-vector products and the Jacobian penalty are obtained: one tape
mechanism serves first and second order.
"""
import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from services.errors import ConfigurationError, NumericError, StateError, UnsupportedOpError

logger = logging.getLogger(__name__)

DTYPE = np.float64


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """Named slice of a flat parameter vector"""
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class Layout:
    """Ordered, contiguous description of how segments map to layers"""
    segments: Tuple[Segment, ...]

    def __post_init__(self):
        offset = 0
        seen = set()
        for seg in self.segments:
            if seg.offset != offset:
                raise ConfigurationError(f"Segment {seg.name} starts at {seg.offset}, expected {offset}")
            if seg.name in seen:
                raise ConfigurationError(f"Duplicate segment name {seg.name}")
            seen.add(seg.name)
            offset = seg.stop

    @classmethod
    def from_shapes(cls, shapes: Iterable[Tuple[str, Sequence[int]]]) -> 'Layout':
        segments = []
        offset = 0
        for name, shape in shapes:
            seg = Segment(name, tuple(int(s) for s in shape), offset)
            segments.append(seg)
            offset = seg.stop
        return cls(tuple(segments))

    @property
    def n(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @property
    def names(self) -> List[str]:
        return [seg.name for seg in self.segments]

    def get(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise ConfigurationError(f"Unknown parameter segment: {name}")

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)


class ParamVector:
    """Flat view of all trainable parameters of a model"""

    def __init__(self, values, layout: Layout):
        values = np.array(values, dtype=DTYPE).reshape(-1)
        if values.size != layout.n:
            raise ConfigurationError(f"Parameter vector has {values.size} entries, layout expects {layout.n}")
        values.setflags(write=False)
        self.values = values
        self.layout = layout

    @classmethod
    def flatten(cls, arrays: Sequence[Tuple[str, np.ndarray]]) -> 'ParamVector':
        """Concatenate named arrays into one vector"""
        arrays = [(name, np.asarray(a, dtype=DTYPE)) for name, a in arrays]
        layout = Layout.from_shapes((name, a.shape) for name, a in arrays)
        if not arrays:
            return cls(np.zeros(0), layout)
        return cls(np.concatenate([a.reshape(-1) for _, a in arrays]), layout)

    def unflatten(self) -> Dict[str, np.ndarray]:
        """Per-segment arrays in layout order"""
        return {seg.name: self.segment(seg.name) for seg in self.layout}

    def segment(self, name: str) -> np.ndarray:
        seg = self.layout.get(name)
        return self.values[seg.offset:seg.stop].reshape(seg.shape)

    def with_values(self, values) -> 'ParamVector':
        return ParamVector(values, self.layout)

    def replace_segment(self, name: str, array) -> 'ParamVector':
        seg = self.layout.get(name)
        values = self.values.copy()
        values[seg.offset:seg.stop] = np.asarray(array, dtype=DTYPE).reshape(-1)
        return ParamVector(values, self.layout)

    @classmethod
    def zeros_like(cls, other: 'ParamVector') -> 'ParamVector':
        return cls(np.zeros(other.layout.n), other.layout)

    def _check(self, other: 'ParamVector'):
        if other.layout != self.layout:
            raise ConfigurationError("Parameter vectors have different layouts")

    def __len__(self):
        return self.layout.n

    def __add__(self, other: 'ParamVector') -> 'ParamVector':
        self._check(other)
        return ParamVector(self.values + other.values, self.layout)

    def __sub__(self, other: 'ParamVector') -> 'ParamVector':
        self._check(other)
        return ParamVector(self.values - other.values, self.layout)

    def __mul__(self, scalar: float) -> 'ParamVector':
        return ParamVector(self.values * float(scalar), self.layout)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> 'ParamVector':
        return ParamVector(self.values / float(scalar), self.layout)

    def __neg__(self) -> 'ParamVector':
        return ParamVector(-self.values, self.layout)

    def dot(self, other: 'ParamVector') -> float:
        self._check(other)
        return float(np.dot(self.values, other.values))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def normalized(self) -> 'ParamVector':
        norm = self.norm()
        if norm == 0.0:
            raise NumericError("Cannot normalize a zero parameter vector")
        return self / norm

    def equals(self, other: 'ParamVector') -> bool:
        """Bit-exact equality of values and layout"""
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def digest(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def to_float32(self) -> 'ParamVector':
        """Round to the nearest float32-representable values (storage precision)"""
        return ParamVector(self.values.astype(np.float32).astype(DTYPE), self.layout)

    def __repr__(self):
        return f'<ParamVector n={self.layout.n} segments={self.layout.names}>'


# ---------------------------------------------------------------------------
# Tape and tensors
# ---------------------------------------------------------------------------

class Tensor:
    """Immutable value recorded on a tape"""

    __slots__ = ('tape', 'node_id', 'data', 'op', 'parents', 'vjp', 'recompute',
                 'requires_grad', 'second_order', 'name')

    def __init__(self, tape, node_id, data, op, parents=(), vjp=None, recompute=None,
                 requires_grad=False, second_order=True, name=None):
        data = np.array(data, dtype=DTYPE)
        data.setflags(write=False)
        self.tape = tape
        self.node_id = node_id
        self.data = data
        self.op = op
        self.parents = tuple(parents)
        self.vjp = vjp
        self.recompute = recompute
        self.requires_grad = requires_grad
        self.second_order = second_order
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f'<Tensor #{self.node_id} op={self.op} shape={self.shape}>'


class Tape:
    """Ordered record of primitive ops; inputs always precede consumers"""

    def __init__(self):
        self.nodes: List[Tensor] = []
        self.recording = True
        self.released = False
        # filled by forward()
        self.loss: Optional[Tensor] = None
        self.outputs: Optional[Tensor] = None
        self.inputs: Optional[Tensor] = None
        self.segments: Dict[str, Tensor] = {}
        self.layout: Optional[Layout] = None

    def _append(self, tensor: Tensor) -> Tensor:
        tensor.node_id = len(self.nodes)
        self.nodes.append(tensor)
        return tensor

    def leaf(self, array, name=None, requires_grad=True) -> Tensor:
        return self._append(Tensor(self, -1, array, 'leaf', requires_grad=requires_grad, name=name))

    def constant(self, array) -> Tensor:
        tensor = Tensor(self, -1, array, 'const')
        if self.recording:
            self._append(tensor)
        return tensor

    def record(self, op: str, data, parents: Sequence[Tensor], vjp: Optional[Callable],
               recompute: Optional[Callable] = None, second_order: bool = True) -> Tensor:
        """Append the result of a primitive; detached when the tape is not recording"""
        data = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(data)):
            op_id = len(self.nodes)
            raise NumericError(f"Non-finite output from op '{op}' (op id {op_id})", op_id=op_id)
        if not self.recording:
            return Tensor(self, -1, data, op)
        requires_grad = any(p.requires_grad for p in parents)
        tensor = Tensor(self, -1, data, op, parents, vjp if requires_grad else None, recompute,
                        requires_grad=requires_grad, second_order=second_order)
        return self._append(tensor)

    def backward(self, output: Tensor, wrt: Sequence[Tensor], grad_output=None,
                 create_graph: bool = False, retain_graph: Optional[bool] = None) -> List[Tensor]:
        """Adjoints of ``output`` with respect to each tensor in ``wrt``

        With ``create_graph`` the adjoints are recorded on this tape and can
        be differentiated again. Without ``retain_graph`` the tape is
        released afterwards and further backward passes are refused.
        """
        if self.released:
            raise StateError("Tape already consumed by a backward pass that released its graph")
        if output.tape is not self or output.node_id < 0:
            raise ConfigurationError("Output tensor is not recorded on this tape")
        retain = create_graph if retain_graph is None else retain_graph
        for t in wrt:
            if not t.requires_grad:
                raise ConfigurationError(f"Tensor #{t.node_id} ({t.name or t.op}) does not require gradients")

        wrt_ids = {t.node_id for t in wrt}
        prefix = self.nodes[:output.node_id + 1]
        depends = set(wrt_ids)
        for node in prefix:
            if node.node_id not in depends and any(p.node_id in depends for p in node.parents):
                depends.add(node.node_id)

        results: Dict[int, Tensor] = {}
        previous = self.recording
        self.recording = create_graph
        try:
            if output.node_id in depends:
                seed = np.ones(output.shape) if grad_output is None else grad_output
                adjoints = {output.node_id: _as_tensor(seed, self)}
                for node in reversed(prefix):
                    g = adjoints.pop(node.node_id, None)
                    if g is None:
                        continue
                    if node.node_id in wrt_ids:
                        results[node.node_id] = g
                    if not node.parents:
                        continue
                    if node.vjp is None:
                        raise UnsupportedOpError(f"Op '{node.op}' (op id {node.node_id}) has no derivative rule")
                    if create_graph and not node.second_order:
                        raise UnsupportedOpError(
                            f"Op '{node.op}' (op id {node.node_id}) has no second-order rule")
                    for parent, pg in zip(node.parents, node.vjp(g, node)):
                        if pg is None or parent.node_id not in depends:
                            continue
                        acc = adjoints.get(parent.node_id)
                        adjoints[parent.node_id] = pg if acc is None else add(acc, pg)
        finally:
            self.recording = previous
        if not retain:
            self.released = True
        return [results[t.node_id] if t.node_id in results else self.constant(np.zeros(t.shape))
                for t in wrt]

    def replay(self) -> List[int]:
        """Recompute every recorded op from its parents; ids of mismatching nodes"""
        mismatches = []
        for node in self.nodes:
            if node.recompute is None or not node.parents:
                continue
            value = node.recompute(*[p.data for p in node.parents])
            if not np.array_equal(np.asarray(value, dtype=DTYPE), node.data):
                mismatches.append(node.node_id)
        return mismatches


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise ConfigurationError("At least one operand must be a Tensor")


def _as_tensor(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.constant(np.asarray(x, dtype=DTYPE))


def _reduce_to(data: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    shape = tuple(shape)
    lead = data.ndim - len(shape)
    out = data.sum(axis=tuple(range(lead))) if lead > 0 else data
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)

    def vjp(g, out):
        return [sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None]
    return tape.record('add', a.data + b.data, (a, b), vjp, np.add)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g, out):
        return [scale(g, c)]
    return x.tape.record('scale', x.data * c, (x,), vjp, lambda v: v * c)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    return add(_as_tensor(a, tape), scale(_as_tensor(b, tape), -1.0))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)

    def vjp(g, out):
        return [sum_to(mul(g, b), a.shape) if a.requires_grad else None,
                sum_to(mul(g, a), b.shape) if b.requires_grad else None]
    return tape.record('mul', a.data * b.data, (a, b), vjp, np.multiply)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g, out):
        return [matmul(g, transpose(b)) if a.requires_grad else None,
                matmul(transpose(a), g) if b.requires_grad else None]
    return tape.record('matmul', a.data @ b.data, (a, b), vjp, np.matmul)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g, out):
        return [permute(g, inverse)]
    return x.tape.record('permute', np.transpose(x.data, axes), (x,), vjp, lambda v: np.transpose(v, axes))


def transpose(x: Tensor) -> Tensor:
    return permute(x, (1, 0))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ConfigurationError(f"Cannot reshape {x.shape} to {shape}")
    source = x.shape

    def vjp(g, out):
        return [reshape(g, source)]
    return x.tape.record('reshape', x.data.reshape(shape), (x,), vjp, lambda v: v.reshape(shape))


def sum_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Sum over broadcast axes so the result has ``shape``"""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    source = x.shape

    def vjp(g, out):
        return [broadcast_to(g, source)]
    return x.tape.record('sum_to', _reduce_to(x.data, shape), (x,), vjp, lambda v: _reduce_to(v, shape))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    source = x.shape

    def vjp(g, out):
        return [sum_to(g, source)]
    return x.tape.record('broadcast_to', np.broadcast_to(x.data, shape).copy(), (x,), vjp,
                         lambda v: np.broadcast_to(v, shape).copy())


def total(x: Tensor) -> Tensor:
    return sum_to(x, ())


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.size)


def relu(x: Tensor) -> Tensor:
    # second derivative is 0 everywhere, the mask is a constant
    def vjp(g, out):
        return [mul(g, g.tape.constant((x.data > 0).astype(DTYPE)))]
    return x.tape.record('relu', np.maximum(x.data, 0.0), (x,), vjp, lambda v: np.maximum(v, 0.0))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    def vjp(g, out):
        return [mul(g, mul(out, sub(1.0, out)))]
    return x.tape.record('sigmoid', _sigmoid(x.data), (x,), vjp, _sigmoid)


def sqrt(x: Tensor) -> Tensor:
    """First-order only; the derivative is taken as 0 where the output is 0"""
    def vjp(g, out):
        safe = np.divide(0.5, out.data, out=np.zeros_like(out.data), where=out.data > 0)
        return [mul(g, g.tape.constant(safe))]
    return x.tape.record('sqrt', np.sqrt(x.data), (x,), vjp, np.sqrt, second_order=False)


def _im2col(v: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    n, c = v.shape[:2]
    padded = np.pad(v, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else v
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    ho, wo = windows.shape[2], windows.shape[3]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, image_shape, kh: int, kw: int, pad: int) -> np.ndarray:
    n, c, h, w = image_shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + ho, j:j + wo] += blocks[..., i, j]
    return padded[:, :, pad:pad + h, pad:pad + w]


def im2col(x: Tensor, kh: int, kw: int, pad: int = 0) -> Tensor:
    """(N, C, H, W) -> (N*Ho*Wo, C*kh*kw) patch matrix, stride 1"""
    image_shape = x.shape

    def vjp(g, out):
        return [col2im(g, image_shape, kh, kw, pad)]
    return x.tape.record('im2col', _im2col(x.data, kh, kw, pad), (x,), vjp,
                         lambda v: _im2col(v, kh, kw, pad))


def col2im(cols: Tensor, image_shape, kh: int, kw: int, pad: int = 0) -> Tensor:
    """Adjoint of im2col: scatter-add patches back to the image"""
    image_shape = tuple(image_shape)

    def vjp(g, out):
        return [im2col(g, kh, kw, pad)]
    return cols.tape.record('col2im', _col2im(cols.data, image_shape, kh, kw, pad), (cols,), vjp,
                            lambda v: _col2im(v, image_shape, kh, kw, pad))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x (N, in), w (out, in), b (out,)"""
    y = matmul(x, transpose(w))
    return add(y, b) if b is not None else y


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, pad: int = 0) -> Tensor:
    """Stride-1 convolution with zero padding; x (N, C, H, W), w (O, C, kh, kw)"""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ConfigurationError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    n, _, h, width = x.shape
    out_ch, in_ch, kh, kw = w.shape
    ho, wo = h + 2 * pad - kh + 1, width + 2 * pad - kw + 1
    cols = im2col(x, kh, kw, pad)
    y = matmul(cols, transpose(reshape(w, (out_ch, in_ch * kh * kw))))
    if b is not None:
        y = add(y, b)
    return permute(reshape(y, (n, ho, wo, out_ch)), (0, 3, 1, 2))


def mse(prediction: Tensor, target) -> Tensor:
    diff = sub(prediction, target)
    return mean(mul(diff, diff))


# ---------------------------------------------------------------------------
# Model-level operations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    """Inputs and targets of one evaluation batch"""
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return int(self.inputs.shape[0])


def forward(model, params: ParamVector, batch: Batch, track_inputs: bool = False) -> Tuple[float, Tape]:
    """Evaluate the model loss and return it with a tape for backward passes

    ``model`` is anything exposing ``layout`` and
    ``build(segments, inputs, targets) -> (loss, outputs)``.
    """
    if params.layout != model.layout:
        raise ConfigurationError(
            f"Parameter layout does not match the model ({len(params)} vs {model.layout.n} entries)")
    tape = Tape()
    tape.layout = params.layout
    tape.segments = {seg.name: tape.leaf(params.segment(seg.name), name=seg.name) for seg in params.layout}
    tape.inputs = tape.leaf(batch.inputs, name='inputs', requires_grad=track_inputs)
    targets = tape.constant(batch.targets)
    loss, outputs = model.build(tape.segments, tape.inputs, targets)
    if loss.shape != ():
        raise ConfigurationError(f"Loss must be a scalar, got shape {loss.shape}")
    tape.loss = loss
    tape.outputs = outputs
    return loss.item(), tape


def _flatten_adjoints(tape: Tape, adjoints: Sequence[Tensor]) -> ParamVector:
    return ParamVector(np.concatenate([g.data.reshape(-1) for g in adjoints]) if adjoints else np.zeros(0),
                       tape.layout)


def gradient(tape: Tape, retain_graph: bool = False) -> ParamVector:
    """Gradient of the recorded loss with respect to the parameters"""
    if tape.loss is None:
        raise StateError("Tape holds no scalar loss")
    leaves = [tape.segments[seg.name] for seg in tape.layout]
    return _flatten_adjoints(tape, tape.backward(tape.loss, leaves, retain_graph=retain_graph))


def hvp(model, params: ParamVector, batch: Batch, v: ParamVector) -> ParamVector:
    """Hessian-vector product by differentiating the scalar g·v"""
    if v.layout != params.layout:
        raise ConfigurationError("Direction layout does not match the parameters")
    _, tape = forward(model, params, batch)
    leaves = [tape.segments[seg.name] for seg in tape.layout]
    grads = tape.backward(tape.loss, leaves, create_graph=True)
    dot = None
    for g, seg in zip(grads, tape.layout):
        term = total(mul(g, tape.constant(v.segment(seg.name))))
        dot = term if dot is None else add(dot, term)
    return _flatten_adjoints(tape, tape.backward(dot, leaves))


def input_gradient(tape: Tape, projection, create_graph: bool = False) -> Tensor:
    """Gradient of sum_b v·f(x_b) with respect to the inputs x

    ``projection`` is a single vector of length d_out or one row per sample.
    The tape is retained so several projections can share it.
    """
    if tape.outputs is None or tape.inputs is None or not tape.inputs.requires_grad:
        raise ConfigurationError("Input gradients need a forward pass with track_inputs=True")
    outputs = tape.outputs
    projection = np.asarray(projection, dtype=DTYPE)
    if projection.shape[-1] != outputs.shape[-1] or projection.ndim > outputs.data.ndim:
        raise ConfigurationError(
            f"Projection of length {projection.shape[-1]} does not match output dimension {outputs.shape[-1]}")
    projected = total(mul(outputs, tape.constant(np.broadcast_to(projection, outputs.shape))))
    (grad,) = tape.backward(projected, [tape.inputs], create_graph=create_graph, retain_graph=True)
    return grad
