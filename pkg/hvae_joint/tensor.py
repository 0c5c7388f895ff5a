"""
Dense float64 tensors with a recorded reverse-mode gradient engine.

Operations on tensors that require gradients are appended to the active
ComputationRecord of the current thread. ``backward`` walks the record once
in reverse and consumes it. ``grad`` with ``create_graph=True`` records the
adjoint computation itself, which is what lets the Hamiltonian integrator
differentiate through its own potential-energy gradients.

All backward rules are written with Tensor operations, never raw arrays of
differentiable inputs, so a recorded adjoint is itself differentiable.
"""

import logging
import threading
from contextlib import contextmanager, nullcontext
from functools import lru_cache
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from hvae_joint import settings
from hvae_joint.errors import GraphError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

Scalar = Union[int, float]

ELEMENTWISE_KINDS = ('add', 'sub', 'mul', 'div', 'pow', 'min', 'max')
ACTIVATION_KINDS = ('relu', 'leaky_relu', 'sigmoid', 'tanh', 'exp', 'log', 'softplus')

_local = threading.local()
_strict_finite = settings.STRICT_FINITE


def set_strict_finite(enabled: bool) -> None:
    """Turn the global strict-finite check on or off."""
    global _strict_finite
    _strict_finite = bool(enabled)


def strict_finite_enabled() -> bool:
    return _strict_finite


@contextmanager
def strict_finite(enabled: bool = True) -> Iterator[None]:
    """Temporarily set the strict-finite toggle."""
    previous = _strict_finite
    set_strict_finite(enabled)
    try:
        yield
    finally:
        set_strict_finite(previous)


def _stack() -> list:
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def current_record() -> Optional['ComputationRecord']:
    """Active record of this thread, or None when nothing is being recorded."""
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_record() -> Iterator[None]:
    """Evaluate without recording, even inside an active record."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """
    Immutable dense float64 array.

    ``node_id`` is the index of the record entry that produced the tensor, or
    None for leaves and for tensors computed outside a record.
    """

    __slots__ = ('data', 'requires_grad', 'node_id', '_record')
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._record: Optional['ComputationRecord'] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> 'Tensor':
        tensor = cls.__new__(cls)
        array = np.asarray(array, dtype=np.float64)
        if array.flags.writeable:
            array.setflags(write=False)
        tensor.data = array
        tensor.requires_grad = False
        tensor.node_id = None
        tensor._record = None
        return tensor

    # -- metadata ---------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return np.array(self.data)

    def detach(self) -> 'Tensor':
        """Same values, cut from the record."""
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={list(self.shape)}{flag})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return elementwise('add', self, other)

    def __radd__(self, other):
        return elementwise('add', other, self)

    def __sub__(self, other):
        return elementwise('sub', self, other)

    def __rsub__(self, other):
        return elementwise('sub', other, self)

    def __mul__(self, other):
        return elementwise('mul', self, other)

    def __rmul__(self, other):
        return elementwise('mul', other, self)

    def __truediv__(self, other):
        return elementwise('div', self, other)

    def __rtruediv__(self, other):
        return elementwise('div', other, self)

    def __pow__(self, other):
        return elementwise('pow', self, other)

    def __neg__(self):
        return _apply(_Unary('neg'), self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- methods ----------------------------------------------------------

    def exp(self) -> 'Tensor':
        return activation('exp', self)

    def log(self) -> 'Tensor':
        return activation('log', self)

    def tanh(self) -> 'Tensor':
        return activation('tanh', self)

    def sigmoid(self) -> 'Tensor':
        return activation('sigmoid', self)

    def relu(self) -> 'Tensor':
        return activation('relu', self)

    def leaky_relu(self, slope: float = settings.LEAKY_SLOPE) -> 'Tensor':
        return _apply(_Unary('leaky_relu', slope=slope), self)

    def softplus(self) -> 'Tensor':
        return activation('softplus', self)

    def sum(self, axes=None, keepdims: bool = False) -> 'Tensor':
        return reduce('sum', self, axes, keepdims=keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> 'Tensor':
        return reduce('mean', self, axes, keepdims=keepdims)

    def reshape(self, shape: Sequence[int]) -> 'Tensor':
        shape = tuple(int(s) for s in shape)
        if shape == self.shape:
            return self
        return _apply(_Reshape(shape), self)

    def flatten(self) -> 'Tensor':
        return self.reshape((self.size,))

    def transpose(self, axes: Optional[Sequence[int]] = None) -> 'Tensor':
        axes = tuple(reversed(range(self.ndim))) if axes is None else tuple(axes)
        return _apply(_Permute(axes), self)

    @property
    def T(self) -> 'Tensor':
        return self.transpose()

    def take(self, index: np.ndarray) -> 'Tensor':
        """Gather from the flattened tensor; index == size yields 0."""
        return _apply(_Take(np.asarray(index, dtype=np.intp), self.size), self)

    def broadcast_to(self, shape: Sequence[int]) -> 'Tensor':
        shape = tuple(int(s) for s in shape)
        if shape == self.shape:
            return self
        return self.take(_broadcast_index(self.shape, shape))


class _Entry:
    __slots__ = ('op', 'inputs', 'output')

    def __init__(self, op: '_Op', inputs: Tuple[Tensor, ...], output: Tensor):
        self.op = op
        self.inputs = inputs
        self.output = output


class ComputationRecord:
    """
    Ordered list of recorded primitive operations (a tape).

    Use as a context manager to make it the active record of the thread.
    Entries are appended in evaluation order, so every operand precedes its
    result. A record is confined to the thread that created it.
    """

    def __init__(self):
        self.entries: List[_Entry] = []
        self.consumed = False

    def __enter__(self) -> 'ComputationRecord':
        if self.consumed:
            raise GraphError("Computation record was already consumed by backward()")
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def _append(self, op: '_Op', inputs: Tuple[Tensor, ...], output: Tensor) -> None:
        if self.consumed:
            raise GraphError("Cannot record into a consumed computation record")
        output.node_id = len(self.entries)
        output._record = self
        self.entries.append(_Entry(op, inputs, output))

    def _reverse(self, output: Tensor, create_graph: bool, stop: int,
                 keep: Iterable[int] = (),
                 relevant: Optional[set] = None) -> Tuple[Dict[int, Tensor], Dict[int, Tensor]]:
        """
        Accumulate adjoints from ``output`` back to entry index ``stop``.

        Adjoints of tensors in ``keep`` survive the pass. When ``relevant`` is
        given, adjoints are only propagated into tensors whose ids it holds.
        """
        keep = set(keep)
        adjoints: Dict[int, Tensor] = {id(output): Tensor._wrap(np.ones(output.shape))}
        tensors: Dict[int, Tensor] = {id(output): output}
        if output._record is not self or output.node_id is None:
            return adjoints, tensors

        context = nullcontext() if create_graph else no_record()
        with context:
            for index in range(output.node_id, stop - 1, -1):
                entry = self.entries[index]
                key = id(entry.output)
                grad_out = adjoints.get(key) if key in keep else adjoints.pop(key, None)
                if grad_out is None:
                    continue
                needs = tuple(t.requires_grad and (relevant is None or id(t) in relevant)
                              for t in entry.inputs)
                if not any(needs):
                    continue
                input_grads = entry.op.backward(grad_out, entry.inputs, entry.output, needs)
                for tensor, grad_in, needed in zip(entry.inputs, input_grads, needs):
                    if grad_in is None or not needed:
                        continue
                    tkey = id(tensor)
                    tensors[tkey] = tensor
                    adjoints[tkey] = grad_in if tkey not in adjoints else adjoints[tkey] + grad_in
        return adjoints, tensors


class Gradients:
    """Gradient map returned by ``backward``; missing entries read as zeros."""

    def __init__(self, grads: Dict[int, Tensor], tensors: Dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> Tensor:
        grad = self._grads.get(id(tensor))
        if grad is None or self._tensors.get(id(tensor)) is not tensor:
            return Tensor._wrap(np.zeros(tensor.shape))
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return self._tensors.get(id(tensor)) is tensor

    def __len__(self) -> int:
        return len(self._grads)


def backward(output: Tensor, record: Optional[ComputationRecord] = None) -> Gradients:
    """
    Reverse pass from a scalar output over a computation record.

    Args:
        output: Scalar tensor
        record: Record to consume (defaults to the one that produced output,
            then the active record)

    Returns:
        Gradients for every requires_grad leaf reached from output

    Raises:
        GraphError: Non-scalar output, no record, or record already consumed
    """
    if output.size != 1:
        raise GraphError(f"backward() needs a scalar output, got shape {list(output.shape)}")
    if record is None:
        record = output._record if output._record is not None else current_record()
    if record is None:
        raise GraphError("backward() called with no active computation record")
    if record.consumed:
        raise GraphError("backward() called twice on the same computation record")

    adjoints, tensors = record._reverse(output, create_graph=False, stop=0)
    record.consumed = True

    leaves = {key: grad for key, grad in adjoints.items()
              if tensors[key]._record is not record and tensors[key].requires_grad}
    return Gradients(leaves, tensors)


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> List[Tensor]:
    """
    Gradients of a scalar output with respect to selected tensors.

    The record is not consumed. With ``create_graph`` the adjoint operations
    are recorded, so the returned gradients are differentiable. Only entries
    downstream of ``inputs`` are differentiated.
    """
    if output.size != 1:
        raise GraphError(f"grad() needs a scalar output, got shape {list(output.shape)}")
    record = output._record
    if record is None:
        return [Tensor._wrap(np.zeros(t.shape)) for t in inputs]
    if record.consumed:
        raise GraphError("grad() called on a consumed computation record")

    stop = 0
    keep = [id(t) for t in inputs]
    produced = [t.node_id for t in inputs if t._record is record and t.node_id is not None]
    if len(produced) == len(inputs) and produced:
        stop = min(produced) + 1

    relevant = set(keep)
    for entry in record.entries[stop:output.node_id + 1]:
        if any(id(t) in relevant for t in entry.inputs):
            relevant.add(id(entry.output))

    adjoints, _ = record._reverse(output, create_graph=create_graph, stop=stop,
                                  keep=keep, relevant=relevant)
    return [adjoints.get(id(t), Tensor._wrap(np.zeros(t.shape))) for t in inputs]


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

class _Op:
    name = 'op'

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor, inputs: Tuple[Tensor, ...], output: Tensor,
                 needs: Tuple[bool, ...]) -> Sequence[Optional[Tensor]]:
        raise NotImplementedError


def _apply(op: _Op, *inputs: Tensor) -> Tensor:
    out = op.forward(*(t.data for t in inputs))
    if _strict_finite and not np.all(np.isfinite(out)):
        raise NumericalError(f"{op.name} produced non-finite values (shape {list(np.shape(out))})")
    result = Tensor._wrap(out)
    record = current_record()
    if record is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        record._append(op, inputs, result)
    return result


def _constant(value: Union[Tensor, Scalar, np.ndarray]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float, np.integer, np.floating)):
        return Tensor._wrap(np.array(float(value)))
    raise TypeError(f"Expected Tensor or scalar, got {type(value).__name__}")


def _sum_to(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape)


class _Binary(_Op):

    _forward = {
        'add': np.add,
        'sub': np.subtract,
        'mul': np.multiply,
        'div': np.divide,
        'pow': np.power,
        'min': np.minimum,
        'max': np.maximum,
    }

    def __init__(self, kind: str, shape: Tuple[int, ...]):
        self.kind = kind
        self.name = kind
        self.shape = shape

    def _fit(self, array: np.ndarray) -> np.ndarray:
        return array.reshape(()) if array.shape != self.shape else array

    def forward(self, a, b):
        with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
            out = self._forward[self.kind](self._fit(a), self._fit(b))
        return np.broadcast_to(out, self.shape).copy() if out.shape != self.shape else out

    def backward(self, grad, inputs, output, needs):
        a, b = inputs
        kind = self.kind
        ga = gb = None
        if kind == 'add':
            ga, gb = grad, grad
        elif kind == 'sub':
            ga, gb = grad, -grad
        elif kind == 'mul':
            ga = grad * b if needs[0] else None
            gb = grad * a if needs[1] else None
        elif kind == 'div':
            ga = grad / b if needs[0] else None
            gb = -(grad * output) / b if needs[1] else None
        elif kind == 'pow':
            ga = grad * b * a ** (b - 1.0) if needs[0] else None
            gb = grad * output * a.log() if needs[1] else None
        else:
            left, right = self._fit(a.data), self._fit(b.data)
            pick_a = left >= right if kind == 'max' else left <= right
            pick_a = np.broadcast_to(pick_a, self.shape).astype(np.float64)
            ga = grad * Tensor._wrap(pick_a) if needs[0] else None
            gb = grad * Tensor._wrap(1.0 - pick_a) if needs[1] else None
        if ga is not None:
            ga = _sum_to(ga, a.shape)
        if gb is not None:
            gb = _sum_to(gb, b.shape)
        return ga, gb


class _Unary(_Op):

    def __init__(self, kind: str, slope: float = settings.LEAKY_SLOPE):
        self.kind = kind
        self.name = kind
        self.slope = slope

    def forward(self, a):
        kind = self.kind
        if kind == 'neg':
            return -a
        if kind == 'relu':
            return np.maximum(a, 0.0)
        if kind == 'leaky_relu':
            return np.where(a > 0, a, self.slope * a)
        if kind == 'sigmoid':
            return expit(a)
        if kind == 'tanh':
            return np.tanh(a)
        if kind == 'exp':
            with np.errstate(over='ignore'):
                return np.exp(a)
        if kind == 'log':
            if np.any(a <= 0):
                raise NumericalError(f"log of non-positive value (min {float(np.min(a)):.6g})")
            return np.log(a)
        if kind == 'softplus':
            return np.logaddexp(0.0, a)
        raise ValueError(f"Unknown activation: {kind}")

    def backward(self, grad, inputs, output, needs):
        (a,) = inputs
        kind = self.kind
        if kind == 'neg':
            return (-grad,)
        if kind == 'relu':
            return (grad * Tensor._wrap((a.data > 0).astype(np.float64)),)
        if kind == 'leaky_relu':
            return (grad * Tensor._wrap(np.where(a.data > 0, 1.0, self.slope)),)
        if kind == 'sigmoid':
            return (grad * output * (1.0 - output),)
        if kind == 'tanh':
            return (grad * (1.0 - output * output),)
        if kind == 'exp':
            return (grad * output,)
        if kind == 'log':
            return (grad / a,)
        if kind == 'softplus':
            return (grad * a.sigmoid(),)
        raise ValueError(f"Unknown activation: {kind}")


class _Reshape(_Op):
    name = 'reshape'

    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        return a.reshape(self.shape)

    def backward(self, grad, inputs, output, needs):
        return (grad.reshape(inputs[0].shape),)


class _Permute(_Op):
    name = 'permute'

    def __init__(self, axes):
        self.axes = axes

    def forward(self, a):
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, grad, inputs, output, needs):
        return (grad.transpose(tuple(np.argsort(self.axes))),)


class _Take(_Op):
    name = 'take'

    def __init__(self, index: np.ndarray, source_size: int):
        self.index = index
        self.source_size = source_size

    def forward(self, a):
        flat = np.append(a.reshape(-1), 0.0)
        return flat[self.index]

    def backward(self, grad, inputs, output, needs):
        scattered = _apply(_ScatterAdd(self.index, self.source_size), grad)
        return (scattered.reshape(inputs[0].shape),)


class _ScatterAdd(_Op):
    name = 'scatter_add'

    def __init__(self, index: np.ndarray, size: int):
        self.index = index
        self.size = size

    def forward(self, g):
        summed = np.bincount(self.index.reshape(-1), weights=g.reshape(-1), minlength=self.size + 1)
        return summed[:self.size]

    def backward(self, grad, inputs, output, needs):
        return (_apply(_Take(self.index, self.size), grad),)


class _Sum(_Op):
    name = 'sum'

    def __init__(self, axes: Tuple[int, ...], keepdims: bool):
        self.axes = axes
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axes, keepdims=self.keepdims)

    def backward(self, grad, inputs, output, needs):
        shape = inputs[0].shape
        return (grad.flatten().take(_sum_index(shape, self.axes)),)


class _MatMul(_Op):
    name = 'matmul'

    def forward(self, a, b):
        return a @ b

    def backward(self, grad, inputs, output, needs):
        a, b = inputs
        ga = grad @ b.transpose() if needs[0] else None
        gb = a.transpose() @ grad if needs[1] else None
        return ga, gb


class _Concat(_Op):
    name = 'concat'

    def forward(self, a, b):
        return np.concatenate([a, b], axis=0)

    def backward(self, grad, inputs, output, needs):
        a, b = inputs
        flat = grad.flatten()
        ga = flat.take(np.arange(a.size).reshape(a.shape)) if needs[0] else None
        gb = flat.take(np.arange(a.size, a.size + b.size).reshape(b.shape)) if needs[1] else None
        return ga, gb


# ---------------------------------------------------------------------------
# Cached index maps
# ---------------------------------------------------------------------------

def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array, dtype=np.intp)
    array.setflags(write=False)
    return array


@lru_cache(maxsize=512)
def _broadcast_index(shape: Tuple[int, ...], target: Tuple[int, ...]) -> np.ndarray:
    try:
        index = np.broadcast_to(np.arange(int(np.prod(shape))).reshape(shape), target)
    except ValueError as e:
        raise ShapeError(f"Cannot broadcast {list(shape)} to {list(target)}") from e
    return _frozen(index)


@lru_cache(maxsize=512)
def _sum_index(shape: Tuple[int, ...], axes: Tuple[int, ...]) -> np.ndarray:
    kept = tuple(1 if i in axes else extent for i, extent in enumerate(shape))
    return _frozen(np.broadcast_to(np.arange(int(np.prod(kept))).reshape(kept), shape))


@lru_cache(maxsize=256)
def _patch_index(channels: int, height: int, width: int, kh: int, kw: int,
                 stride: int, padding: int) -> np.ndarray:
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    c = np.arange(channels)[:, None, None, None, None]
    ki = np.arange(kh)[None, :, None, None, None]
    kj = np.arange(kw)[None, None, :, None, None]
    oi = np.arange(out_h)[None, None, None, :, None]
    oj = np.arange(out_w)[None, None, None, None, :]
    rows = oi * stride + ki - padding
    cols = oj * stride + kj - padding
    valid = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    flat = c * height * width + rows * width + cols
    index = np.where(valid, flat, channels * height * width)
    return _frozen(index.reshape(channels * kh * kw, out_h * out_w))


@lru_cache(maxsize=128)
def _upsample_index(channels: int, height: int, width: int, factor: int) -> np.ndarray:
    c = np.arange(channels)[:, None, None]
    i = (np.arange(height * factor) // factor)[None, :, None]
    j = (np.arange(width * factor) // factor)[None, None, :]
    return _frozen(c * height * width + i * width + j)


@lru_cache(maxsize=128)
def _pool_indices(channels: int, height: int, width: int) -> Tuple[np.ndarray, ...]:
    c = np.arange(channels)[:, None, None]
    i = (np.arange(height // 2) * 2)[None, :, None]
    j = (np.arange(width // 2) * 2)[None, None, :]
    return tuple(_frozen(c * height * width + (i + di) * width + (j + dj))
                 for di in (0, 1) for dj in (0, 1))


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape)))


def elementwise(op_kind: str, a: Union[Tensor, Scalar], b: Union[Tensor, Scalar]) -> Tensor:
    """
    Elementwise binary operation.

    Args:
        op_kind: One of add, sub, mul, div, pow, min, max
        a: Tensor or scalar
        b: Tensor or scalar; shapes must match unless one side has one element

    Returns:
        Tensor shaped like the larger operand
    """
    if op_kind not in ELEMENTWISE_KINDS:
        raise ValueError(f"Unknown elementwise op: {op_kind}")
    a, b = _constant(a), _constant(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op_kind}: shape mismatch {list(a.shape)} vs {list(b.shape)}")
    shape = a.shape if (a.size != 1 or b.size == 1) else b.shape
    return _apply(_Binary(op_kind, shape), a, b)


def minimum(a, b) -> Tensor:
    return elementwise('min', a, b)


def maximum(a, b) -> Tensor:
    return elementwise('max', a, b)


def activation(kind: str, t: Tensor) -> Tensor:
    """Elementwise nonlinearity; leaky_relu uses slope 0.2."""
    if kind not in ACTIVATION_KINDS:
        raise ValueError(f"Unknown activation: {kind}")
    return _apply(_Unary(kind), t)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimension mismatch: {list(a.shape)} @ {list(b.shape)}")
    return _apply(_MatMul(), a, b)


def reduce(kind: str, t: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """
    Sum or mean over axes (all axes when None).

    Raises:
        ShapeError: If an axis is out of range
    """
    if kind not in ('sum', 'mean'):
        raise ValueError(f"Unknown reduction: {kind}")
    if axes is None:
        axes = tuple(range(t.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for axis in axes:
        if not -t.ndim <= axis < t.ndim:
            raise ShapeError(f"Invalid axis {axis} for shape {list(t.shape)}")
        normalized.append(axis % t.ndim)
    axes = tuple(sorted(set(normalized)))
    out = _apply(_Sum(axes, keepdims), t)
    if kind == 'mean':
        count = int(np.prod([t.shape[a] for a in axes])) if axes else 1
        out = out * (1.0 / count)
    return out


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Softmax along axis, computed with max-subtraction."""
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"Invalid axis {axis} for shape {list(t.shape)}")
    shift = np.broadcast_to(np.max(t.data, axis=axis, keepdims=True), t.shape)
    exps = (t - Tensor._wrap(shift.copy())).exp()
    totals = exps.sum(axis, keepdims=True).broadcast_to(t.shape)
    return exps / totals


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack [C1,H,W] and [C2,H,W] into [C1+C2,H,W]; channels of a come first."""
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"concat_channels needs rank-3 tensors, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels spatial mismatch: {list(a.shape)} vs {list(b.shape)}")
    return _apply(_Concat(), a, b)


def slice_channels(t: Tensor, start: int, stop: int) -> Tensor:
    channels, height, width = t.shape
    if not 0 <= start <= stop <= channels:
        raise ShapeError(f"Channel slice [{start}:{stop}] out of range for {list(t.shape)}")
    plane = height * width
    index = np.arange(start * plane, stop * plane).reshape(stop - start, height, width)
    return t.take(index)


def conv2d(input: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    Direct 2-D cross-correlation of one [C_in,H,W] input.

    Args:
        input: Tensor [C_in, H, W]
        kernels: Tensor [C_out, C_in, kh, kw]
        bias: Optional tensor [C_out]
        stride: Positive step between windows
        padding: Zero padding on every side

    Returns:
        Tensor [C_out, H', W']
    """
    if input.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d needs [C,H,W] input and [O,C,kh,kw] kernels, "
                         f"got {list(input.shape)} and {list(kernels.shape)}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    channels, height, width = input.shape
    out_channels, kernel_channels, kh, kw = kernels.shape
    if kernel_channels != channels:
        raise ShapeError(f"conv2d channel mismatch: input has {channels}, kernels expect {kernel_channels}")
    padded_h, padded_w = height + 2 * padding, width + 2 * padding
    if kh > padded_h or kw > padded_w:
        raise ShapeError(f"Kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}")
    if (padded_h - kh) % stride or (padded_w - kw) % stride:
        raise ShapeError(f"Non-integer conv2d output extent for input {height}x{width}, "
                         f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
    out_h = (padded_h - kh) // stride + 1
    out_w = (padded_w - kw) // stride + 1

    patches = input.take(_patch_index(channels, height, width, kh, kw, stride, padding))
    out = kernels.reshape((out_channels, channels * kh * kw)) @ patches
    out = out.reshape((out_channels, out_h, out_w))
    if bias is not None:
        out = out + bias.reshape((out_channels, 1, 1)).broadcast_to(out.shape)
    return out


def upsample_nearest(t: Tensor, factor: int = 2) -> Tensor:
    channels, height, width = t.shape
    return t.take(_upsample_index(channels, height, width, factor))


def max_pool2(t: Tensor) -> Tensor:
    channels, height, width = t.shape
    if height % 2 or width % 2:
        raise ShapeError(f"max_pool2 needs even extents, got {list(t.shape)}")
    a, b, c, d = (t.take(index) for index in _pool_indices(channels, height, width))
    return maximum(maximum(a, b), maximum(c, d))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                      coordinates: Optional[Iterable[int]] = None) -> float:
    """
    Compare the recorded gradient of f at x with central differences.

    Args:
        f: Function from a tensor to a scalar tensor
        x: Evaluation point
        step: Finite-difference step, > 0
        coordinates: Flat coordinates to check (all when None)

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    point = Tensor(x.data, requires_grad=True)
    with ComputationRecord() as record:
        value = f(point)
    analytic = backward(value, record)[point].data.reshape(-1)

    base = np.array(x.data, dtype=np.float64).reshape(-1)
    checked = range(base.size) if coordinates is None else coordinates
    worst = 0.0
    with no_record():
        for i in checked:
            shifted = base.copy()
            shifted[i] += step
            upper = f(Tensor(shifted.reshape(x.shape))).item()
            shifted[i] -= 2 * step
            lower = f(Tensor(shifted.reshape(x.shape))).item()
            if not (np.isfinite(upper) and np.isfinite(lower)):
                raise NumericalError(f"Non-finite function value probing coordinate {i}")
            numeric = (upper - lower) / (2 * step)
            error = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, error)
    return worst
