"""Dense tensors with tape-based reverse-mode differentiation.

Every array the models touch is a :class:`Tensor` wrapping a numpy array. Operations run
while a :class:`Tape` is active, on inputs that require gradients, are appended to the
tape in execution order, so the record is topologically sorted by construction.
:meth:`Tape.backward` walks the record once in reverse and deposits gradients on the
leaf tensors; the tape is consumed by that pass.

Arithmetic preserves the dtype of its operands (float32 by default, float64 for tight
gradient checks). Python scalar constants never promote under numpy's NEP 50 rules.
"""

import logging
import math
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from src.lib.errors import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-6

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    """Return the tape recording on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on this thread, even inside an active tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """Immutable dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            keep = isinstance(data, (np.ndarray, np.generic)) and arr.dtype.kind == "f"
            dtype = arr.dtype if keep else DEFAULT_DTYPE
        self.data: np.ndarray = arr.astype(dtype, copy=False)
        self.requires_grad = requires_grad
        self.grad: Tensor | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


@dataclass
class TapeEntry:
    """One primitive application: op id, inputs, output and its backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Single-owner record of primitive applications.

    Use as a context manager around the forward computation, then call
    :meth:`backward` exactly once.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.consumed = False
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise ContractError("cannot record on a tape that backward() already consumed")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        for tensor in inputs:
            if tensor.requires_grad and id(tensor) not in self._produced:
                self._leaves[id(tensor)] = tensor
        self._produced.add(id(output))
        output._tape = self
        self.entries.append(TapeEntry(op, inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
        if self.consumed:
            raise ContractError("backward() already ran on this tape; the tape is single-shot")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            input_grads = entry.backward(g)
            for tensor, gi in zip(entry.inputs, input_grads, strict=True):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + gi if key in grads else gi

        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.array(g, dtype=leaf.dtype)
            leaf.grad = Tensor(g) if leaf.grad is None else Tensor(leaf.grad.data + g)

        logger.debug(f"backward consumed {len(self.entries)} tape entries, {len(self._leaves)} leaves")
        self.consumed = True
        self.entries.clear()
        self._produced.clear()
        self._leaves.clear()


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape that produced ``loss``."""
    if loss._tape is None:
        raise ContractError("loss is not attached to a tape; compute it inside `with Tape():`")
    loss._tape.backward(loss)


@dataclass(eq=False)
class Parameter:
    """Named tensor with a trainable flag and optimizer metadata.

    ``layer`` is the block index used for layer-wise learning-rate decay; ``decay``
    is False for parameters excluded from weight decay (norms, biases, tables).
    """

    name: str
    value: Tensor
    trainable: bool = True
    layer: int = 0
    decay: bool = True

    def __post_init__(self):
        if not self.name:
            raise ContractError("parameter name must be non-empty")
        self.value.requires_grad = self.trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def grad(self) -> Tensor | None:
        return self.value.grad

    def assign(self, data: np.ndarray) -> None:
        """Replace the value with a fresh tensor (dropping any gradient)."""
        data = np.asarray(data)
        if data.shape != self.shape:
            raise DimensionError(f"cannot assign shape {data.shape} to parameter {self.name} of shape {self.shape}")
        self.value = Tensor(np.array(data, dtype=self.value.dtype), requires_grad=self.trainable)

    def astype(self, dtype) -> None:
        self.value = Tensor(self.value.data.astype(dtype), requires_grad=self.trainable)

    def zero_grad(self) -> None:
        self.value.grad = None


# --- recording helpers -------------------------------------------------------------


def _result(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(np.asarray(data))
    out = Tensor(np.asarray(data), requires_grad=True)
    tape.record(op, inputs, out, backward_fn)
    return out


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    return a, b


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from e


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int) -> tuple[int, ...] | None:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


# --- elementwise arithmetic --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "add")
    return _result(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "sub")
    return _result(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "mul")
    return _result(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check(a, b, "div")
    return _result(
        a.data / b.data,
        "div",
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


# --- linear algebra and reductions --------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``.

    Leading batch extents must be equal, or one operand must be a plain matrix.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a and lead_b and lead_a != lead_b:
        raise DimensionError(f"matmul: batch extents differ between {a.shape} and {b.shape}")

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), "matmul", (a, b), backward_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)

    def backward_fn(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), backward_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = a.size if axes is None else math.prod(a.shape[ax] for ax in axes)
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


# --- shape manipulation --------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from e
    return _result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(a.data[index], "getitem", (a,), backward_fn)


def take(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``table`` along its first axis; repeated indices accumulate."""
    idx = np.asarray(indices, dtype=np.intp)

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(table.data[idx], "take", (table,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, "concat", tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from e
    return _result(out, "broadcast_to", (a,), lambda g: (_unbroadcast(g, a.shape),))


# --- neural primitives ----------------------------------------------------------------


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable boolean) marks admissible positions; excluded positions get
    exactly zero weight. Every row must keep at least one admissible position.
    """
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_lastdim received non-finite input")
    z = x.data if mask is None else np.where(mask, x.data, np.asarray(-np.inf, dtype=x.dtype))
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return _result(y, "softmax", (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each token over the last axis, then apply the affine map."""
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match the last extent of {x.shape}"
        )
    if not np.all(np.isfinite(x.data)):
        raise NumericError("layer_norm received non-finite input")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def backward_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _result(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3)))."""
    d = x.data
    t = np.tanh(_GELU_C * (d + _GELU_K * d * d * d))

    def backward_fn(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * du),)

    return _result(0.5 * d * (1.0 + t), "gelu", (x,), backward_fn)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)`` (log-sum-exp form).

    With ``smoothing`` > 0 the target mixes the one-hot label with the uniform distribution.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross entropy expects logits [B, K], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    batch, classes = logits.shape
    rows = np.arange(batch)
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    target = np.full_like(logp, smoothing / classes)
    target[rows, labels] += 1.0 - smoothing
    loss = -(target * logp).sum() / batch

    def backward_fn(g):
        return (g * (np.exp(logp) - target) / batch,)

    return _result(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), backward_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` over the last axis of ``x``."""
    out = matmul(x, w)
    return out if b is None else add(out, b)
