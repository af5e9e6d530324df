"""
Dense tensors with reverse-mode automatic differentiation (NumPy backend).

Every differentiable op produces a new ``Tensor`` carrying a ``Node`` that
references its inputs and a backward function mapping the output gradient to
input gradients. ``backward(loss)`` sorts the recorded graph into a ``Tape``
(inputs before the ops that consume them), runs reverse accumulation and then
releases the graph: a second backward over the same forward build raises
``TapeError``.

Values are 32-bit floats by default. Ops preserve the dtype of their inputs,
so gradient oracles can rebuild the same computation in 64-bit.
"""

from __future__ import annotations

import contextlib
import logging
import math
import threading
import zlib
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (inference, evaluation)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


@dataclass
class Node:
    """Record of one executed op: its inputs and how to differentiate it."""

    op: str
    parents: Tuple["Tensor", ...]
    backward_fn: Optional[BackwardFn]
    consumed: bool = False


class Tensor:
    """N-dimensional float array participating in the gradient tape."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        self.data: np.ndarray = np.array(data, dtype=dtype)
        _check_finite("tensor", self.data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = data
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor._node = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def op(self) -> Optional[str]:
        return self._node.op if self._node is not None else None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Number):
        if isinstance(other, Tensor):
            raise TypeError("Tensor division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _check_finite(op: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        logger.debug(f"Non-finite output from {op}, shape {array.shape}")
        raise NonFiniteError(op)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=like.dtype))


def make_result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op output, recording it on the tape when any input needs gradients."""
    _check_finite(op, data)
    requires = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, requires_grad=requires)
    if requires:
        out._node = Node(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- Elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    return make_result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: Number) -> Tensor:
    factor = x.dtype.type(factor)
    return make_result("scale", x.data * factor, (x,), lambda g: (g * factor,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log")
    return make_result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# --- Linear algebra and shape ops -------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")

    def backward_fn(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return make_result("matmul", np.matmul(a.data, b.data), (a, b), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from e
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute axes {axes} do not match rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return make_result("permute", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis but the first (batch) one."""
    return reshape(x, (x.shape[0], -1))


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_result("sum", np.asarray(out, dtype=x.dtype), (x,), backward_fn)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --- Activations ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data ** 2) / math.sqrt(2.0 * math.pi)
    out = (x.data * cdf).astype(x.dtype)
    return make_result("gelu", out, (x,), lambda g: ((g * (cdf + x.data * pdf)).astype(x.dtype),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / np.sum(exps, axis=axis, keepdims=True)

    def backward_fn(g):
        return (probs * (g - np.sum(g * probs, axis=axis, keepdims=True)),)

    return make_result("softmax", probs, (x,), backward_fn)


def linear(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {
    "relu": relu,
    "gelu": gelu,
    "softmax": softmax,
    "linear": linear,
}


# --- Gradient routing -------------------------------------------------------

def stop_gradient(x: Tensor) -> Tensor:
    """Same value as ``x``; contributes nothing to ``x``'s gradient."""
    return Tensor._wrap(x.data)


def straight_through(source: Tensor, value: np.ndarray) -> Tensor:
    """
    Forward ``value``, backward the identity to ``source``.

    Equal in value and gradient to ``source + stop_gradient(value - source)``
    but returns ``value`` bit-for-bit.
    """
    value = np.asarray(value, dtype=source.dtype)
    if value.shape != source.shape:
        raise ShapeError(f"straight_through value shape {value.shape} != source shape {source.shape}")
    return make_result("straight_through", value, (source,), lambda g: (g,))


# --- Reverse accumulation ---------------------------------------------------

class Tape:
    """Ops reachable from a loss, ordered so every input precedes its consumers."""

    def __init__(self, entries: List[Tensor]):
        self.entries = entries

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            if t._node is not None and t._node.consumed:
                raise TapeError(
                    f"Graph through op '{t._node.op}' was already consumed by a backward pass; rebuild the forward"
                )
            stack.append((t, True))
            if t._node is not None:
                for parent in t._node.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def run(self, loss: Tensor, seed: np.ndarray) -> None:
        grads = {id(loss): seed}
        for t in reversed(self.entries):
            g = grads.pop(id(t), None)
            node = t._node
            if node is None:
                if g is not None and t.requires_grad:
                    g = np.array(g, dtype=t.dtype)
                    t.grad = g if t.grad is None else t.grad + g
                continue
            if g is not None:
                for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
                    if parent_grad is None or not parent.requires_grad:
                        continue
                    _check_finite(f"{node.op} backward", parent_grad)
                    key = id(parent)
                    grads[key] = grads[key] + parent_grad if key in grads else parent_grad
            node.consumed = True
            node.backward_fn = None


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf tensor with ``requires_grad`` reachable from ``loss``."""
    if loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("Loss is detached from the tape (no input requires gradients)")
    tape = Tape.from_loss(loss)
    tape.run(loss, np.ones_like(loss.data))


# --- Random numbers and initialization --------------------------------------

def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


class Prng:
    """
    Seeded generator splittable into independent substreams.

    ``substream("augment", epoch, index)`` always yields the same stream for
    the same seed and key, whatever was drawn from other streams before.
    """

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def substream(self, purpose: str, *indices: int) -> "Prng":
        return Prng(self.seed, self.key + (_purpose_code(purpose),) + tuple(int(i) for i in indices))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, options, size=None):
        return self.generator.choice(options, size=size)

    def __repr__(self) -> str:
        return f"Prng(seed={self.seed}, key={self.key})"


def glorot_uniform(fan_in: int, fan_out: int, shape, rng: Prng, requires_grad: bool = True) -> Tensor:
    """Uniform on [-L, L] with L = sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"Glorot initialization needs positive fans, got fan_in={fan_in}, fan_out={fan_out}")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    values = rng.uniform(-limit, limit, size=tuple(shape)).astype(DEFAULT_DTYPE)
    return Tensor._wrap(values, requires_grad=requires_grad)
