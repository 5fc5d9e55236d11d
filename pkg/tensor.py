#!/usr/bin/env python3
"""
Dense reverse-mode differentiation for the perception stack.

Tensors wrap float64 numpy arrays. Primitives executed while a Tape is active
append a record holding a backward closure; backward() replays the records
in reverse. Broadcasting is limited to equal shapes, trailing-suffix biases
and keepdims-style size-1 axes.
"""

import threading
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from errors import AutodiffError, ShapeError

ArrayLike = Union[np.ndarray, float, Sequence]

_active = threading.local()


class Tensor:
    """A float64 array with an optional accumulated gradient."""

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def constant(data: ArrayLike) -> Tensor:
    return Tensor(data)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Ordered record of primitive applications; enter with `with Tape() as tape:`."""

    def __init__(self):
        self.records: List[Tuple[Tensor, Tuple[Tensor, ...], Callable]] = []
        self.tensors: Dict[int, Tensor] = {}
        self.seeds: Dict[int, np.ndarray] = {}
        self._previous: Optional["Tape"] = None

    def __enter__(self) -> "Tape":
        self._previous = getattr(_active, "tape", None)
        _active.tape = self
        return self

    def __exit__(self, *exc):
        _active.tape = self._previous
        return False

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward_fn: Callable):
        self.records.append((out, inputs, backward_fn))
        self.tensors[id(out)] = out
        for t in inputs:
            self.tensors.setdefault(id(t), t)

    def __contains__(self, tensor: Tensor) -> bool:
        return self.tensors.get(id(tensor)) is tensor


def current_tape() -> Optional[Tape]:
    return getattr(_active, "tape", None)


def _emit(data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------

def _check_axis(t: Tensor, axis: int) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {t.shape}")
    return axis % t.ndim


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    small, large = (a, b) if len(a) <= len(b) else (b, a)
    if len(small) <= len(large) and large[len(large) - len(small):] == small:
        return large
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return tuple(max(x, y) for x, y in zip(a, b))
    raise ShapeError(f"shapes {a} and {b} are not compatible")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """`(..., n, k) @ (k, m)`, or batched `(B, n, k) @ (B, k, m)`."""
    if a.ndim >= 1 and b.ndim == 2 and a.shape[-1] == b.shape[0]:
        def backward(g):
            a2 = a.data.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, b.shape[1])
            return g @ b.data.T, a2.T @ g2
        return _emit(a.data @ b.data, (a, b), backward)

    if a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]:
        def backward(g):
            return g @ np.swapaxes(b.data, 1, 2), np.swapaxes(a.data, 1, 2) @ g
        return _emit(a.data @ b.data, (a, b), backward)

    raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _emit(a.data / b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = special.expit(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a: Tensor) -> Tensor:
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    y = special.softmax(a.data, axis=axis)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)
    return _emit(y, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    y = special.log_softmax(a.data, axis=axis)

    def backward(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)
    return _emit(y, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    y = special.logsumexp(a.data, axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * special.softmax(a.data, axis=axis),)
    return _emit(y, (a,), backward)


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        return _emit(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    axis = _check_axis(a, axis)

    def backward(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _emit(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[_check_axis(a, axis)]
    return scale(sum(a, axis), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    axis = _check_axis(tensors[0], axis)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ShapeError(f"cannot concatenate {t.shape} with {tensors[0].shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds, bounds[1:]))
    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def slice(a: Tensor, index) -> Tensor:
    """`a[index]` for any numpy index; repeated positions accumulate."""
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _emit(a.data[index], (a,), backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _emit(data, (a,), lambda g: (g.reshape(a.shape),))


def swap_last(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"swap_last needs at least 2 axes, got {a.shape}")
    return _emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def repeat(a: Tensor, count: int, axis: int) -> Tensor:
    """Insert a new axis at `axis` holding `count` copies."""
    if not -a.ndim - 1 <= axis <= a.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
    axis = axis % (a.ndim + 1)
    data = np.repeat(np.expand_dims(a.data, axis), count, axis=axis)
    return _emit(data, (a,), lambda g: (g.sum(axis=axis),))


def l2_norm_sq(a: Tensor) -> Tensor:
    return _emit(np.sum(a.data * a.data), (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def inject_external_gradient(tensor: Tensor, grad: ArrayLike, tape: Optional[Tape] = None):
    """
    Seed `tape` with an externally computed ∂loss/∂tensor.

    Raises:
        AutodiffError: no tape, or the tensor was never recorded on it
        ShapeError: `grad` does not match the tensor's shape
    """
    tape = tape or current_tape()
    if tape is None or tensor not in tape:
        raise AutodiffError(f"{tensor!r} is not on the tape")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != tensor.shape:
        raise ShapeError(f"seed of shape {grad.shape} for tensor of shape {tensor.shape}")
    key = id(tensor)
    tape.seeds[key] = tape.seeds[key] + grad if key in tape.seeds else grad.copy()


def backward(tape: Tape, root: Tensor):
    """Populate `.grad` (accumulating) on every tensor the root or the seeds reach."""
    if root.data.size != 1:
        raise AutodiffError(f"backward needs a scalar root, got shape {root.shape}")
    grads: Dict[int, np.ndarray] = {key: seed.copy() for key, seed in tape.seeds.items()}
    grads[id(root)] = grads.get(id(root), 0.0) + np.ones_like(root.data)

    for out, inputs, backward_fn in reversed(tape.records):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, backward_fn(g)):
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi

    seen = dict(tape.tensors)
    seen[id(root)] = root
    for key, g in grads.items():
        t = seen.get(key)
        if t is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# Parameter updates
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data = p.data * (1.0 - self.lr * self.weight_decay)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * p.grad * p.grad
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
