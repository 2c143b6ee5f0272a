"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps a float64 ndarray and records, per operation, a
closure that routes the output gradient back to the inputs.  Calling
``backward()`` on a scalar runs the closures in reverse topological order.
The op set is exactly what the token-fusion model needs: broadcast
arithmetic, matmul (with stacked leading dims), relu, layer norm,
(log-)softmax, reshapes, concatenation, row gather and reductions.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "concat",
    "gather_rows",
    "layer_norm",
    "log_softmax",
    "matmul",
    "no_grad",
    "relu",
    "softmax",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (forward-only evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad: np.ndarray):
        self.grad = grad if self.grad is None else self.grad + grad

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad or self._backward is None and not self._parents:
            raise RuntimeError("backward() called with no recorded computation")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


# -- elementwise and linear ops --------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data

    def backward(grad):
        if a.requires_grad:
            a._accumulate(_unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(grad * a.data, b.shape))

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data @ b.data

    def backward(grad):
        if a.requires_grad:
            ga = grad @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ grad
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def relu(x) -> Tensor:
    x = _lift(x)
    data = np.maximum(x.data, 0.0)

    def backward(grad):
        x._accumulate(grad * (x.data > 0.0))

    return _make(data, (x,), backward)


# -- shape ops -------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    data = x.data.reshape(shape)

    def backward(grad):
        x._accumulate(grad.reshape(x.shape))

    return _make(data, (x,), backward)


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _lift(x)
    data = np.swapaxes(x.data, a, b)

    def backward(grad):
        x._accumulate(np.swapaxes(grad, a, b))

    return _make(data, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [_lift(t) for t in tensors]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                index = [slice(None)] * grad.ndim
                index[axis] = slice(int(start), int(stop))
                part._accumulate(grad[tuple(index)])

    return _make(data, tuple(parts), backward)


def gather_rows(x, index: np.ndarray) -> Tensor:
    """Select rows along the second-to-last axis: (B, S, W), (B, Q) -> (B, Q, W)."""
    x = _lift(x)
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ValueError(f"gather_rows expects (B, S, W) and (B, Q), got {x.shape} and {index.shape}")
    batch = np.arange(x.shape[0])[:, None]
    data = x.data[batch, index]

    def backward(grad):
        full = np.zeros_like(x.data)
        np.add.at(full, (batch, index), grad)
        x._accumulate(full)

    return _make(data, (x,), backward)


# -- reductions ------------------------------------------------------------


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(grad):
        if axis is None:
            x._accumulate(np.broadcast_to(grad, x.shape).copy())
            return
        if not keepdims:
            grad = np.expand_dims(grad, axis)
        x._accumulate(np.broadcast_to(grad, x.shape).copy())

    return _make(data, (x,), backward)


# -- normalization and softmax ---------------------------------------------


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an elementwise affine map."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    data = normed * gain.data + bias.data

    def backward(grad):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(grad * normed, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(grad, bias.shape))
        if x.requires_grad:
            gn = grad * gain.data
            m1 = gn.mean(axis=-1, keepdims=True)
            m2 = (gn * normed).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gn - m1 - normed * m2))

    return _make(data, (x, gain, bias), backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    data = exp / exp.sum(axis=axis, keepdims=True)

    def backward(grad):
        inner = (grad * data).sum(axis=axis, keepdims=True)
        x._accumulate(data * (grad - inner))

    return _make(data, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    probs = np.exp(data)

    def backward(grad):
        x._accumulate(grad - probs * grad.sum(axis=axis, keepdims=True))

    return _make(data, (x,), backward)
