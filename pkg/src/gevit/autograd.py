"""Reverse-mode automatic differentiation over dense numpy arrays.

Each :class:`Tensor` wraps an ``np.ndarray``. Operations on tensors that
require gradients record a closure that maps the output gradient to parent
gradients; :meth:`Tensor.backward` walks the graph once in reverse
topological order and accumulates into ``.grad``.

Precision is chosen per process through :func:`set_default_dtype` or the
:func:`precision` context manager (``"f32"`` or ``"f64"``).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "tensor",
    "set_default_dtype",
    "get_default_dtype",
    "precision",
    "no_grad",
    "matmul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "swish",
    "sigmoid",
    "concat",
    "take",
    "dropout",
    "cross_entropy",
    "finite_diff_check",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = _DTYPES[dtype] if isinstance(dtype, str) else np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default dtype (``"f32"`` or ``"f64"``)."""
    old = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- backward ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other) -> Tensor:
        other = _as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = _as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)))

    def __rsub__(self, other) -> Tensor:
        return _as_tensor(other, self.dtype) - self

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other) -> Tensor:
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other),
                            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other),
                            lambda g: (_unbroadcast(g / b, a.shape),
                                       _unbroadcast(-g * a / (b * b), b.shape)))

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __pow__(self, p: float) -> Tensor:
        a = self.data
        return Tensor._make(a ** p, (self,), lambda g: (g * p * a ** (p - 1),))

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    # -- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int) -> Tensor:
        """Max along one axis; the gradient goes to the first maximal entry."""
        a = self.data
        arg = np.argmax(a, axis=axis)
        out = np.take_along_axis(a, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

        def back(g):
            full = np.zeros_like(a)
            np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
            return (full,)

        return Tensor._make(out, (self,), back)

    # -- shape ops --------------------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def expand_dims(self, axis: int) -> Tensor:
        shape = list(self.shape)
        axis = axis if axis >= 0 else self.ndim + 1 + axis
        shape.insert(axis, 1)
        return self.reshape(tuple(shape))

    def __getitem__(self, key) -> Tensor:
        shape = self.shape
        dtype = self.dtype

        def back(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, key, g)
            return (full,)

        return Tensor._make(self.data[key], (self,), back)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]`` with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    if B.ndim == 2:
        # one GEMM over all leading axes instead of a broadcast stack
        k, n = B.shape
        out = (A.reshape(-1, k) @ B).reshape(A.shape[:-1] + (n,))

        def back2(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ B.T).reshape(A.shape) if a.requires_grad else None
            gb = A.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._make(out, (a, b), back2)
    try:
        out = np.matmul(A, B)
    except ValueError as exc:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), back)


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    x = z.data
    s = x - x.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)

    def back(g):
        gx = g - (g * s).sum(axis=axis, keepdims=True)
        gx *= s
        return (gx,)

    return Tensor._make(s, (z,), back)


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    x = z.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (z,), back)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._make(s, (x,), lambda g: (g * s * (1 - s),))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def swish(x: Tensor) -> Tensor:
    """``x * sigmoid(x)``."""
    a = x.data
    s = _sigmoid(a)

    def back(g):
        return (g * (s + a * s * (1 - s)),)

    return Tensor._make(a * s, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G, Bv = gain.data, bias.data
    c = a.shape[-1]

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, G.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, Bv.shape) if bias.requires_grad else None
        return gx, gg, gb

    if G.shape != (c,) or Bv.shape != (c,):
        raise ValueError(f"layer_norm gain/bias must have shape ({c},)")
    return Tensor._make(xhat * G + Bv, (x, gain, bias), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def take(x: Tensor, idx: np.ndarray, axis: int = 0) -> Tensor:
    """Gather ``x`` along ``axis`` with an integer index array of any shape.

    Output shape is ``x.shape[:axis] + idx.shape + x.shape[axis+1:]``.
    Repeated indices accumulate in the backward pass.
    """
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take index out of range for axis of size {n}")
    out = np.take(x.data, idx, axis=axis)
    xshape = x.shape

    def back(g):
        m = idx.size
        # move gathered axes to the front and flatten to (m, rest)
        g = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        rest = g.shape[idx.ndim:]
        g2 = g.reshape(m, -1)
        scatter = sp.csr_matrix((np.ones(m, dtype=g2.dtype), (idx.ravel(), np.arange(m))), shape=(n, m))
        gx = np.asarray(scatter @ g2).reshape((n,) + rest)
        return (np.moveaxis(gx, 0, axis).reshape(xshape),)

    return Tensor._make(out, (x,), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    out = x.data * keep
    out *= scale

    def back(g):
        gx = g * keep
        gx *= scale
        return (gx,)

    return Tensor._make(out, (x,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the leading batch axis.

    ``logits`` is ``(classes,)`` or ``(batch, classes)``.
    """
    single = logits.ndim == 1
    if single:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels))
    b, c = logits.shape
    if labels.shape != (b,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be {b} integers, got {labels!r}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range for {c} classes: {labels.tolist()}")
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros((b, c), dtype=logits.dtype)
    onehot[np.arange(b), labels] = -1.0 / b
    return (lsm * Tensor(onehot, dtype=logits.dtype)).sum()


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
                      coords: Iterable[int] | None = None, floor: float = 1e-3) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. Per coordinate the error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps vanishing gradients from
    turning roundoff into a large ratio.
    """
    x = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in (range(flat.size) if coords is None else coords):
            old = flat[i]
            flat[i] = old + eps
            fp = float(f(x).data)
            flat[i] = old - eps
            fm = float(f(x).data)
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
