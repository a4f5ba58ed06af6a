"""Dense tensors with reverse-mode automatic differentiation on a numpy backend.

Every op records its parents and a closure that maps the output gradient to
one gradient per parent. ``backward`` walks the graph in reverse topological
order, so the tape is rebuilt from scratch on every forward pass.

Broadcasting is deliberately narrow. Two operands combine when their shapes
are equal, when one of them is a scalar (size 1), or when the shorter shape is
a suffix of the longer one (e.g. ``(B, T, D) + (D,)`` or ``(B, T, D) + (T, D)``).
Anything else is rejected with both shapes in the message.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()
_default_dtype = np.float32


def grad_enabled() -> bool:
    return getattr(_local, "no_grad_depth", 0) == 0


@contextlib.contextmanager
def no_grad():
    """Ops inside the block record no backward rules; nesting is allowed."""
    _local.no_grad_depth = getattr(_local, "no_grad_depth", 0) + 1
    try:
        yield
    finally:
        _local.no_grad_depth -= 1


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def sigmoid(self): return sigmoid(self)
    def relu(self): return relu(self)
    def abs(self): return abs_(self)
    def softmax(self, axis=-1): return softmax(self, axis)

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype if like is not None else None)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ValueError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("power only supports a constant exponent")
    out = a.data ** p
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    return _result(np.logaddexp(0, a.data).astype(a.dtype), (a,),
                   lambda g: (g * _sigmoid(a.data),))


def relu(a: Tensor) -> Tensor:
    return _result(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


def abs_(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "maximum")
    pick_a = a.data >= b.data
    return _result(np.maximum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a.shape, b.shape, "minimum")
    pick_a = a.data <= b.data
    return _result(np.minimum(a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def clip(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _result(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), back)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layernorm: affine shapes {gamma.shape}, {beta.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _result(out.astype(x.dtype), (x, gamma, beta), back)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """(..., n, k) @ (..., k, m); b may drop the leading batch dims."""
    a, b = _binary_operands(a, b)
    ok = (a.ndim >= b.ndim >= 2 and a.shape[-1] == b.shape[-2]
          and a.shape[a.ndim - b.ndim:-2] == b.shape[:-2])
    if not ok:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), back)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise TypeError("index with integers, slices or numpy arrays, not tensors")
    out = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, dtype=a.dtype), (a,), back)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
        if t.dtype != tensors[0].dtype:
            raise TypeError(f"dtype mismatch: {tensors[0].dtype} vs {t.dtype}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                   lambda g: tuple(np.split(g, splits, axis=ax)))


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (B, C, H, W), w: (O, C, k, k), b: (O,) -> (B, O, Ho, Wo)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]          # (B, C, Ho, Wo, k, k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1)                            # (B, Ho, Wo, O)
        gw = (gm.reshape(-1, o).T @ cols.reshape(-1, c * k * k)).reshape(w.shape)
        gcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += \
                    gcols[..., di, dj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        grads = [gx, gw]
        if b is not None:
            grads.append(gm.sum(axis=(0, 1, 2)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, back)


# ---------------------------------------------------------------- autodiff

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar loss.

    Gradients accumulate into ``.grad`` of every leaf reached (tensors created
    directly with ``requires_grad=True``). Returns the leaf -> gradient map for
    this call only.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    result: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return result
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            result[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return result


def numerical_gradient(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to every entry of ``t``."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad
