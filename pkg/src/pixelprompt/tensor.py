"""Dense float64 arrays with reverse-mode differentiation.

Every value flowing through the model is a Tensor. Forward ops record the
graph eagerly (only while some input requires a gradient); backward() walks
it once in reverse topological order and then frees it.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

# Additive-mask sentinel standing in for -inf. Large enough that
# exp(x - rowmax) underflows to exactly 0.0 at masked positions, finite so
# that 0 * value stays 0 instead of turning into NaN.
NEG_INF = -1e30

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """N-d float64 array, optionally tracked by the differentiation graph."""

    __slots__ = ("data", "requires_grad", "node_id", "_parents", "_grad_fn", "_freed")
    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(Tensor._ids)
        self._parents = ()
        self._grad_fn = None
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data: np.ndarray, parents, grad_fn) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out, (a, b), grad_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def grad_fn(g):
        return (g * c,)

    return _make(out, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2d x 2d, equal-batch stacks, and stack x 2d."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {ad.shape} vs {bd.shape}")
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {ad.shape} vs {bd.shape}")
    out = np.matmul(ad, bd)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        if ga.ndim > ad.ndim:
            ga = ga.sum(axis=tuple(range(ga.ndim - ad.ndim)))
        if gb.ndim > bd.ndim:
            gb = gb.sum(axis=tuple(range(gb.ndim - bd.ndim)))
        return ga, gb

    return _make(out, (a, b), grad_fn)


def _restore_axes(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        return (_restore_axes(np.asarray(g), a.data.shape, axis, keepdims).copy(),)

    return _make(out, (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size / out.size

    def grad_fn(g):
        return (_restore_axes(np.asarray(g), a.data.shape, axis, keepdims) / count,)

    return _make(out, (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.data.shape for t in tensors]
        raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}")
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), grad_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _make(out, (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        lo = float(a.data.min())
        raise ValueError(f"log of non-positive value (min entry {lo}); clamp inputs first")
    out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _make(out, (a,), grad_fn)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def grad_fn(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), grad_fn)


def gelu(a: Tensor) -> Tensor:
    # tanh form; exact enough for a frozen encoder and cheap to differentiate
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * d,)

    return _make(out, (a,), grad_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), grad_fn)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part; compose mul/add for that)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), grad_fn)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, 1e-30)
    out = x / norm

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / norm,)

    return _make(out, (a,), grad_fn)


def masked_fill(a: Tensor, mask) -> Tensor:
    """Add a constant 0 / NEG_INF mask to logits. The mask never gets a gradient."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if isinstance(mask, Tensor) and mask.requires_grad:
        raise ValueError("masked_fill: mask must not require gradients")
    try:
        np.broadcast_shapes(a.data.shape, m.shape)
    except ValueError:
        raise ValueError(f"masked_fill: mask shape {m.shape} does not broadcast to {a.data.shape}")
    out = a.data + m

    def grad_fn(g):
        return (_unbroadcast(g, a.data.shape),)

    return _make(out, (a,), grad_fn)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp built from relu primitives; gradient is 1 inside [lo, hi], 0 outside."""
    if not lo < hi:
        raise ValueError(f"clamp: need lo < hi, got [{lo}, {hi}]")
    return relu(a - lo) - relu(a - hi) + lo


class GradMap:
    """Gradients keyed by node id, one entry per requires-grad leaf."""

    def __init__(self, grads: dict[int, Tensor]):
        self._grads = dict(grads)

    def __len__(self):
        return len(self._grads)

    def __contains__(self, key):
        return self._key(key) in self._grads

    @staticmethod
    def _key(key) -> int:
        return key.node_id if isinstance(key, Tensor) else int(key)

    def __getitem__(self, key) -> Tensor:
        return self._grads[self._key(key)]

    def get(self, key, default=None):
        return self._grads.get(self._key(key), default)

    def keys(self):
        return self._grads.keys()

    def items(self):
        return self._grads.items()

    def subset(self, tensors) -> "GradMap":
        """Restrict to the given parameters; unreachable ones get zero grads."""
        out = {}
        for t in tensors:
            g = self._grads.get(t.node_id)
            out[t.node_id] = g if g is not None else Tensor(np.zeros_like(t.data))
        return GradMap(out)

    def flat(self) -> np.ndarray:
        """Concatenate all gradients in sorted-key order."""
        return np.concatenate(
            [self._grads[k].data.ravel() for k in sorted(self._grads)]
        ) if self._grads else np.zeros(0)


def backward(loss: Tensor) -> GradMap:
    """Reverse pass from a scalar loss. Consumes the graph: interior nodes are
    freed, so a second backward through any of them raises."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any requires-grad tensor")
    if loss._freed:
        raise RuntimeError("backward: graph already consumed by a previous backward")

    # iterative post-order topological sort
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        if node._freed:
            raise RuntimeError("backward: graph already consumed by a previous backward")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(topo):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._grad_fn is None:
            leaves[node.node_id] = Tensor(g)
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            acc = grads.get(parent.node_id)
            grads[parent.node_id] = pg if acc is None else acc + pg
        node._freed = True
        node._parents = ()
        node._grad_fn = None

    return GradMap(leaves)


def finite_diff_check(f, at: Tensor, step: float = 1e-5) -> float:
    """Compare analytic gradients of f against central differences.

    Returns max over coordinates of |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    base = np.array(at.data, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    analytic = backward(f(x)).get(x)
    ga = np.zeros_like(base) if analytic is None else analytic.data

    fd = np.zeros_like(base)
    flat = base.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        hi = f(Tensor((flat + bump).reshape(base.shape))).item()
        lo = f(Tensor((flat - bump).reshape(base.shape))).item()
        fd.ravel()[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(ga))
    return float(np.max(np.abs(ga - fd) / denom)) if flat.size else 0.0
