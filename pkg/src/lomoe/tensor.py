"""Dense tensors with tape-based reverse-mode differentiation.

Tensors wrap a numpy array. Every op that touches a tensor with
``requires_grad=True`` records a closure on the output; :func:`backward`
walks the recorded graph in reverse topological order and deposits
gradients on the leaves.

Storage defaults to float32. :func:`precision` switches the dtype used for
newly created tensors (float64 is what the finite-difference checks run in).
"""

from __future__ import annotations

import contextlib
import hashlib
import math

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, NumericalError, ShapeError

_state = {"dtype": np.float32, "grad": True, "check_finite": True}

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _raise_not_scalar(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False, name=None):
    return Tensor(np.zeros(shape, dtype=_state["dtype"]), requires_grad, name)


def ones(shape, requires_grad=False, name=None):
    return Tensor(np.ones(shape, dtype=_state["dtype"]), requires_grad, name)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    if _state["check_finite"] and not np.isfinite(np.sum(data)):
        if not np.all(np.isfinite(data)):
            raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def _dot(a, b):
    """Matrix product; float32 operands are accumulated in float64, then rounded once."""
    if a.dtype == np.float32 and b.dtype == np.float32:
        return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(np.float32)
    return np.matmul(a, b)


def _check_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _wrap(a), _wrap(b)
    _check_matmul(a, b)
    if b.ndim == 2 and a.ndim > 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = _dot(a2, b.data).reshape(*lead, b.shape[-1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = _dot(g2, b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = _dot(a2.T, g2) if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw, "matmul")
    try:
        out = _dot(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def bw(g):
        ga = _unbroadcast(_dot(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(_dot(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x, w):
    """``x @ w.T`` with ``w`` stored as (out_features, in_features)."""
    x, w = _wrap(x), _wrap(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = _dot(x2, w.data.T).reshape(*lead, w.shape[0])

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = _dot(g2, w.data).reshape(x.shape) if x.requires_grad else None
        gw = _dot(g2.T, x2) if w.requires_grad else None
        return gx, gw

    return _make(out, (x, w), bw, "linear")


# ------------------------------------------------------------------ shaping


def reshape(a, shape):
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = _wrap(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a):
    """Swap the two trailing axes."""
    a = _wrap(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def index_last(a, j):
    """``a[..., j]``."""
    a = _wrap(a)

    def bw(g):
        full = np.zeros_like(a.data)
        if np.ndim(j):
            np.add.at(np.moveaxis(full, -1, 0), np.asarray(j), np.moveaxis(g, -1, 0))
        else:
            full[..., j] = g
        return (full,)

    return _make(a.data[..., j], (a,), bw, "index_last")


def concat(tensors, axis=-1):
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _make(out, tuple(tensors), bw, "concat")


def index_rows(a, idx):
    """Select rows ``a[idx]`` along the first axis."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "index_rows")


def scatter_rows(parts, indices, n_rows):
    """Inverse of :func:`index_rows` for a partition of ``range(n_rows)``."""
    parts = [_wrap(p) for p in parts]
    indices = [np.asarray(i, dtype=np.intp) for i in indices]
    tail = next((p.shape[1:] for p in parts if p.ndim), ())
    out = np.zeros((n_rows, *tail), dtype=parts[0].data.dtype if parts else _state["dtype"])
    for p, i in zip(parts, indices):
        out[i] = p.data

    def bw(g):
        return tuple(g[i] if p.requires_grad else None for p, i in zip(parts, indices))

    return _make(out, tuple(parts), bw, "scatter_rows")


# --------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.data.dtype), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# -------------------------------------------------------------- elementwise


def exp(a):
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def gelu(a):
    """Exact GeLU, ``x * Phi(x)`` with the erf-based normal CDF."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), bw, "gelu")


def sigmoid(a):
    a = _wrap(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(a, axis=-1):
    a = _wrap(a)
    _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = _wrap(a)
    _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(a, eps=1e-5):
    """Normalise over the last axis (no affine parameters)."""
    a = _wrap(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y.astype(x.dtype, copy=False), (a,), bw, "layer_norm")


def _check_axis(a, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ContractError(f"axis {axis} out of range for shape {a.shape}")


# ----------------------------------------------------------------- backward


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and clear the tape."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward() needs a scalar tensor")
    if not loss.requires_grad:
        raise ContractError("loss is not on an active tape")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node.requires_grad = False


# ---------------------------------------------------------------------- rng

_MASK64 = (1 << 64) - 1


def _derive_key(*parts):
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Counter-based generator: Philox4x64 words, Box-Muller normals.

    A generator is identified by ``(seed, stream)``; ``counter`` is the
    number of 64-bit words drawn so far, which is all that is needed to
    restore its position.
    """

    algorithm = "philox4x64-boxmuller-v1"

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)
        self.counter = 0

    def raw(self, n):
        self.counter += int(n)
        return self._bits.random_raw(int(n))

    def uniform(self, size):
        n = int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(size)

    def normal(self, size):
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(size)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    def integers(self, low, high, size=None):
        shape = () if size is None else size
        out = low + np.floor(self.uniform(shape) * (high - low)).astype(np.int64)
        return int(out) if size is None else out

    def spawn(self, *labels):
        """Independent child stream keyed by ``labels``."""
        return Rng(self.seed, _derive_key(self.stream, *labels))

    def state(self):
        return {"algorithm": self.algorithm, "seed": self.seed,
                "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state):
        if state.get("algorithm", cls.algorithm) != cls.algorithm:
            raise ContractError(f"unknown rng algorithm {state['algorithm']!r}")
        rng = cls(state["seed"], state["stream"])
        left = int(state["counter"])
        while left:
            step = min(left, 1 << 20)
            rng.raw(step)
            left -= step
        return rng


def randn(shape, rng, sigma=1.0, requires_grad=False, name=None):
    """i.i.d. N(0, sigma^2) samples drawn from ``rng``."""
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    z = rng.normal(tuple(shape)) * sigma
    return Tensor(z, requires_grad=requires_grad, name=name)
