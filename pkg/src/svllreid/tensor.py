"""A small dense tensor with reverse-mode gradients.

Only the operations needed by the encoders and losses are provided. Each op
records its parents and a closure mapping the output gradient to parent
gradients; ``backward``/``gradients`` walk the graph in reverse topological
order. Any NaN/Inf produced in either direction raises ``NonFiniteError``.
"""
from __future__ import annotations

import contextlib

import numpy as np

from . import _kernels as K

_state = {"dtype": np.float32, "grad": True}


class NonFiniteError(FloatingPointError):
    pass


def default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    _state["dtype"] = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 checks)."""
    old = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def _check(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what} (shape {np.shape(arr)})")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        if arr.dtype.kind != "f":
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- operators -------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            return mul(self, reciprocal(o))
        return scale(self, 1.0 / o)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return gather(self, idx)

    @property
    def T(self):
        return transpose(self)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        grads = _backprop(self)
        for t, g in grads.items():
            t.grad = g if t.grad is None else t.grad + g


class Parameter(Tensor):
    """A leaf tensor owned by a model; ``trainable`` decides if it joins graphs."""

    __slots__ = ("trainable",)

    def __init__(self, data, trainable=True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    def freeze(self):
        self.trainable = False
        self.requires_grad = False

    def unfreeze(self):
        self.trainable = True
        self.requires_grad = True

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter(shape={self.shape}, trainable={self.trainable})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    _check(data, op)
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a, c):
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def reciprocal(a):
    y = 1.0 / a.data
    return _make(y, (a,), lambda g: (-g * y * y,), "reciprocal")


def exp(a):
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    """Square root whose derivative at exactly 0 is taken as 0."""
    y = np.sqrt(np.maximum(a.data, 0))

    def bw(g):
        safe = np.where(y > 0, y, 1)
        return (np.where(y > 0, g / (2 * safe), 0),)

    return _make(y, (a,), bw, "sqrt")


def relu(a):
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,), "relu")


def gelu(a):
    y = K.gelu_forward(a.data)
    return _make(y.astype(a.dtype, copy=False), (a,),
                 lambda g: (K.gelu_backward(a.data, g),), "gelu")


# -- linear algebra / shape ------------------------------------------------

def matmul(a, b):
    """``a @ b`` for 2-D operands or stacks of matrices with equal batch dims."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), bw, "concat")


def gather(a, idx):
    """Index with ints, slices or integer arrays (numpy semantics)."""
    if isinstance(idx, Tensor):
        raise TypeError("index with an integer ndarray, not a Tensor")

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(a.data[idx]), (a,), bw, "gather")


def stack_rows(tensors):
    """Stack 1-D tensors into a 2-D tensor."""
    return concat([t.reshape(1, -1) for t in tensors], axis=0)


# -- reductions ----------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),),
                 "softmax")


def logsumexp(a, axis=-1):
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)

    def bw(g):
        p = np.exp(a.data - m) / s
        return (np.expand_dims(g, axis) * p,)

    return _make(out, (a,), bw, "logsumexp")


def log_softmax(a, axis=-1):
    lse = logsumexp(a, axis)
    return a - reshape(lse, tuple(np.expand_dims(lse.data, axis).shape))


# -- normalisation -------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5):
    shape = x.shape
    d = shape[-1]
    x2 = x.data.reshape(-1, d)
    out, xhat, rstd = K.layer_norm_forward(x2, gamma.data, beta.data, eps)

    def bw(g):
        dx, dg, db = K.layer_norm_backward(g.reshape(-1, d), xhat, rstd, gamma.data)
        return dx.reshape(shape), dg, db

    return _make(out.reshape(shape), (x, gamma, beta), bw, "layer_norm")


def l2_normalize(x, axis=-1):
    """Scale rows to unit Euclidean norm; zero rows are an error."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise ValueError("cannot normalise a zero vector")
    y = x.data / n
    return _make(y, (x,), lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,),
                 "l2_normalize")


def cosine_similarity(a, b):
    """Matrix of cosines between rows of ``a`` and rows of ``b``."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# -- reverse pass --------------------------------------------------------

def _toposort(root):
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


def _backprop(out):
    if out.data.size != 1 or out.ndim > 1:
        raise ValueError(f"gradients need a scalar output, got shape {out.shape}")
    _check(out.data, "loss")
    grads = {id(out): np.ones_like(out.data)}
    leaves = {}
    for node in reversed(_toposort(out)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            _check(pg, f"gradient of {node._op}")
            pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def gradients(output, params):
    """Exact reverse-mode derivatives of a scalar ``output`` w.r.t. ``params``.

    Parameters that do not influence ``output`` get an all-zero gradient.
    """
    leaves = _backprop(output)
    by_id = {id(t): g for t, g in leaves.items()}
    return [by_id.get(id(p), np.zeros_like(p.data)) for p in params]
