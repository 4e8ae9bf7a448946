"""Dense float64 tensors with tape-free reverse-mode differentiation.

Each :class:`Tensor` produced by an op that has a differentiable input keeps
references to its parents and a closure mapping the output cotangent to one
cotangent per parent. :func:`backward` walks the resulting DAG in reverse
topological order, visiting every node once.

There is no broadcasting. The shape rules are:

* ``add``, ``sub``, ``mul``, ``mse_loss``: identical shapes.
* ``bias_add(x, b)``: ``b.shape == x.shape[-1:]``.
* ``matmul(a, b)``: ``a`` is ``(..., n, k)``; ``b`` is either ``(k, m)``
  (shared right operand) or ``(..., k, m)`` with the same leading extents.
* ``expand(x, axis, n)``: inserts a new axis of extent ``n`` (explicit repeat).
* ``softmax``, ``layer_norm``, ``power_normalize``, ``l2_normalize``: last axis.
"""
from contextlib import contextmanager

import numpy as np

from . import kernels

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
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
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        raise TypeError("use slice()/take() for indexing tensors")


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def bias_add(x, b):
    x, b = as_tensor(x), as_tensor(b)
    if b.shape != x.shape[-1:]:
        raise ShapeError(f"bias_add: shape mismatch {x.shape} vs {b.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "bias_add")


def sigmoid(x):
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    y, t = kernels.gelu_fwd(xd)
    return _make(y, (x,), lambda g: (kernels.gelu_bwd(g, xd, t),), "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need >=2-d operands, got {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, m = bd.shape

        def bwd(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m) if b.requires_grad else None
            return ga, gb

        return _make(ad @ bd, (a, b), bwd, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ {a.shape} vs {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bwd, "matmul")


def transpose(x):
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose: need >=2-d operand, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bwd, "concat")


def slice_(x, axis, start, stop):
    """Contiguous slice ``[start:stop]`` along one axis."""
    x = as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for {x.shape} axis {axis}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    src = x.shape

    def bwd(g):
        out = np.zeros(src)
        out[idx] = g
        return (out,)

    return _make(x.data[idx], (x,), bwd, "slice")


def take(x, indices):
    """Row-wise gather on the last axis: ``out[r, j] = x[r, indices[r, j]]``.

    ``x`` is ``(rows, n)`` and ``indices`` an integer array ``(rows, m)``.
    """
    x = as_tensor(x)
    indices = np.asarray(indices)
    if x.ndim != 2 or indices.ndim != 2 or indices.shape[0] != x.shape[0]:
        raise ShapeError(f"take: shape mismatch {x.shape} vs {indices.shape}")
    src = x.shape

    def bwd(g):
        out = np.zeros(src)
        np.add.at(out, (np.arange(src[0])[:, None], indices), g)
        return (out,)

    return _make(np.take_along_axis(x.data, indices, axis=1), (x,), bwd, "take")


def expand(x, axis, n):
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    x = as_tensor(x)
    ax = axis % (x.ndim + 1)
    y = np.repeat(np.expand_dims(x.data, ax), n, axis=ax)
    return _make(y, (x,), lambda g: (g.sum(axis=ax),), "expand")


def straight_through_zero(x):
    """Forward: zeros of ``x.shape``. Backward: identity (straight-through)."""
    x = as_tensor(x)
    return _make(np.zeros(x.shape), (x,), lambda g: (g,), "straight_through_zero")


# ---------------------------------------------------------------------------
# reductions


def sum_(x, axis=None):
    x = as_tensor(x)
    src = x.shape
    if axis is None:
        return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(src, float(g)),), "sum")
    ax = axis % x.ndim
    return _make(x.data.sum(axis=ax), (x,),
                 lambda g: (np.repeat(np.expand_dims(g, ax), src[ax], axis=ax),), "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    src = x.shape
    if axis is None:
        n = x.size
        return _make(np.array(x.data.mean()), (x,),
                     lambda g: (np.full(src, float(g) / n),), "mean")
    ax = axis % x.ndim
    n = src[ax]
    return _make(x.data.mean(axis=ax), (x,),
                 lambda g: (np.repeat(np.expand_dims(g / n, ax), n, axis=ax),), "mean")


# ---------------------------------------------------------------------------
# row-wise normalizations


def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def softmax(x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax: empty last axis {x.shape}")
    src = x.shape
    y = kernels.softmax_fwd(_rows(x.data))
    return _make(y.reshape(src), (x,),
                 lambda g: (kernels.softmax_bwd(_rows(g), y).reshape(src),), "softmax")


def layer_norm(x, gain, bias, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance, then ``* gain + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"layer_norm: empty last axis {x.shape}")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: shape mismatch {x.shape} vs {gain.shape}/{bias.shape}")
    src = x.shape
    gd = np.ascontiguousarray(gain.data)
    out, xhat, rstd = kernels.layer_norm_fwd(_rows(x.data), gd,
                                             np.ascontiguousarray(bias.data), float(eps))

    def bwd(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(_rows(g), xhat, rstd, gd)
        return dx.reshape(src), dgain, dbias

    return _make(out.reshape(src), (x, gain, bias), bwd, "layer_norm")


def power_normalize(x):
    """Scale each row (last axis, length m) so that ``sum(row**2) == m``."""
    x = as_tensor(x)
    xd = x.data
    m = xd.shape[-1]
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    c = np.sqrt(m) / norm
    y = xd * c

    def bwd(g):
        # d(c x)/dx = c (I - x x^T / |x|^2)
        proj = (g * xd).sum(axis=-1, keepdims=True) / (norm * norm)
        return (c * (g - xd * proj),)

    return _make(y, (x,), bwd, "power_normalize")


def l2_normalize(x):
    """Scale each row (last axis) to unit Euclidean norm."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    y = xd / norm

    def bwd(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), bwd, "l2_normalize")


def mse_loss(x, y):
    """Mean over all entries of ``(x - y)**2``."""
    x, y = as_tensor(x), as_tensor(y)
    _check_same("mse_loss", x, y)
    diff = x.data - y.data
    n = diff.size
    c = 2.0 / n

    def bwd(g):
        gx = float(g) * c * diff
        return gx, -gx

    return _make(np.array((diff * diff).mean()), (x, y), bwd, "mse_loss")


# ---------------------------------------------------------------------------
# differentiation


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


def backward(loss, wrt=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Populates ``.grad`` on every leaf reached. When ``wrt`` is given, returns a
    list of gradients aligned with it; leaves the loss does not depend on get
    exact zero arrays.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {}
    if loss.requires_grad:
        order = _toposort(loss)
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(order):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if wrt is None:
        return None
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros(t.shape) if g is None else g)
    return out


def grad(loss, wrt):
    """Gradients of ``loss`` w.r.t. each tensor in ``wrt`` (no ``.grad`` side effects)."""
    saved = [t.grad for t in wrt]
    result = backward(loss, wrt)
    for t, s in zip(wrt, saved):
        t.grad = s
    return result
