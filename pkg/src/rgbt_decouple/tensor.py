"""Dense float64 tensors with reverse-mode automatic differentiation.

Broadcasting follows a trailing-singleton rule: when operand ranks differ,
the lower-rank shape is padded with trailing 1s, so a ``[N, C]`` channel
vector lines up against an ``[N, C, H, W]`` feature map. After padding,
every axis must match or be 1.
"""

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels

# Names of deliberately broken adjoints, used to check that the gradient
# suite is sensitive to mistakes. Never populated outside tests.
MUTATIONS = set()

# Grad mode is per thread so concurrent evaluation workers cannot leave it
# switched off for the thread that trains.
_mode = threading.local()


def grad_enabled():
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return stop_gradient(self)

    def backward(self):
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t`` that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _result(data, parents, backward, op):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def stop_gradient(x):
    """Same values as ``x``; a graph constant with no upstream edges."""
    return Tensor(as_tensor(x).data, requires_grad=False)


# -- broadcasting ---------------------------------------------------------

def _padded(shape, rank):
    return tuple(shape) + (1,) * (rank - len(shape))


def broadcast_shape(sa, sb):
    rank = max(len(sa), len(sb))
    pa, pb = _padded(sa, rank), _padded(sb, rank)
    out = []
    for i, (x, y) in enumerate(zip(pa, pb)):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"cannot broadcast shapes {tuple(sa)} and {tuple(sb)} (axis {i}: {x} vs {y})")
    return pa, pb, tuple(out)


def _unbroadcast(g, shape):
    padded = _padded(shape, g.ndim)
    axes = tuple(i for i, (p, s) in enumerate(zip(padded, g.shape)) if p == 1 and s != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b):
    a, b = as_tensor(a), as_tensor(b)
    pa, pb, _ = broadcast_shape(a.shape, b.shape)
    return a, b, a.data.reshape(pa), b.data.reshape(pb)


# -- elementwise ----------------------------------------------------------

def add(a, b):
    a, b, x, y = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _result(x + y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b, x, y = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _result(x - y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b, x, y = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _result(x * y, (a, b), lambda g: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)), "mul")


def scalar_mul(a, s):
    return mul(a, float(s))


def sigmoid(x):
    x = as_tensor(x)
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)

    def backward(g):
        d = g * s * (1.0 - s)
        return (-d if "sigmoid" in MUTATIONS else d,)

    return _result(s, (x,), backward, "sigmoid")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    x = as_tensor(x)
    bad = ~(x.data > 0)
    if bad.any():
        idx = np.unravel_index(int(np.argmax(bad)), x.shape)
        raise DomainError(f"log of non-positive value {x.data[idx]!r} at index {tuple(int(i) for i in idx)}")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def abs_(x):
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def square(x):
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


# -- reductions and shape ---------------------------------------------------

def sum_(x, axis=None):
    x = as_tensor(x)
    shape = x.shape
    y = x.data.sum(axis=axis, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g.reshape(y.shape), shape).copy(),)

    out_shape = () if axis is None else np.squeeze(y, axis=axis).shape
    return _result(y.reshape(out_shape), (x,), backward, "sum")


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return _result(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def _norm_axis(axis, ndim):
    if axis == "spatial":
        if ndim < 2:
            raise ShapeError("spatial softmax needs at least 2 dims")
        return axis
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise ShapeError(f"invalid softmax axis {axis!r} for rank {ndim}")
    return int(axis) % ndim


def softmax(x, axis=-1):
    """Softmax along ``axis``; ``axis="spatial"`` normalises over the flattened last two dims."""
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    if axis == "spatial":
        shape = x.shape
        flat = reshape(x, shape[:-2] + (shape[-2] * shape[-1],))
        return reshape(softmax(flat, -1), shape)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    s = np.exp(y)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


# -- feature-map ops on [..., C, H, W] -----------------------------------------

def _check_map(x, name):
    if x.ndim < 3:
        raise ShapeError(f"{name} expects [..., C, H, W], got {x.shape}")
    if x.shape[-1] * x.shape[-2] < 1:
        raise ShapeError(f"{name} needs H*W >= 1")


def global_avg_pool(f):
    f = as_tensor(f)
    _check_map(f, "global_avg_pool")
    return mean(f, axis=(-2, -1))


def global_max_pool(f):
    """Per-channel max; the adjoint goes to the first row-major argmax."""
    f = as_tensor(f)
    _check_map(f, "global_max_pool")
    shape = f.shape
    flat = f.data.reshape(shape[:-2] + (-1,))
    idx = np.argmax(flat, axis=-1)[..., None]
    y = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def backward(g):
        d = np.zeros_like(flat)
        np.put_along_axis(d, idx, g[..., None], axis=-1)
        return (d.reshape(shape),)

    return _result(y, (f,), backward, "global_max_pool")


def concat(tensors, axis=-3):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def slice_channels(x, start, stop):
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        d = np.zeros(shape)
        d[..., start:stop, :, :] = g
        return (d,)

    return _result(x.data[..., start:stop, :, :].copy(), (x,), backward, "slice_channels")


def channel_mul(v, f):
    """Channel-wise scaling: ``v[..., C]`` against ``f[..., C, H, W]``."""
    v, f = as_tensor(v), as_tensor(f)
    if v.shape != f.shape[:-2]:
        raise ShapeError(f"channel_mul: vector {v.shape} does not index the channels of {f.shape}")
    return mul(v, f)


def conv3x3(x, w, b, stride=1):
    """3x3 convolution, zero padding 1, via patch gather and one matmul.

    ``x`` is ``[N, C, H, W]``, ``w`` is ``[Cout, C, 3, 3]``, ``b`` is ``[Cout]``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3):
        raise ShapeError(f"conv3x3: input {x.shape} incompatible with weight {w.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv3x3 supports stride 1 or 2, got {stride}")
    n, c, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    cols = kernels.im2col(x.data, stride)
    wmat = w.data.reshape(cout, c * 9)
    y = wmat @ cols + b.data[:, None]
    out = y.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gx = kernels.col2im(wmat.T @ gm, (n, c, h, wd), stride) if x.requires_grad else None
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=1) if b.requires_grad else None
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, w, b), backward, "conv3x3")


def conv1x1(x, w, b):
    """1x1 convolution over ``[N, C, H, W]`` as a matmul on ``[N*H*W, C]`` rows.

    ``w`` is ``[C, Cout]`` and ``b`` is ``[1, Cout]``.
    """
    x = as_tensor(x)
    n, c, h, wd = x.shape
    rows = reshape(transpose(x, (0, 2, 3, 1)), (n * h * wd, c))
    y = matmul(rows, w) + b
    return transpose(reshape(y, (n, h, wd, -1)), (0, 3, 1, 2))


def upsample2x(x):
    """Nearest-neighbour x2 upsampling of ``[..., H, W]``."""
    x = as_tensor(x)
    shape = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def backward(g):
        return (g.reshape(shape[:-2] + (shape[-2], 2, shape[-1], 2)).sum(axis=(-3, -1)),)

    return _result(y, (x,), backward, "upsample2x")


def pixel_shuffle2x(x):
    """Rearrange ``[N, 4K, h, w]`` into ``[N, K, 2h, 2w]`` (sub-pixel upsampling)."""
    x = as_tensor(x)
    n, c4, h, w = x.shape
    if c4 % 4:
        raise ShapeError(f"pixel_shuffle2x needs channels divisible by 4, got {c4}")
    k = c4 // 4
    y = transpose(reshape(x, (n, k, 2, 2, h, w)), (0, 1, 4, 2, 5, 3))
    return reshape(y, (n, k, 2 * h, 2 * w))


def pick(logp, label, axis=-3):
    """Gather ``logp`` at integer ``label`` along the class axis.

    ``logp`` is ``[..., K, H, W]`` and ``label`` is ``[..., H, W]``.
    """
    logp = as_tensor(logp)
    label = np.asarray(label)
    ax = axis % logp.ndim
    idx = np.expand_dims(label, ax)
    y = np.take_along_axis(logp.data, idx, axis=ax).squeeze(ax)
    shape = logp.shape

    def backward(g):
        d = np.zeros(shape)
        np.put_along_axis(d, idx, np.expand_dims(g, ax), axis=ax)
        return (d,)

    return _result(y, (logp,), backward, "pick")


def clamp_min(x, lo):
    x = as_tensor(x)
    keep = x.data > lo
    return _result(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,), "clamp_min")
