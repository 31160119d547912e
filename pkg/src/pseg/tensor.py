"""Dense arrays with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node holding their parents and a closure mapping the
output gradient to one gradient per parent. :func:`backward` walks the
recorded graph in reverse topological order and accumulates into the
``grad`` of every leaf that requires it.

Broadcasting is restricted to scalars and trailing-dimension suffixes
(``(d, h, w) op (h, w)``) so every backward rule stays a plain sum over
leading axes.
"""

import contextlib
import os

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32

_debug = os.environ.get("PSEG_DEBUG") == "1"
_grad_enabled = True

# Test hook for the gradient oracle: names of ops whose backward is scaled wrong.
_corrupted = set()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag):
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        if _debug and not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite values in tensor data")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        if op in _corrupted:
            inner = backward_fn

            def backward_fn(g):
                return tuple(None if x is None else 1.5 * x for x in inner(g))

        out._backward = backward_fn
    else:
        out.op = op
    return out


# -- broadcasting -----------------------------------------------------------


def _check_broadcast(sa, sb):
    if sa == sb or sa == () or sb == ():
        return
    short, long = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long[len(long) - len(short) :] != short:
        raise ShapeError(f"shapes {sa} and {sb} are not trailing-broadcast compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("tensor division by zero")
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def scalar_mul(a, s):
    s = float(s)
    return _make(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),), "scalar_mul")


def abs(a):  # noqa: A001 - mirrors the op name
    sign = np.sign(a.data)  # subgradient 0 at exactly 0
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def square(a):
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def sqrt(a):
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore"):
            return (g / (2 * out),)

    return _make(out, (a,), bw, "sqrt")


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def leaky_relu(a, slope=0.01):
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


# -- reductions -------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(ax % ndim for ax in axis))
    if len(set(axes)) != len(axes) or any(ax >= ndim or ax < 0 for ax in axes):
        raise ValueError(f"invalid axes {axis} for rank {ndim}")
    return axes


def _check_nonempty(a, axes, op):
    if any(a.shape[i] == 0 for i in axes):
        raise ShapeError(f"{op} over an empty axis of shape {a.shape}")


def _expand(g, shape, axes):
    kept = [1 if i in axes else n for i, n in enumerate(shape)]
    return np.broadcast_to(g.reshape(kept), shape)


def reduce_sum(a, axis=None):
    axes = _norm_axes(axis, a.ndim)
    _check_nonempty(a, axes, "sum")
    shape = a.shape
    out = a.data.sum(axis=axes)
    return _make(np.asarray(out), (a,), lambda g: (np.array(_expand(g, shape, axes)),), "sum")


def reduce_mean(a, axis=None):
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    _check_nonempty(a, axes, "mean")
    n = int(np.prod([shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes)
    return _make(np.asarray(out, dtype=a.dtype), (a,), lambda g: (np.array(_expand(g, shape, axes)) / n,), "mean")


def reduce_max(a, axis=None):
    axes = _norm_axes(axis, a.ndim)
    _check_nonempty(a, axes, "max")
    rest = [i for i in range(a.ndim) if i not in axes]
    moved = np.transpose(a.data, rest + list(axes))
    flat = moved.reshape([a.shape[i] for i in rest] + [-1])
    idx = np.argmax(flat, axis=-1)  # first maximum
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def bw(g):
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, idx[..., None], np.asarray(g)[..., None], axis=-1)
        unmoved = onehot.reshape(moved.shape)
        return (np.transpose(unmoved, np.argsort(rest + list(axes))).reshape(shape),)

    return _make(np.asarray(out), (a,), bw, "max")


def reduce(op, a, axis=None):
    fn = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}[op]
    return fn(a, axis)


# -- linear algebra and shape ops -------------------------------------------


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dims {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def getitem(a, index):
    shape, dtype = a.shape, a.dtype

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), bw, "getitem")


def take(a, idx, axis=-1):
    """Gather along one axis with an integer index array (duplicates accumulate)."""
    idx = np.asarray(idx, dtype=np.intp)
    axis = axis % a.ndim
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(a.data, idx, axis=axis), (a,), bw, "take")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def elementwise(op, a, b=None):
    """Dispatch by name; unary ops ignore ``b``."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"abs": abs, "tanh": tanh, "square": square, "sqrt": sqrt, "exp": exp, "log": log}
    if op in binary:
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    if op == "scalar-mul":
        return scalar_mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- convolution and resampling ---------------------------------------------


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of a (c_in, h, w) input with a (c_out, c_in, k, k) kernel."""
    if padding == "same":
        padding = kernel.shape[-1] // 2
    c, h, w = x.shape
    co, ci, k, k2 = kernel.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d input {x.shape} vs kernel {kernel.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[1:]
    cols = kernels.im2col(xp, k, stride, ho, wo)
    wmat = kernel.data.reshape(co, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(co, ho, wo)

    def bw(g):
        g2 = g.reshape(co, -1)
        gw = (g2 @ cols.T).reshape(kernel.shape)
        gcols = wmat.T @ g2
        gx = kernels.col2im(gcols, c, hp, wp, k, stride, ho, wo)
        if padding:
            gx = gx[:, padding : padding + h, padding : padding + w]
        grads = (gx, gw)
        if bias is not None:
            grads += (g2.sum(axis=1),)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, bw, "conv2d")


def _interp_matrix(n_out, n_in, mode, dtype):
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if mode == "nearest":
        src = np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)
        m[np.arange(n_out), src] = 1.0
    elif mode == "bilinear":
        # half-pixel centers, clamped at the borders
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        np.add.at(m, (np.arange(n_out), lo), 1 - frac)
        np.add.at(m, (np.arange(n_out), hi), frac)
    elif mode == "average-pool":
        if n_in % n_out:
            raise ShapeError(f"average-pool needs an integer factor ({n_in} -> {n_out})")
        f = n_in // n_out
        for i in range(n_out):
            m[i, i * f : (i + 1) * f] = 1.0 / f
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return m.astype(dtype)


def resample(x, target, mode="bilinear"):
    """Resize the trailing two axes of a (c, h, w) or (h, w) tensor.

    Every mode is a separable linear map ``R_h @ x @ R_w^T``.
    """
    th, tw = target
    if th < 1 or tw < 1:
        raise ShapeError("resample target must be at least 1x1")
    h, w = x.shape[-2:]
    rh = _interp_matrix(th, h, mode, x.dtype)
    rw = _interp_matrix(tw, w, mode, x.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(rh.T, g), rw),), f"resample_{mode}")


def avg_pool2(x):
    h, w = x.shape[-2:]
    return resample(x, (h // 2, w // 2), "average-pool")


# -- backward ---------------------------------------------------------------


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
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad."""
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to a graph")
    grads = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# -- optimizer --------------------------------------------------------------


class AdamState:
    """First/second moments and step count, keyed by parameter name."""

    def __init__(self, params=None):
        self.t = 0
        self.m = {}
        self.v = {}
        for name, p in (params or {}).items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in place on ``params`` (dict name -> Tensor)."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        dt = p.data.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        mhat = m / dt(1 - beta1**t)
        vhat = v / dt(1 - beta2**t)
        p.data = p.data - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))


def clear_corruption():
    _corrupted.clear()


def corrupt_backward(op):
    """Deliberately scale the backward of ``op`` by 1.5 (gradient-oracle self test)."""
    _corrupted.add(op)
