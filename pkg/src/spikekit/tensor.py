"""Dense float tensors with a define-by-run reverse-mode autodiff tape.

Every differentiable primitive builds its output through :func:`_result`,
which records a :class:`Node` on the active :class:`Tape` when any input
requires gradients. :func:`backward` walks the recorded nodes in reverse
creation order, so each node is visited once, after all of its consumers.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DimensionError, UsageError

_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.dtype(np.float32)
        _state.grad_enabled = True
        _state.tapes = [Tape()]
    return _state


def get_default_dtype() -> np.dtype:
    return _st().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported float dtype {dtype}")
    _st().dtype = dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the float precision (float64 is used by gradient checks)."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def is_grad_enabled() -> bool:
    return _st().grad_enabled


@contextmanager
def no_grad():
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable, seq: int):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = seq

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tape:
    """Ordered record of autodiff nodes.

    Sequence numbers increase monotonically, which gives a topological
    order by construction. With ``retain=True`` the tape also keeps a list
    of its nodes for inspection; the default tape does not, so finished
    graphs are freed as soon as their tensors are.
    """

    _ids = itertools.count()

    def __init__(self, retain: bool = False):
        self.retain = retain
        self.nodes: list[Node] = []
        self._seq = itertools.count()
        self.id = next(Tape._ids)

    def record(self, op, inputs, backward_fn) -> Node:
        node = Node(op, inputs, backward_fn, next(self._seq))
        if self.retain:
            self.nodes.append(node)
        return node

    def clear(self):
        self.nodes.clear()


@contextmanager
def recording(tape: Tape):
    """Make ``tape`` the active tape for ops issued inside the block."""
    st = _st()
    st.tapes.append(tape)
    try:
        yield tape
    finally:
        st.tapes.pop()


def current_tape() -> Tape:
    return _st().tapes[-1]


class Tensor:
    """Float tensor participating in reverse-mode autodiff."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __rtruediv__(self, other):
        return mul(_lift(other, self), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    # -- reductions and shape ops -----------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def backward(self, grad=None):
        backward(self, grad)


DenseTensor = Tensor


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = current_tape().record(op, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``."""
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise UsageError("backward called on a tensor that is not attached to any graph")
    if grad is None:
        if loss.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    grad = np.asarray(grad, dtype=loss.dtype)

    if loss._node is None:
        loss.grad = grad if loss.grad is None else loss.grad + grad
        return

    nodes, seen, stack = [], set(), [loss._node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append(t._node)
    nodes.sort(key=lambda n: n.seq, reverse=True)

    pending = {id(loss._node): grad}
    for node in nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is not None:
                key = id(t._node)
                pending[key] = gi if key not in pending else pending[key] + gi
            else:
                gi = np.asarray(gi, dtype=t.dtype)
                t.grad = gi.copy() if t.grad is None else t.grad + gi


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), bw, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return _result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    factor = np.where(pos, 1.0, slope).astype(a.dtype)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _result((x * cdf).astype(x.dtype), (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


# -- reductions and shape ops ---------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def index(a: Tensor, key) -> Tensor:
    if isinstance(key, Tensor):
        key = key.data
    out = a.data[key]

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), bw, "index")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather slices along ``axis`` (the gradient scatters back with add)."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(out, (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, src),), "broadcast")


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction over the last axis of ``a`` and second-last of ``b``."""
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


matmul_dense = matmul


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)
    return _result(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise DimensionError(f"logits {logits.shape} do not match labels {labels.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = index(lp, (np.arange(len(labels)), labels))
    return -picked.mean()


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    w, b = weight.data, bias.data
    out = xhat * w + b

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * w
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out.astype(xd.dtype), (x, weight, bias), bw, "layer_norm")


# -- convolution family ---------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. ``x`` is [B, C, H, W], ``w`` is [O, C, kh, kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    bsz, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {cw}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output extent {ho}x{wo} is not positive")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _windows(xp, kh, kw, stride, ho, wo)  # [B, C, Ho, Wo, kh, kw]
    wd_ = w.data
    out = np.tensordot(cols, wd_, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gcols = np.tensordot(g, wd_, axes=([1], [0]))  # [B, Ho, Wo, C, kh, kw]
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                        j : j + stride * (wo - 1) + 1 : stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Window maximum over [B, C, H, W]; ties route the gradient to the first maximum."""
    stride = stride or k
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects [B, C, H, W], got {x.shape}")
    bsz, c, h, w = x.shape
    if h < k or w < k or (h - k) % stride or (w - k) % stride:
        raise DimensionError(f"maxpool2d: {h}x{w} incompatible with k={k}, stride={stride}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = _windows(x.data, k, k, stride, ho, wo).reshape(bsz, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        di, dj = np.divmod(arg, k)
        bi, ci, oi, oj = np.indices(arg.shape, sparse=False)
        np.add.at(gx, (bi, ci, oi * stride + di, oj * stride + dj), g)
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


def batch_norm(x: Tensor, weight: Tensor, bias: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5, axis: int = 1, mask: np.ndarray | None = None) -> Tensor:
    """Per-channel normalisation along ``axis``.

    ``mask`` (boolean, broadcastable to ``x`` with the channel axis of size 1)
    restricts the batch statistics to visible positions and zeroes the output
    elsewhere. Running statistics are updated in place in training mode.
    """
    axis = axis % x.ndim
    c = x.shape[axis]
    if running_mean.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels but state holds {running_mean.shape[0]}")
    red = tuple(i for i in range(x.ndim) if i != axis)
    bshape = [1] * x.ndim
    bshape[axis] = c
    xd = x.data
    gam = weight.data.reshape(bshape)
    bet = bias.data.reshape(bshape)
    m = None
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        mf = m.astype(xd.dtype)

    if training:
        if m is None:
            n = xd.size // c
            mu = xd.mean(axis=red, keepdims=True)
            var = ((xd - mu) ** 2).mean(axis=red, keepdims=True)
        else:
            n = int(m.sum() // c)
            if n == 0:
                raise DimensionError("batch_norm: mask hides every position")
            mu = (xd * mf).sum(axis=red, keepdims=True) / n
            var = (((xd - mu) * mf) ** 2).sum(axis=red, keepdims=True) / n
        unbiased = var * (n / max(n - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.reshape(c).astype(running_var.dtype)
    else:
        mu = running_mean.reshape(bshape).astype(xd.dtype)
        var = running_var.reshape(bshape).astype(xd.dtype)
        n = None

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gam + bet
    if m is not None:
        out = out * mf
        xhat = xhat * mf

    def bw(g):
        if m is not None:
            g = g * mf
        gw = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx = None
        if x.requires_grad:
            gh = g * gam
            if training:
                s1 = gh.sum(axis=red, keepdims=True) / n
                s2 = (gh * xhat).sum(axis=red, keepdims=True) / n
                gx = inv * (gh - s1 - xhat * s2)
                if m is not None:
                    gx = gx * mf
            else:
                gx = gh * inv
        return gx, gw, gb

    return _result(out.astype(xd.dtype), (x, weight, bias), bw, "batch_norm")


def upsample_nearest(m, factor: int):
    """Replicate each element of the last two axes into a factor x factor block.

    Accepts a SpikeTensor (returning one) or any array-like.
    """
    from .spike import SpikeTensor

    if factor < 1:
        raise DimensionError(f"upsample factor must be positive, got {factor}")
    if isinstance(m, SpikeTensor):
        return SpikeTensor.from_array(upsample_nearest(m.to_array(), factor))
    arr = np.asarray(m)
    if arr.ndim < 2:
        raise DimensionError("upsample_nearest needs at least 2 dimensions")
    return arr.repeat(factor, axis=-2).repeat(factor, axis=-1)
