"""Reverse-mode autodiff over numpy arrays.

Tensors wrap float32 (default) or float64 ndarrays with channels-last
layouts.  Every differentiable op appends a node to the thread-local
Tape; ``backward(loss)`` walks that tape in exact reverse order and
accumulates gradients into ``.grad`` buffers.  Repeated ``backward``
calls without ``zero_grad``/``clear_tape`` accumulate gradients.

Forward/backward over one tape is single-threaded; independent tapes on
separate threads do not interact (the tape is thread-local storage).
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: "Tensor", inputs: tuple, backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops; backward walks it in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, node: _Node):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_STATE = _State()


def active_tape() -> Tape:
    return _STATE.tape


def clear_tape():
    """Drop all recorded ops (frees forward activations)."""
    _STATE.tape.clear()


class no_grad:
    """Context manager that disables op recording."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


def _recording() -> bool:
    return _STATE.grad_enabled


class Tensor:
    """N-dimensional differentiable array."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    # -- introspection -------------------------------------------------
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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- grad management -----------------------------------------------
    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            # leaves own their buffer (callers may += into it across passes);
            # intermediates just reference the pass-local array
            self.grad = np.array(g, dtype=self.data.dtype) if self._node is None else g
        else:
            self.grad = self.grad + g

    def detach(self) -> "Tensor":
        """Value-sharing tensor cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _make(out_data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    track = _recording() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        node = _Node(out, tuple(inputs), backward_fn)
        out._node = node
        _STATE.tape.record(node)
    return out


def _check_finite(arr: np.ndarray, opname: str):
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{opname} produced non-finite values")


def backward(loss: Tensor):
    """Populate ``.grad`` of all requires-grad ancestors of ``loss``.

    ``loss`` must be a scalar (size-1) tensor.  Gradients accumulate
    across repeated calls until cleared.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    if loss._node is None:
        return
    nodes = _STATE.tape.nodes
    try:
        stop = nodes.index(loss._node)
    except ValueError:
        raise UsageError("loss was recorded on a different (or cleared) tape")
    # per-pass gradients are propagated in a local map so that repeated
    # backward calls each contribute exactly one pass worth of gradient
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {}
    for node in reversed(nodes[: stop + 1]):
        g = local.get(id(node.out))
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in local:
                local[key] = local[key] + gi
            else:
                local[key] = gi
                holders[key] = t
    for key, t in holders.items():
        t.accumulate_grad(local[key])


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * np.asarray(s, dtype=a.data.dtype), (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data + np.asarray(s, dtype=a.data.dtype), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum (unlike where) propagates NaN, so poisoned values surface
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.data * a.data.dtype.type(slope))
    return _make(out, (a,), lambda g: (np.where(mask, g, g * a.data.dtype.type(slope)),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form is overflow-free for large |x|
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    s = s.astype(a.data.dtype)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    _check_finite(e, "exp")
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    ad = a.data
    out = np.maximum(ad, 0) + np.log1p(np.exp(-np.abs(ad)))
    sig = 0.5 * (np.tanh(0.5 * ad) + 1.0)
    return _make(out, (a,), lambda g: (g * sig,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    return _make(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, a.data.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int/ellipsis) indexing only; views become copies."""
    out = a.data[idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        return (buf,)

    return _make(np.array(out, copy=True), (a,), bwd)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather for embedding lookups; scatter-add on backward."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        return (buf,)

    return _make(out, (table,), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = axis if axis is None else (tuple(axis) if isinstance(axis, (tuple, list)) else (axis,))
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def bwd(g):
        if ax is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = axis if axis is None else (tuple(axis) if isinstance(axis, (tuple, list)) else (axis,))
    out = a.data.mean(axis=ax, keepdims=keepdims)
    n = a.data.size if ax is None else int(np.prod([a.data.shape[i] for i in ax]))

    def bwd(g):
        if ax is None:
            return (np.broadcast_to(g, a.data.shape).copy() / n,)
        gg = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gg, a.data.shape).copy() / n,)

    return _make(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _make(out, (a, b), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    if not (-ad.ndim <= axis < ad.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {ad.shape}")
    z = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (a,), bwd)


# ---------------------------------------------------------------------------
# spatial ops (channels-last: ..., H, W, C)
# ---------------------------------------------------------------------------

def upsample_nearest2(a: Tensor) -> Tensor:
    """x2 nearest-neighbour upsampling of the (-3, -2) spatial axes."""
    ad = a.data
    out = np.repeat(np.repeat(ad, 2, axis=-3), 2, axis=-2)

    def bwd(g):
        s = g.shape
        gg = g.reshape(s[:-3] + (s[-3] // 2, 2, s[-2] // 2, 2, s[-1]))
        return (gg.sum(axis=(-4, -2)),)

    return _make(out, (a,), bwd)


def avgpool2d(a: Tensor, k: int = 2) -> Tensor:
    """k x k average pooling (stride k) of the (-3, -2) spatial axes."""
    ad = a.data
    H, W = ad.shape[-3], ad.shape[-2]
    if H % k or W % k:
        raise ShapeError(f"avgpool2d needs extents divisible by {k}, got {(H, W)}")
    s = ad.shape
    out = ad.reshape(s[:-3] + (H // k, k, W // k, k, s[-1])).mean(axis=(-4, -2))

    def bwd(g):
        gg = np.expand_dims(np.expand_dims(g, -2), -4)
        gg = np.broadcast_to(gg, g.shape[:-3] + (H // k, k, W // k, k, g.shape[-1]))
        return ((gg / (k * k)).reshape(s).copy(),)

    return _make(out, (a,), bwd)


def _pad_amounts(kernel: tuple, padding: str) -> tuple:
    if padding == "valid":
        return tuple(0 for _ in kernel)
    if padding == "same":
        if any(k % 2 == 0 for k in kernel):
            raise ShapeError(f"'same' padding requires odd kernel extents, got {kernel}")
        return tuple((k - 1) // 2 for k in kernel)
    raise ShapeError(f"padding must be 'valid' or 'same', got {padding!r}")


def _conv_nd(a: Tensor, w: Tensor, stride, padding: str, nd: int) -> Tensor:
    """Shared N-d cross-correlation: a (..., *spatial, Cin), w (*k, Cin, Cout).

    Computed as a sum over kernel offsets of strided-slice matmuls, which
    keeps everything in BLAS without materializing im2col patch buffers.
    """
    ad, wd = a.data, w.data
    ks = wd.shape[:nd]
    cin, cout = wd.shape[nd], wd.shape[nd + 1]
    if ad.ndim < nd + 1:
        raise ShapeError(f"conv{nd}d input needs at least {nd + 1} dims, got shape {ad.shape}")
    if ad.shape[-1] != cin:
        raise ShapeError(f"channel mismatch: input {ad.shape} vs kernel {wd.shape}")
    if isinstance(stride, int):
        stride = (stride,) * nd
    stride = tuple(int(s) for s in stride)
    pads = _pad_amounts(ks, padding)

    lead = ad.shape[: -(nd + 1)]
    spatial = ad.shape[-(nd + 1):-1]
    B = int(np.prod(lead)) if lead else 1
    x = ad.reshape((B,) + spatial + (cin,))
    pad_width = [(0, 0)] + [(p, p) for p in pads] + [(0, 0)]
    xp = np.pad(x, pad_width) if any(pads) else x
    pshape = xp.shape[1:-1]
    oshape = tuple((pshape[i] - ks[i]) // stride[i] + 1 for i in range(nd))
    if any(o < 1 for o in oshape):
        raise ShapeError(
            f"kernel {ks} larger than padded input {pshape} (stride {stride})")

    def _slices(offset):
        return (slice(None),) + tuple(
            slice(offset[i], offset[i] + (oshape[i] - 1) * stride[i] + 1, stride[i])
            for i in range(nd))

    out = np.zeros((B,) + oshape + (cout,), dtype=ad.dtype)
    for offset in np.ndindex(*ks):
        out += xp[_slices(offset)] @ wd[offset]

    def bwd(g):
        g = np.ascontiguousarray(g.reshape((B,) + oshape + (cout,)))
        gm = g.reshape(-1, cout)
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for offset in np.ndindex(*ks):
            sl = _slices(offset)
            gw[offset] = xp[sl].reshape(-1, cin).T @ gm
            gxp[sl] += g @ wd[offset].T
        crop = (slice(None),) + tuple(slice(pads[i], pads[i] + spatial[i]) for i in range(nd))
        gx = gxp[crop] if any(pads) else gxp
        return (gx.reshape(ad.shape), gw)

    return _make(out.reshape(lead + oshape + (cout,)), (a, w), bwd)


def conv2d(a: Tensor, w: Tensor, stride=1, padding: str = "same") -> Tensor:
    """Cross-correlation over (..., H, W, Cin) with kernel (kh, kw, Cin, Cout)."""
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-d (kh, kw, Cin, Cout), got {w.data.shape}")
    return _conv_nd(a, w, stride, padding, nd=2)


def conv3d(a: Tensor, w: Tensor, stride=1, padding: str = "same") -> Tensor:
    """Cross-correlation over (..., T, H, W, Cin) with kernel (kt, kh, kw, Cin, Cout)."""
    if w.data.ndim != 5:
        raise ShapeError(f"conv3d kernel must be 5-d (kt, kh, kw, Cin, Cout), got {w.data.shape}")
    return _conv_nd(a, w, stride, padding, nd=3)


# ---------------------------------------------------------------------------
# convenience constructors
# ---------------------------------------------------------------------------

def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def constant(arr, dtype=None) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=False)
