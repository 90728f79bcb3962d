"""Reverse-mode automatic differentiation over dense numpy arrays.

Every value in the pipeline is a `Tensor` wrapping a numpy array. Operations
build an implicit computation graph through parent links; `backward` walks the
graph once in reverse topological order and returns gradients for every
parameter that participates. Two precisions are supported: float32 (training
default) and float64 (gradient checking), switched with the `precision`
context manager.

Non-finite values (NaN/Inf) are rejected at every operation boundary, naming
the offending node, so numerical blow-ups surface where they happen instead of
three modules later.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "NonFiniteError",
    "precision",
    "no_grad",
    "default_dtype",
    "backward",
    "grad",
    "make_op",
    "add",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "rows",
    "relu",
    "exp",
    "log",
    "clip",
    "softplus",
    "conv2d",
    "maxpool2x2",
    "tsum",
    "tmean",
    "logsumexp",
    "softmax",
    "pick",
]

_state = threading.local()


def _dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def default_dtype():
    """Current default scalar dtype (float32 unless inside `precision`)."""
    return _dtype()


@contextlib.contextmanager
def precision(name):
    """Switch the default dtype: precision("float64") for gradient checks."""
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported precision {name!r}")
    prev = _dtype()
    _state.dtype = np.float32 if name == "float32" else np.float64
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; forward values only."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class NonFiniteError(RuntimeError):
    """A NaN or Inf appeared at an operation boundary."""

    def __init__(self, op, node_id, phase="forward"):
        super().__init__(f"non-finite values in {phase} of op {op!r} (node {node_id})")
        self.op = op
        self.node_id = node_id


_counter = itertools.count()


class Tensor:
    """Dense n-dimensional array participating in the differentiation graph.

    `data` is always a numpy array; `grad` is populated for leaf parameters by
    `backward`. Non-leaf tensors carry the op name, their parents, and a
    closure computing parent gradients from the output gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, dtype=None, op="leaf", _parents=(), _bw=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data  # float arrays keep their precision
        else:
            # python scalars/lists and integer arrays take the context default
            arr = np.asarray(data, dtype=_dtype())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(op, -1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = next(_counter)
        self.op = op
        self._parents = _parents
        self._bw = _bw

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
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalar/array constants adopt this tensor's dtype
    def __add__(self, other):
        return add(self, _wrap_like(other, self))

    def __radd__(self, other):
        return add(_wrap_like(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap_like(other, self))

    def __rmul__(self, other):
        return mul(_wrap_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap_like(other, self)))

    def __rsub__(self, other):
        return add(_wrap_like(other, self), neg(self))

    def __matmul__(self, other):
        return matmul(self, _wrap_like(other, self))

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _wrap_like(x, ref):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=ref.data.dtype)


def _make(data, op, parents, bw):
    """Build an op-output tensor; wire the graph only when a grad path exists."""
    arr = np.asarray(data)  # numpy scalars (0-d op results) keep their dtype
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(
        arr,
        requires_grad=track,
        dtype=arr.dtype,
        op=op,
        _parents=parents if track else (),
        _bw=bw if track else None,
    )
    return out


def make_op(data, op, parents, bw):
    """Public hook for composite ops with hand-written backward rules.

    `bw(g)` must return one gradient array (or None) per parent. Used by the
    convex base-learner solvers, whose backward is implicit differentiation
    rather than a chain of primitives.
    """
    return _make(np.asarray(data), op, tuple(parents), bw)


def _check_back(arr, op, node_id):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op, node_id, phase="backward")
    return arr


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape` by summing expanded axes."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out_data, "add", (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out_data, "mul", (a, b), bw)


def neg(a):
    a = _wrap(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out_data, "matmul", (a, b), bw)


def transpose(a):
    a = _wrap(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.data.shape}")
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def reshape(a, shape):
    a = _wrap(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def rows(a, start, stop):
    """Contiguous row slice a[start:stop] along the leading axis."""
    a = _wrap(a)

    def bw(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return (out,)

    return _make(a.data[start:stop].copy(), "rows", (a,), bw)


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(a.data * mask, "relu", (a,), bw)


def exp(a):
    a = _wrap(a)
    out_data = np.exp(a.data)

    def bw(g):
        return (g * out_data,)

    return _make(out_data, "exp", (a,), bw)


def log(a):
    a = _wrap(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), "log", (a,), bw)


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only through unclipped entries."""
    a = _wrap(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * mask,)

    return _make(np.clip(a.data, lo, hi), "clip", (a,), bw)


def softplus(a):
    """log(1 + exp(x)), stabilized; used to store positive scalars."""
    a = _wrap(a)
    x = a.data
    out_data = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))

    def bw(g):
        ex = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
        return (g * sig,)

    return _make(out_data.astype(x.dtype), "softplus", (a,), bw)


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).astype(a.data.dtype),)

    return _make(np.asarray(out_data), "sum", (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else np.prod(
        [shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw(g):
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        return ((np.broadcast_to(g, shape) / count).astype(a.data.dtype),)

    return _make(np.asarray(out_data), "mean", (a,), bw)


def logsumexp(a, axis=-1):
    """Stabilized log-sum-exp reduction along `axis` (max-subtraction fused)."""
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(m + np.log(total), axis=axis)
    soft = shifted / total

    def bw(g):
        return (np.expand_dims(g, axis) * soft,)

    return _make(out_data, "logsumexp", (a,), bw)


def softmax(a, axis=-1):
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return ((g - dot) * p,)

    return _make(p, "softmax", (a,), bw)


def pick(a, indices):
    """out[n] = a[n, indices[n]] for a 2-D tensor and integer label vector."""
    a = _wrap(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise ValueError(f"pick expects [N,K] tensor and N labels, got {a.data.shape}, {idx.shape}")
    if idx.min() < 0 or idx.max() >= a.data.shape[1]:
        raise ValueError("pick indices out of range")
    arange = np.arange(idx.shape[0])

    def bw(g):
        out = np.zeros_like(a.data)
        out[arange, idx] = g
        return (out,)

    return _make(a.data[arange, idx].copy(), "pick", (a,), bw)


# ---------------------------------------------------------------------------
# spatial operations
# ---------------------------------------------------------------------------


def _as_batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected [C,H,W] or [B,C,H,W] input, got shape {x.shape}")


def conv2d(a, kernels, stride=1, padding=0):
    """2-D cross-correlation: input [C,H,W] or [B,C,H,W], kernels [Co,C,kh,kw].

    Output spatial extent is (H + 2*padding - kh)//stride + 1. Implemented with
    an im2col lowering so the inner product runs as one matmul.
    """
    a, kernels = _wrap(a), _wrap(kernels)
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    x, squeeze = _as_batched(a.data)
    k = kernels.data
    if k.ndim != 4:
        raise ValueError(f"kernels must be [Co,C,kh,kw], got shape {k.shape}")
    B, C, H, W = x.shape
    Co, Ck, kh, kw = k.shape
    if Ck != C:
        raise ValueError(f"channel mismatch: input has {C}, kernels expect {Ck}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ValueError(f"kernel {kh}x{kw} exceeds padded extent {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B, C, Ho, Wo, kh, kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kmat = k.reshape(Co, C * kh * kw)
    out = (cols @ kmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def bw(g):
        gb = g[None] if squeeze else g
        gmat = gb.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gk = (gmat.T @ cols).reshape(Co, C, kh, kw)
        gcols = (gmat @ kmat).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u : u + Ho * stride : stride, v : v + Wo * stride : stride] += (
                    gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding : Hp - padding, padding : Wp - padding] if padding else gxp
        return (gx[0] if squeeze else gx), gk

    return _make(np.ascontiguousarray(out), "conv2d", (a, kernels), bw)


def maxpool2x2(a):
    """2x2 max pooling with stride 2; spatial dims must be even (or 1)."""
    a = _wrap(a)
    x, squeeze = _as_batched(a.data)
    B, C, H, W = x.shape
    if (H % 2 or W % 2) and not (H == 1 and W == 1):
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {H}x{W}")
    if H == 1 and W == 1:
        out = x
        def bw(g):
            gb = g[None] if squeeze else g
            return (gb[0] if squeeze else gb,)
        return _make((out[0] if squeeze else out).copy(), "maxpool2x2", (a,), bw)

    blocks = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        B, C, H // 2, W // 2, 4
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = g[None] if squeeze else g
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, arg[..., None], gb[..., None], axis=-1)
        gx = gblocks.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            B, C, H, W
        )
        return (gx[0] if squeeze else gx,)

    return _make((out[0] if squeeze else out).copy(), "maxpool2x2", (a,), bw)


# ---------------------------------------------------------------------------
# graph traversal and gradients
# ---------------------------------------------------------------------------


@dataclass
class GraphNode:
    node_id: int
    op: str
    parent_ids: tuple
    shape: tuple


class Graph:
    """Topologically ordered view of the computation ending at `sink`.

    Construction walks parent links iteratively (no recursion limit concerns)
    and records one entry per reachable tensor; parents always precede
    consumers, which `backward` relies on.
    """

    def __init__(self, sink):
        self.sink = sink
        self.order = _topo_order(sink)
        self.nodes = [
            GraphNode(t.node_id, t.op, tuple(p.node_id for p in t._parents), t.data.shape)
            for t in self.order
        ]


def _topo_order(sink):
    order = []
    seen = set()
    stack = [(sink, False)]
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


def backward(sink):
    """Reverse-mode pass from a scalar sink.

    Returns a dict mapping id(tensor) -> gradient array for every leaf tensor
    with requires_grad on the path. Does not mutate `.grad`, so independent
    graphs can run backward concurrently.
    """
    if sink.data.size != 1:
        raise ValueError(f"backward sink must be scalar, got shape {sink.data.shape}")
    order = _topo_order(sink)
    grads = {id(sink): np.ones_like(sink.data)}
    leaf_grads = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bw is None:
            if node.requires_grad:
                prev = leaf_grads.get(id(node))
                leaf_grads[id(node)] = g if prev is None else prev + g
            continue
        parent_grads = node._bw(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            _check_back(pg, node.op, node.node_id)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaf_grads


def grad(sink, params):
    """Gradients of a scalar sink w.r.t. named parameters.

    `params` maps name -> Tensor. Parameters that do not participate in the
    graph get exact zero gradients.
    """
    leaf = backward(sink)
    out = {}
    for name, p in params.items():
        g = leaf.get(id(p))
        out[name] = g if g is not None else np.zeros_like(p.data)
    return out
