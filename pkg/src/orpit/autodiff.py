"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Graph` records every primitive applied while it is active (``with
Graph() as g:``). Calling :func:`backward` walks the tape in reverse and
leaves gradients in ``tensor.grad`` for every leaf that requires them.

Conventions shared by all primitives:

* no broadcasting; operand shapes must match exactly (``scalar_mul`` and the
  channel-bias add are the only shape-changing exceptions);
* convolution layout is ``(C, T)`` or batched ``(B, C, T)``;
* ``relu'(0) = 0`` and ``log10_safe(v) = log10(v + LOG_EPS)``.

Without an active graph, primitives run forward only and record nothing.
"""

from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Sequence

import numpy as np

LOG_EPS = 1e-8
SNR_CAP_DB = 60.0
SNR_EPS_DEN = 1e-12

_ids = itertools.count(1)
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the primitive."""


class GraphError(RuntimeError):
    """The tape is in a state where the request cannot be honoured."""


class DegenerateReferenceError(ValueError):
    """A reference signal is constant (zero energy after mean removal)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype(data))
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar keeps model code readable
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scalar_mul(self, -1.0)


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float32


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Ordered record of primitive applications.

    Node order is the order of application, so inputs always precede their
    consumers. A graph supports exactly one :func:`backward` pass; call
    :meth:`reset` (or build a new graph) to run another.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> Graph:
        stack = _graph_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if not stack or stack[-1] is not self:
            raise GraphError("graph contexts exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        self.nodes.append(_Node(op, tuple(inputs), output, backward_fn))


def _graph_stack() -> list[Graph]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


def _emit(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(value, dtype=value.dtype)
    g = active_graph()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g.record(op, inputs, out, backward_fn)
    return out


def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar ``loss`` through ``graph``.

    Leaf gradients are added into ``tensor.grad`` (so fan-out and repeated
    use accumulate). Returns the full gradient table keyed by ``node_id``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph.consumed:
        raise GraphError("backward already ran on this graph; reset it first")
    graph.consumed = True
    if not loss.requires_grad:
        return {}
    produced = {n.output.node_id for n in graph.nodes}
    if loss.node_id not in produced:
        raise GraphError("loss was not produced by this graph")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        gout = grads.pop(node.output.node_id, None)
        if gout is None:
            continue
        in_grads = node.backward_fn(gout)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise GraphError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi
            if t.node_id not in produced:
                leaves[t.node_id] = t
    for nid, t in leaves.items():
        g = grads[nid].astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
    return grads


def _check_same(op: str, *ts: Tensor) -> None:
    s = ts[0].shape
    for t in ts[1:]:
        if t.shape != s:
            raise ShapeError(f"{op}: shape mismatch {s} vs {t.shape}")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scalar_mul", (a.data * a.data.dtype.type(c)), (a,),
                 lambda g: (g * g.dtype.type(c),))


def scalar_div(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scalar_div", a.data / c, (a,), lambda g: (g / g.dtype.type(c),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _emit("relu", np.maximum(x, x.dtype.type(0)), (a,), lambda g: (g * (x > 0),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1 - y),))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit("square", x * x, (a,), lambda g: (2 * g * x,))


def log10_safe(a: Tensor) -> Tensor:
    v = a.data + a.dtype.type(LOG_EPS)
    inv = 1.0 / (v * math.log(10.0))
    return _emit("log10_safe", np.log10(v), (a,), lambda g: ((g * inv).astype(a.dtype, copy=False),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b[C]`` to ``x[C, T]`` or ``x[B, C, T]``."""
    if b.data.ndim != 1 or x.data.ndim not in (2, 3) or x.shape[-2] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    axes = (0, 2) if x.data.ndim == 3 else (1,)
    return _emit("add_bias", x.data + b.data[:, None], (x, b),
                 lambda g: (g, g.sum(axis=axes)))


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def _nonempty(op: str, *ts: Tensor) -> None:
    for t in ts:
        if t.data.size == 0:
            raise ShapeError(f"{op}: empty input")


def sum_(a: Tensor) -> Tensor:
    _nonempty("sum", a)
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.full(shape, g, dtype=g.dtype),))


def mean(a: Tensor) -> Tensor:
    _nonempty("mean", a)
    shape, n = a.shape, a.data.size
    return _emit("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                 lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    _nonempty("dot", a, b)
    _check_same("dot", a, b)
    ad, bd = a.data, b.data
    val = np.asarray(np.dot(ad.ravel(), bd.ravel()), dtype=a.dtype)
    return _emit("dot", val, (a, b), lambda g: (g * bd, g * ad))


def l2_norm_sq(a: Tensor) -> Tensor:
    _nonempty("l2_norm_sq", a)
    x = a.data
    val = np.asarray(np.dot(x.ravel(), x.ravel()), dtype=a.dtype)
    return _emit("l2_norm_sq", val, (a,), lambda g: (2 * g * x,))


def mean_time(x: Tensor) -> Tensor:
    """Average over the last (time) axis: ``[..., C, T] -> [..., C]``."""
    shape = x.shape
    n = shape[-1]
    return _emit("mean_time", x.data.mean(axis=-1), (x,),
                 lambda g: (np.broadcast_to(g[..., None] / n, shape).astype(g.dtype),))


# --------------------------------------------------------------------------
# structural
# --------------------------------------------------------------------------

def pad1d(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    if left < 0 or right < 0:
        raise ShapeError("pad1d: negative padding")
    widths = [(0, 0)] * (x.data.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return _emit("pad1d", np.pad(x.data, widths), (x,),
                 lambda g: (np.ascontiguousarray(g[..., left:left + n]),))


def crop1d(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` of the last axis."""
    n = x.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"crop1d: bad range [{start}, {stop}) for length {n}")
    shape = x.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[..., start:stop] = g
        return (out,)

    return _emit("crop1d", np.ascontiguousarray(x.data[..., start:stop]), (x,), bwd)


def select(x: Tensor, index: int) -> Tensor:
    """Take item ``index`` along the leading (batch) axis."""
    shape = x.shape

    def bwd(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)

    return _emit("select", x.data[index], (x,), bwd)


def stack(items: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    _check_same("stack", *items)
    return _emit("stack", np.stack([t.data for t in items]), tuple(items),
                 lambda g: tuple(g[i] for i in range(len(items))))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(old),))


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_out_len(t: int, k: int, stride: int = 1, dilation: int = 1) -> int:
    return (t - dilation * (k - 1) - 1) // stride + 1


def _as_batch(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 2 else x


def _im2col(x: np.ndarray, k: int, stride: int, dilation: int, t_out: int) -> np.ndarray:
    # (B, Ci, T) -> (B, K*Ci, T'), tap-major
    b, ci, t_in = x.shape
    if k == 1 and stride == 1 and t_in == t_out:
        return x
    cols = np.empty((b, k * ci, t_out), dtype=x.dtype)
    span = stride * (t_out - 1) + 1
    for j in range(k):
        off = j * dilation
        cols[:, j * ci:(j + 1) * ci] = x[:, :, off:off + span:stride]
    return cols


def _col2im(cols: np.ndarray, ci: int, t_in: int, k: int, stride: int, dilation: int) -> np.ndarray:
    b, _, t_out = cols.shape
    if k == 1 and stride == 1 and t_in == t_out:
        return cols
    x = np.zeros((b, ci, t_in), dtype=cols.dtype)
    span = stride * (t_out - 1) + 1
    for j in range(k):
        off = j * dilation
        x[:, :, off:off + span:stride] += cols[:, j * ci:(j + 1) * ci]
    return x


def conv1d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """Cross-correlation without padding.

    ``x``: ``[C_in, T]`` or ``[B, C_in, T]``; ``w``: ``[C_out, C_in, K]``.
    Output length is ``(T - dilation*(K-1) - 1) // stride + 1``.
    """
    if stride < 1 or dilation < 1:
        raise ShapeError("conv1d: stride and dilation must be positive")
    if w.data.ndim != 3 or x.data.ndim not in (2, 3):
        raise ShapeError(f"conv1d: bad ranks x{x.shape} w{w.shape}")
    co, ci, k = w.shape
    if x.shape[-2] != ci:
        raise ShapeError(f"conv1d: input has {x.shape[-2]} channels, kernel expects {ci}")
    t_in = x.shape[-1]
    if t_in < dilation * (k - 1) + 1:
        raise ShapeError(f"conv1d: input length {t_in} shorter than kernel span")
    t_out = conv_out_len(t_in, k, stride, dilation)
    batched = x.data.ndim == 3
    xb = _as_batch(x.data)
    cols = _im2col(xb, k, stride, dilation, t_out)
    w2 = np.ascontiguousarray(w.data.transpose(0, 2, 1).reshape(co, k * ci))
    out = np.matmul(w2, cols)

    def bwd(g):
        gb = _as_batch(g)
        gw2 = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0)
        gw = np.ascontiguousarray(gw2.reshape(co, k, ci).transpose(0, 2, 1))
        gcols = np.matmul(np.ascontiguousarray(w2.T), gb)
        gx = _col2im(gcols, ci, t_in, k, stride, dilation)
        return (gx if batched else gx[0]), gw

    return _emit("conv1d", out if batched else out[0], (x, w), bwd)


def conv1d_transpose(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv1d`).

    ``x``: ``[C_in, T]`` or ``[B, C_in, T]``; ``w``: ``[C_in, C_out, K]``.
    Output length is ``(T - 1)*stride + K``. With the same array ``w`` the
    pair is adjoint: ``<conv1d(u, w), v> == <u, conv1d_transpose(v, w)>``.
    """
    if stride < 1:
        raise ShapeError("conv1d_transpose: stride must be positive")
    if w.data.ndim != 3 or x.data.ndim not in (2, 3):
        raise ShapeError(f"conv1d_transpose: bad ranks x{x.shape} w{w.shape}")
    ci, co, k = w.shape
    if x.shape[-2] != ci:
        raise ShapeError(f"conv1d_transpose: input has {x.shape[-2]} channels, kernel expects {ci}")
    t_in = x.shape[-1]
    t_out = (t_in - 1) * stride + k
    batched = x.data.ndim == 3
    xb = _as_batch(x.data)
    # rows tap-major: row j*co + o holds w[:, o, j]
    wt = np.ascontiguousarray(w.data.transpose(2, 1, 0).reshape(k * co, ci))
    out = _col2im(np.matmul(wt, xb), co, t_out, k, stride, 1)

    def bwd(g):
        gb = _as_batch(g)
        gcols = _im2col(gb, k, stride, 1, t_in)
        gx = np.matmul(np.ascontiguousarray(wt.T), gcols)
        gwt = np.matmul(gcols, xb.transpose(0, 2, 1)).sum(axis=0)
        gw = np.ascontiguousarray(gwt.reshape(k, co, ci).transpose(2, 1, 0))
        return (gx if batched else gx[0]), gw

    return _emit("conv1d_transpose", out if batched else out[0], (x, w), bwd)


def max_pool1d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling over the last axis; a ragged tail is dropped."""
    t = x.shape[-1]
    n = t // size
    if n < 1:
        raise ShapeError(f"max_pool1d: length {t} shorter than pool size {size}")
    blocks = x.data[..., :n * size].reshape(x.shape[:-1] + (n, size))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def bwd(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., :n * size] = gb.reshape(shape[:-1] + (n * size,))
        return (gx,)

    return _emit("max_pool1d", out, (x,), bwd)


def global_norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize each item to zero mean, unit variance over all of ``[C, T]``."""
    batched = x.data.ndim == 3
    xb = _as_batch(x.data)
    mu = xb.mean(axis=(1, 2), keepdims=True)
    xc = xb - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + xb.dtype.type(eps))
    y = xc * inv

    def bwd(g):
        gb = _as_batch(g)
        gy_mean = gb.mean(axis=(1, 2), keepdims=True)
        gyy_mean = (gb * y).mean(axis=(1, 2), keepdims=True)
        gx = inv * (gb - gy_mean - y * gyy_mean)
        return (gx if batched else gx[0]),

    return _emit("global_norm", y if batched else y[0], (x,), bwd)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """Dense layer product ``x[B, D] @ w[D, K]``."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {w.shape}")
    xd, wd = x.data, w.data
    return _emit("matmul", xd @ wd, (x, w), lambda g: (g @ wd.T, xd.T @ g))


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias row ``b[K]`` to every row of ``x[B, K]``."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_row: cannot add {b.shape} to {x.shape}")
    return _emit("add_row", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


# --------------------------------------------------------------------------
# fused losses
# --------------------------------------------------------------------------

def si_snr_terms(est: np.ndarray, ref: np.ndarray):
    """Shared SI-SNR arithmetic: returns (value_db, s_target, e_noise, dot, e_energy).

    Inputs are flattened and mean-normalized here. The value is capped at
    +/- ``SNR_CAP_DB``; ``dot`` and ``e_energy`` feed the analytic gradient.
    """
    s_hat = est.ravel() - est.mean()
    s = ref.ravel() - ref.mean()
    ref_energy = np.dot(s, s)
    if not ref_energy > 0:
        raise DegenerateReferenceError("reference is constant")
    d = np.dot(s_hat, s)
    s_target = (d / ref_energy) * s
    e_noise = s_hat - s_target
    t_energy = np.dot(s_target, s_target)
    e_energy = np.dot(e_noise, e_noise)
    if e_energy < SNR_EPS_DEN * t_energy:
        value = SNR_CAP_DB
    elif t_energy < SNR_EPS_DEN * e_energy or t_energy == 0:
        value = -SNR_CAP_DB
    else:
        value = 10.0 * np.log10(t_energy / e_energy)
    return float(value), s_target, e_noise, float(d), float(e_energy)


def si_snr(est: Tensor, ref) -> Tensor:
    """Differentiable SI-SNR in dB of ``est`` against a constant reference.

    Gradient is zero when either cap is active.
    """
    ref_arr = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
    if est.data.size != ref_arr.size:
        raise ShapeError(f"si_snr: length mismatch {est.data.size} vs {ref_arr.size}")
    e64 = est.data.astype(np.float64)
    r64 = ref_arr.astype(np.float64)
    value, _, e_noise, d, e_energy = si_snr_terms(e64, r64)
    shape, dtype = est.shape, est.dtype

    def bwd(g):
        if abs(value) == SNR_CAP_DB:
            return (np.zeros(shape, dtype=dtype),)
        s = r64.ravel() - r64.mean()
        grad = (20.0 / math.log(10.0)) * (s / d - e_noise / e_energy)
        return ((float(g) * grad).reshape(shape).astype(dtype),)

    return _emit("si_snr", np.asarray(value, dtype=dtype), (est,), bwd)


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy; ``logits`` of any shape, labels in {0, 1}."""
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    n = z.size
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z)))).astype(z.dtype)
    return _emit("bce_with_logits", np.asarray(loss.mean(), dtype=z.dtype), (logits,),
                 lambda g: (g * (p - y) / n,))


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, K]`` against integer labels."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError("softmax_xent: logits must be [B, K]")
    y = np.asarray(labels, dtype=np.int64)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    b = z.shape[0]
    loss = -logp[np.arange(b), y].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(b), y] -= 1
        return ((g * p / b).astype(z.dtype),)

    return _emit("softmax_xent", np.asarray(loss, dtype=z.dtype), (logits,), bwd)
