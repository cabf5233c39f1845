"""Minimal reverse-mode automatic differentiation over numpy arrays.

The module provides exactly what the attention stack needs: a `Tensor`
wrapper around row-major float32/float64 arrays, an explicit tape
(`Graph`) that records operations in execution order, and a fixed set of
differentiable operations (matmul, conv2d, layer norm, softmax, gather,
elementwise math, shape moves).  Matmul and conv2d report their
multiply-accumulate counts to an optional counter so analytic cost
formulas can be audited against a real forward pass.

Gradient checking is done externally with `finite_diff_grad`, which is a
plain numpy central-difference loop and shares no code with the tape.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "Graph",
    "MacCounts",
    "count_macs",
    "mac_scope",
    "checked",
    "matmul",
    "conv2d",
    "layer_norm",
    "softmax_lastdim",
    "topk_lastdim",
    "gather_rows",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "gelu",
    "mean",
    "tsum",
    "reshape",
    "permute",
    "slice_lastdim",
    "concat_lastdim",
    "zeros",
    "finite_diff_grad",
]

_ALLOWED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes or dtypes violate an operation contract."""


def _as_array(data, dtype=None) -> np.ndarray:
    a = np.asarray(data, dtype=dtype)
    if a.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        if dtype is None and a.dtype.kind in "iub":
            a = a.astype(np.float64)
        else:
            raise ShapeError(f"unsupported dtype {a.dtype}; use float32 or float64")
    return np.ascontiguousarray(a)


class Tensor:
    """A row-major float array plus bookkeeping for the tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph_uid", "_node_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._graph_uid = -1
        self._node_id = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


@dataclass
class Node:
    """One recorded operation: inputs by node id, the produced tensor, and
    the function mapping the output gradient to per-input gradients."""

    op: str
    inputs: tuple[int, ...]
    tensor: Tensor
    backward: Optional[Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]]


_current_graph: contextvars.ContextVar[Optional["Graph"]] = contextvars.ContextVar(
    "debiformer_graph", default=None
)
_checked: contextvars.ContextVar[bool] = contextvars.ContextVar("debiformer_checked", default=False)
_graph_uid_counter = [0]


class Graph:
    """Append-only tape of operations, topologically ordered by construction.

    Used as a context manager; operations executed inside the block are
    recorded.  `backward` walks the tape once in reverse.
    """

    def __init__(self):
        _graph_uid_counter[0] += 1
        self.uid = _graph_uid_counter[0]
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _current_graph.set(self)
        return self

    def __exit__(self, *exc):
        _current_graph.reset(self._token)
        return False

    def _ensure_id(self, t: Tensor) -> int:
        if t._graph_uid != self.uid:
            t._graph_uid = self.uid
            t._node_id = len(self.nodes)
            self.nodes.append(Node("leaf", (), t, None))
        return t._node_id

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        out: Tensor,
        backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]],
    ) -> Tensor:
        ids = tuple(self._ensure_id(t) for t in inputs)
        out._graph_uid = self.uid
        out._node_id = len(self.nodes)
        self.nodes.append(Node(op, ids, out, backward))
        return out

    def backward(
        self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None
    ) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every leaf tensor in the tape.

        The loss must be a scalar recorded on this graph.  Each node is
        visited exactly once, in reverse recording order.  Leaves with
        `requires_grad` get their `.grad` set; leaves never reached by a
        gradient path get zeros.  Returns a node-id -> gradient map.
        """
        if loss._graph_uid != self.uid:
            raise ValueError("loss tensor was not computed on this graph")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {
            loss._node_id: np.ones_like(loss.data)
        }
        for node_id in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[node_id]
            g = grads.get(node_id)
            if g is None or node.backward is None:
                continue
            input_grads = node.backward(g)
            for inp_id, ig in zip(node.inputs, input_grads):
                if ig is None:
                    continue
                if inp_id in grads:
                    grads[inp_id] = grads[inp_id] + ig
                else:
                    grads[inp_id] = ig
        for node in self.nodes:
            if node.backward is None and node.tensor.requires_grad:
                t = node.tensor
                t.grad = grads.get(t._node_id)
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
        if wrt is not None:
            for t in wrt:
                if t._graph_uid != self.uid:
                    t.grad = np.zeros_like(t.data)
        return grads


# ---------------------------------------------------------------------------
# Instrumentation and checking


@dataclass
class MacCounts:
    """Multiply-accumulate totals recorded during a forward pass."""

    total: int = 0
    by_scope: dict[str, int] = field(default_factory=dict)


_mac_counter: contextvars.ContextVar[Optional[MacCounts]] = contextvars.ContextVar(
    "debiformer_macs", default=None
)
_mac_scope_stack: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar(
    "debiformer_mac_scope", default=()
)


@contextlib.contextmanager
def count_macs():
    """Collect matmul/conv2d MACs executed inside the block."""
    counts = MacCounts()
    token = _mac_counter.set(counts)
    try:
        yield counts
    finally:
        _mac_counter.reset(token)


@contextlib.contextmanager
def mac_scope(label: str):
    """Attribute MACs recorded inside the block to `label` (labels nest with dots)."""
    stack = _mac_scope_stack.get()
    token = _mac_scope_stack.set(stack + (label,))
    try:
        yield
    finally:
        _mac_scope_stack.reset(token)


def _add_macs(n: int) -> None:
    counts = _mac_counter.get()
    if counts is None:
        return
    counts.total += n
    stack = _mac_scope_stack.get()
    if stack:
        label = ".".join(stack)
        counts.by_scope[label] = counts.by_scope.get(label, 0) + n


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise on any non-finite op output produced inside the block."""
    token = _checked.set(bool(enabled))
    try:
        yield
    finally:
        _checked.reset(token)


def _finish(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    if _checked.get() and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    out = Tensor(out_data)
    g = _current_graph.get()
    if g is not None:
        g.record(op, inputs, out, backward)
    return out


def _same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(
                f"dtype mismatch: {dt.name} vs {t.data.dtype.name}; operands must agree"
            )
    return dt


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Operations


def _coerce(other, like: Tensor) -> Tensor:
    if isinstance(other, Tensor):
        return other
    return Tensor(np.asarray(other, dtype=like.data.dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product.  Leading (batch) dimensions must be equal on
    both operands; no broadcasting beyond that equality."""
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims must match exactly: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.ndim > 2 else 1
    m, p = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    _add_macs(batch * m * p * n)
    out = np.matmul(a.data, b.data)

    def backward(g: np.ndarray):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return da, db

    return _finish("matmul", (a, b), out, backward)


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    depthwise: bool = False,
) -> Tensor:
    """2-D convolution over a channels-last map `x` of shape [H, W, Cin].

    Regular kernels have shape [kh, kw, Cin, Cout]; depthwise kernels have
    shape [kh, kw, C] and convolve each channel independently.  Padding is
    zero-fill on both sides.  MACs are recorded as Hout*Wout*kh*kw*Cin*Cout
    (depthwise: Hout*Wout*kh*kw*C).
    """
    _same_dtype(x, w) if bias is None else _same_dtype(x, w, bias)
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects [H, W, C] input, got {x.shape}")
    H, W, Cin = x.shape
    if depthwise:
        if w.ndim != 3 or w.shape[2] != Cin:
            raise ShapeError(f"depthwise kernel must be [kh, kw, {Cin}], got {w.shape}")
        kh, kw, _ = w.shape
        Cout = Cin
    else:
        if w.ndim != 4 or w.shape[2] != Cin:
            raise ShapeError(f"kernel must be [kh, kw, {Cin}, Cout], got {w.shape}")
        kh, kw, _, Cout = w.shape
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"bias must be [{Cout}], got {bias.shape}")
    s = int(stride)
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Hout = (Hp - kh) // s + 1
    Wout = (Wp - kw) // s + 1
    if Hout <= 0 or Wout <= 0:
        raise ShapeError(f"conv2d produces empty output for input {x.shape}, kernel {w.shape}")
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::s, ::s]  # [Hout, Wout, Cin, kh, kw]
    if depthwise:
        out = np.einsum("hwcij,ijc->hwc", win, w.data, optimize=True)
        _add_macs(Hout * Wout * kh * kw * Cin)
    else:
        out = np.einsum("hwcij,ijco->hwo", win, w.data, optimize=True)
        _add_macs(Hout * Wout * kh * kw * Cin * Cout)
    if bias is not None:
        out = out + bias.data

    def backward(g: np.ndarray):
        dxp = np.zeros((Hp, Wp, Cin), dtype=x.data.dtype)
        dw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                # output (h', w') reads xp[h'*s + i, w'*s + j, :]
                patch = xp[i : i + s * Hout : s, j : j + s * Wout : s, :]
                if depthwise:
                    dxp[i : i + s * Hout : s, j : j + s * Wout : s, :] += g * w.data[i, j]
                    dw[i, j] = np.einsum("hwc,hwc->c", patch, g, optimize=True)
                else:
                    dxp[i : i + s * Hout : s, j : j + s * Wout : s, :] += np.einsum(
                        "hwo,co->hwc", g, w.data[i, j], optimize=True
                    )
                    dw[i, j] = np.einsum("hwc,hwo->co", patch, g, optimize=True)
        dx = dxp[pad : pad + H, pad : pad + W, :] if pad else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _finish("conv2d", inputs, out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then scale and shift."""
    _same_dtype(x, gamma, beta)
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm scale/shift must be [{C}]")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return dx, dgamma, dbeta

    return _finish("layer_norm", (x, gamma, beta), out, backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last dimension."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _finish("softmax_lastdim", (x,), y, backward)


def topk_lastdim(x: Tensor, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k values and indices along the last dimension, descending.

    Ties break toward the smaller index.  Not differentiable: plain arrays
    are returned and nothing is recorded on the tape.
    """
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ShapeError(f"k={k} out of range for last dim {n}")
    order = np.argsort(-x.data, axis=-1, kind="stable")
    idx = order[..., :k]
    vals = np.take_along_axis(x.data, idx, axis=-1)
    return vals, idx.astype(np.int64)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Index rows of `x` along axis 0 with an arbitrary-shape integer array.

    Output shape is idx.shape + x.shape[1:].  Differentiable with respect to
    `x` (duplicated rows accumulate their gradients).
    """
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ShapeError("gather_rows indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows index out of range for axis 0 of {x.shape}")
    out = x.data[idx]

    def backward(g: np.ndarray):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _finish("gather_rows", (x,), out, backward)


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _same_dtype(a, b)
    out = a.data + b.data

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", (a, b), out, backward)


def sub(a: Tensor, b) -> Tensor:
    return add(a, neg(_coerce(b, a)))


def neg(a: Tensor) -> Tensor:
    return _finish("neg", (a,), -a.data, lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _same_dtype(a, b)
    out = a.data * b.data

    def backward(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", (a, b), out, backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _finish("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g: np.ndarray):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _finish("gelu", (a,), out, backward)


def mean(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = axis if axis >= 0 else a.ndim + axis
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _finish("mean", (a,), out, backward)


def tsum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        out = a.data.sum()

        def backward(g: np.ndarray):
            return (np.broadcast_to(g, a.shape).copy(),)

    else:
        ax = axis if axis >= 0 else a.ndim + axis
        out = a.data.sum(axis=ax, keepdims=keepdims)

        def backward(g: np.ndarray):
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, a.shape).copy(),)

    return _finish("sum", (a,), out, backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _finish("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _finish("permute", (a,), out, lambda g: (g.transpose(inv),))


def slice_lastdim(a: Tensor, start: int, stop: int) -> Tensor:
    C = a.shape[-1]
    if not 0 <= start < stop <= C:
        raise ShapeError(f"slice [{start}:{stop}] out of range for last dim {C}")
    out = a.data[..., start:stop].copy()

    def backward(g: np.ndarray):
        dx = np.zeros_like(a.data)
        dx[..., start:stop] = g
        return (dx,)

    return _finish("slice_lastdim", (a,), out, backward)


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    _same_dtype(*parts)
    sizes = [t.shape[-1] for t in parts]
    out = np.concatenate([t.data for t in parts], axis=-1)

    def backward(g: np.ndarray):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=-1))

    return _finish("concat_lastdim", tuple(parts), out, backward)


def zeros(shape: tuple[int, ...], dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def custom_op(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]],
) -> Tensor:
    """Register an externally computed differentiable operation on the tape.

    Lets other modules (e.g. the bilinear sampler) define ops with analytic
    gradients without widening this module's op set.
    """
    return _finish(op, inputs, out_data, backward)


# ---------------------------------------------------------------------------
# Finite differences


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    Evaluates f at x +- h*e_i for every coordinate; shares nothing with the
    tape so it can serve as an independent oracle.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g
