"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node on the active :class:`Tape`;
``Tape.backward`` replays the nodes in exact reverse order and accumulates
gradients into ``Tensor.grad``. Kernels are plain numpy, so forward results
are deterministic and replaying the same op sequence is bit-identical.

Two float widths are supported and never mixed inside one graph: float64 for
gradient-check runs, float32 for training and benchmarking.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "MacCounter",
    "ShapeError",
    "NumericsError",
    "tensor",
    "matmul",
    "softmax",
    "layernorm",
    "gelu",
    "exp",
    "log",
    "cross_entropy",
    "mse",
    "kl_div",
    "concat",
    "narrow",
    "broadcast_to",
    "gather_rows",
    "scatter_rows",
    "avg_pool_2d",
    "depthwise_conv2d",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericsError(ArithmeticError):
    """Raised when a kernel detects non-finite inputs it cannot handle."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_ACTIVE_TAPE: Optional["Tape"] = None


class _Node:
    """One recorded differentiable op: inputs, output, and its vjp."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: "Tensor", vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of executed differentiable operations.

    Ops are appended in execution order, which is automatically a topological
    order of the graph. ``backward`` visits them strictly in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: "Tensor", seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(loss)/d(tensor) into ``grad`` for every tensor that
        requires it. ``loss`` must be a scalar unless ``seed`` is given."""
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError(
                    f"backward() needs a scalar loss, got shape {loss.shape}"
                )
            seed = np.ones_like(loss.data)
        loss._accumulate(seed)
        for node in reversed(self.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            grads = node.vjp(out_grad)
            for inp, g in zip(node.inputs, grads):
                if g is not None and inp.requires_grad:
                    inp._accumulate(g)


def _record(op: str, inputs: tuple, output: "Tensor", vjp: Callable) -> None:
    if _ACTIVE_TAPE is not None and output.requires_grad:
        _ACTIVE_TAPE.nodes.append(_Node(op, inputs, output, vjp))


def no_tape_active() -> bool:
    return _ACTIVE_TAPE is None


# ---------------------------------------------------------------------------
# MAC counting (used by the instrumented-execution flops oracle)
# ---------------------------------------------------------------------------

_ACTIVE_COUNTER: Optional["MacCounter"] = None


class MacCounter:
    """Counts multiply-accumulates actually executed by matmul/conv kernels.

    Independent of the analytic flops module: it observes the ops as they
    run, so comparing the two catches any drift between the cost model and
    the implementation.
    """

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, macs: int) -> None:
        self.total += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs

    def __enter__(self) -> "MacCounter":
        global _ACTIVE_COUNTER
        _ACTIVE_COUNTER = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_COUNTER
        _ACTIVE_COUNTER = None


def _count(op: str, macs: int) -> None:
    if _ACTIVE_COUNTER is not None:
        _ACTIVE_COUNTER.add(op, macs)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional float array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_grad_borrowed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64 if arr.dtype == np.int64 else np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._grad_borrowed = False

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad_flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        # First contribution adopts the incoming array without copying; it
        # may alias another tensor's gradient, so the first re-accumulation
        # allocates fresh storage instead of writing in place.
        if self.grad is None:
            self.grad = g
            self._grad_borrowed = True
        elif self._grad_borrowed:
            self.grad = self.grad + g
            self._grad_borrowed = False
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_borrowed = False

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _coerce(value, like: Tensor) -> Tensor:
    """Wrap scalars / ndarrays as constants in the dtype of ``like``."""
    if isinstance(value, Tensor):
        if value.data.dtype != like.data.dtype:
            raise ShapeError(
                f"mixed float widths in one graph: {value.data.dtype} vs "
                f"{like.data.dtype}"
            )
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _result(data: np.ndarray, *inputs: Tensor) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = req
    out.grad = None
    out._grad_borrowed = False
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = _result(a.data + b.data, a, b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    _record("add", (a, b), out, vjp)
    return out


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = _result(a.data - b.data, a, b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    _record("sub", (a, b), out, vjp)
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = _result(a.data * b.data, a, b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    _record("mul", (a, b), out, vjp)
    return out


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = _result(a.data / b.data, a, b)

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    _record("div", (a, b), out, vjp)
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, a)
    _record("neg", (a,), out, lambda g: (-g,))
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _result(y, a)
    _record("exp", (a,), out, lambda g: (g * y,))
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        y = np.log(a.data)
    out = _result(y, a)
    _record("log", (a,), out, lambda g: (g / a.data,))
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU x * Phi(x) in the tanh form (erf evaluates ~40x slower here and
    the two agree to ~1e-3, which nothing downstream can distinguish)."""
    x = a.data
    x2 = x * x
    inner = x2 * x
    inner *= 0.044715
    inner += x
    inner *= _GELU_C
    th = np.tanh(inner)
    cdf = th + 1.0
    cdf *= 0.5
    out = _result(x * cdf, a)

    def vjp(g):
        d = x * x
        d *= 3 * 0.044715
        d += 1.0
        d *= _GELU_C  # d(inner)/dx
        s = th * th
        np.subtract(1.0, s, out=s)  # sech^2
        d *= s
        d *= x
        d *= 0.5
        d += cdf
        d *= g
        return (d,)

    _record("gelu", (a,), out, vjp)
    return out


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    _record("sum", (a,), out, vjp)
    return out


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = _result(a.data.mean(axis=axis, keepdims=keepdims), a)
    scale = a.data.size / max(out.data.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.data.shape) / scale,)

    _record("mean", (a,), out, vjp)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape), a)
    _record("reshape", (a,), out, lambda g: (g.reshape(a.data.shape),))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    out = _result(np.ascontiguousarray(np.transpose(a.data, axes)), a)
    inv = None if axes is None else np.argsort(axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    _record("transpose", (a,), out, vjp)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _result(out_data, *tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    _record("concat", tuple(tensors), out, vjp)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (copying; no strided views)."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise IndexError(
            f"narrow range [{start}, {start + length}) out of bounds for axis "
            f"{axis} with size {a.data.shape[axis]}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _result(a.data[idx].copy(), a)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    _record("narrow", (a,), out, vjp)
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = _result(np.broadcast_to(a.data, shape).copy(), a)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    _record("broadcast_to", (a,), out, vjp)
    return out


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
        )
    k = a.data.shape[-1]
    if b.data.ndim == 2:
        # Stacked rows against one weight matrix: a single flat GEMM beats
        # numpy's batched dispatch both forward and backward.
        lead = a.data.shape[:-1]
        a2 = a.data.reshape(-1, k)
        out_data = (a2 @ b.data).reshape(lead + (b.data.shape[-1],))
        out = _result(out_data, a, b)
        _count("matmul", out_data.size * k)

        def vjp(g):
            g2 = g.reshape(-1, b.data.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.data.shape)
            gb = a2.T @ g2
            return ga, gb

    else:
        out_data = np.matmul(a.data, b.data)
        out = _result(out_data, a, b)
        _count("matmul", out_data.size * k)

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    _record("matmul", (a, b), out, vjp)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; rejects NaN inputs outright."""
    x = a.data
    if np.isnan(x).any():
        raise NumericsError("softmax received NaN input")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, a)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    _record("softmax", (a,), out, vjp)
    return out


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean / unit-variance over the last axis, then affine."""
    x = a.data
    c = x.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match "
            f"feature size {c}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gamma.data + beta.data, a, gamma, beta)

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=reduce_axes)
        g_beta = g.sum(axis=reduce_axes)
        gh = g * gamma.data
        proj = (gh * xhat).mean(axis=-1, keepdims=True)
        proj = xhat * proj
        gx = gh - gh.mean(axis=-1, keepdims=True)
        gx -= proj
        gx *= inv
        return gx, g_gamma, g_beta

    _record("layernorm", (a, gamma, beta), out, vjp)
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; ``labels`` are integer class ids."""
    labels = np.asarray(labels)
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes), got {logits.shape}")
    if labels.min() < 0 or labels.max() >= x.shape[1]:
        raise IndexError(
            f"label out of range for {x.shape[1]} classes: "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    b = x.shape[0]
    nll = -logp[np.arange(b), labels].mean()
    out = _result(np.asarray(nll, dtype=x.dtype), logits)

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    _record("cross_entropy", (logits,), out, vjp)
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shapes disagree: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = _result(np.asarray((diff * diff).mean(), dtype=a.data.dtype), a, b)

    def vjp(g):
        base = g * 2.0 * diff / n
        return base, -base

    _record("mse", (a, b), out, vjp)
    return out


def kl_div(log_p: Tensor, q: Tensor) -> Tensor:
    """KL(q || p) where p is given in log space; mean over leading rows.

    Rows of ``q`` are probability vectors along the last axis. Terms with
    q == 0 contribute zero.
    """
    if log_p.data.shape != q.data.shape:
        raise ShapeError(f"kl_div shapes disagree: {log_p.shape} vs {q.shape}")
    qd = q.data
    rows = max(qd.size // qd.shape[-1], 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_q = np.where(qd > 0, np.log(np.maximum(qd, np.finfo(qd.dtype).tiny)), 0.0)
    terms = np.where(qd > 0, qd * (log_q - log_p.data), 0.0)
    out = _result(np.asarray(terms.sum() / rows, dtype=qd.dtype), log_p, q)

    def vjp(g):
        g_logp = np.where(qd > 0, -qd, 0.0) * (g / rows)
        g_q = np.where(qd > 0, log_q + 1.0 - log_p.data, 0.0) * (g / rows)
        return g_logp, g_q

    _record("kl_div", (log_p, q), out, vjp)
    return out


# ---------------------------------------------------------------------------
# Indexing
# ---------------------------------------------------------------------------


def _check_indices(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range [0, {n}): {idx.min()}..{idx.max()}")
    return idx.astype(np.int64)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows. 2-d input gathers along axis 0 with a 1-d index list;
    3-d input (B, N, C) gathers per-sample rows with a (B, m) index array.
    The index argument is not differentiated."""
    if a.data.ndim == 2:
        idx = _check_indices(indices, a.data.shape[0])
        out = _result(a.data[idx].copy(), a)

        def vjp(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

    elif a.data.ndim == 3:
        idx = _check_indices(indices, a.data.shape[1])
        if idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
            raise ShapeError(
                f"batched gather needs (B, m) indices, got {idx.shape} for input "
                f"{a.shape}"
            )
        expanded = idx[:, :, None]
        out = _result(
            np.take_along_axis(a.data, np.broadcast_to(expanded, idx.shape + (a.data.shape[2],)), axis=1),
            a,
        )

        def vjp(g):
            full = np.zeros_like(a.data)
            barange = np.arange(a.data.shape[0])[:, None]
            np.add.at(full, (barange, idx), g)
            return (full,)

    else:
        raise ShapeError(f"gather_rows expects 2-d or 3-d input, got {a.shape}")
    _record("gather_rows", (a,), out, vjp)
    return out


def scatter_rows(a: Tensor, indices, values: Tensor) -> Tensor:
    """Copy of ``a`` with ``values`` written at the given rows (inverse of
    :func:`gather_rows` when the index set is a permutation)."""
    if a.data.ndim == 2:
        idx = _check_indices(indices, a.data.shape[0])
        data = a.data.copy()
        data[idx] = values.data
        out = _result(data, a, values)

        def vjp(g):
            ga = g.copy()
            ga[idx] = 0.0
            return ga, g[idx]

    elif a.data.ndim == 3:
        idx = _check_indices(indices, a.data.shape[1])
        if idx.ndim != 2 or idx.shape[0] != a.data.shape[0]:
            raise ShapeError(
                f"batched scatter needs (B, m) indices, got {idx.shape}"
            )
        barange = np.arange(a.data.shape[0])[:, None]
        data = a.data.copy()
        data[barange, idx] = values.data
        out = _result(data, a, values)

        def vjp(g):
            ga = g.copy()
            ga[barange, idx] = 0.0
            return ga, g[barange, idx]

    else:
        raise ShapeError(f"scatter_rows expects 2-d or 3-d input, got {a.shape}")
    _record("scatter_rows", (a, values), out, vjp)
    return out


# ---------------------------------------------------------------------------
# Spatial ops
# ---------------------------------------------------------------------------


def avg_pool_2d(a: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling over (..., H, W, C)."""
    x = a.data
    if x.ndim < 3:
        raise ShapeError(f"avg_pool_2d expects (..., H, W, C), got {a.shape}")
    h, w = x.shape[-3], x.shape[-2]
    if h % k or w % k:
        raise ShapeError(f"grid {h}x{w} not divisible by pool size {k}")
    lead = x.shape[:-3]
    c = x.shape[-1]
    blocked = x.reshape(lead + (h // k, k, w // k, k, c))
    out = _result(blocked.mean(axis=(-4, -2)), a)

    def vjp(g):
        g_block = g[..., :, None, :, None, :] / (k * k)
        g_full = np.broadcast_to(g_block, lead + (h // k, k, w // k, k, c))
        return (g_full.reshape(x.shape).copy(),)

    _record("avg_pool_2d", (a,), out, vjp)
    return out


def depthwise_conv2d(a: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel 2-d convolution with 'same' zero padding, stride 1.

    ``a`` is (B, H, W, C); ``kernel`` is (kh, kw, C).
    """
    x = a.data
    kd = kernel.data
    if x.ndim != 4 or kd.ndim != 3 or x.shape[-1] != kd.shape[-1]:
        raise ShapeError(
            f"depthwise_conv2d expects (B,H,W,C) and (kh,kw,C): got {a.shape}, "
            f"{kernel.shape}"
        )
    b, h, w, c = x.shape
    kh, kw = kd.shape[:2]
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    # windows: (B, H, W, C, kh, kw)
    out_data = np.einsum("bhwcij,ijc->bhwc", windows, kd, optimize=True)
    _count("depthwise_conv2d", b * h * w * c * kh * kw)
    inputs = (a, kernel) if bias is None else (a, kernel, bias)
    if bias is not None:
        out_data = out_data + bias.data
    out = _result(out_data, *inputs)

    def vjp(g):
        g_kernel = np.einsum("bhwcij,bhwc->ijc", windows, g, optimize=True)
        g_padded = np.pad(g, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        g_windows = np.lib.stride_tricks.sliding_window_view(
            g_padded, (kh, kw), axis=(1, 2)
        )
        flipped = kd[::-1, ::-1, :]
        g_x = np.einsum("bhwcij,ijc->bhwc", g_windows, flipped, optimize=True)
        if bias is None:
            return g_x, g_kernel
        return g_x, g_kernel, g.sum(axis=(0, 1, 2))

    _record("depthwise_conv2d", inputs, out, vjp)
    return out
