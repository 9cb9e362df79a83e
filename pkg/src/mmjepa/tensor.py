"""Reverse-mode autodiff on numpy arrays.

Design: every differentiable op returns a `Tensor` that remembers its parent
tensors and a vector-Jacobian closure. `backward` walks the resulting DAG in
reverse topological order and accumulates gradients into `Parameter` leaves.
The graph lives only as long as the loss tensor; nothing is retained across
steps. All computation is deterministic for fixed inputs, dtype, and BLAS
thread count.

Supported dtypes are float32 (training default) and float64 (used by the
gradient-verification harness).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
_SUPPORTED_DTYPES = (F32, F64)

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class GraphError(ValueError):
    """Contract violation in graph construction or backward."""


_grad_enabled = True


class no_grad:
    """Context manager: ops inside produce constant tensors (no tape)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _check_dtype(dtype: np.dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype not in _SUPPORTED_DTYPES:
        raise GraphError(f"unsupported dtype {dtype}; use float32 or float64")
    return dtype


class Tensor:
    """n-dimensional array node in the autodiff graph.

    Use `tensor()` to build validated leaves from raw buffers; ops build
    internal nodes. `data` is always a numpy array of float32 or float64.
    """

    __slots__ = ("data", "_parents", "_vjp", "requires_grad")

    def __init__(
        self,
        data: np.ndarray,
        parents: tuple = (),
        vjp: Callable | None = None,
        requires_grad: bool = False,
    ):
        self.data = data
        self._parents = parents
        self._vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"

    def item(self) -> float:
        return float(self.data)

    # operator sugar
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


def tensor(data, dtype=F32) -> Tensor:
    """Validated leaf tensor from a raw buffer. Rejects NaN/Inf."""
    dtype = _check_dtype(dtype)
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise GraphError("non-finite values rejected at tensor construction")
    return Tensor(arr)


def constant(data, dtype) -> Tensor:
    """Leaf tensor without the finiteness scan (internal fast path)."""
    return Tensor(np.asarray(data, dtype=dtype))


class Parameter(Tensor):
    """Trainable leaf: value plus accumulated gradient and Adam state."""

    __slots__ = ("grad", "adam_m", "adam_v", "step_count", "name")

    def __init__(self, data, name: str = "", dtype=F32):
        dtype = _check_dtype(dtype)
        arr = np.asarray(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise GraphError(f"non-finite values in parameter {name!r}")
        super().__init__(arr, requires_grad=True)
        self.grad = np.zeros_like(arr)
        self.adam_m = np.zeros_like(arr)
        self.adam_v = np.zeros_like(arr)
        self.step_count = 0
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0


def backward(loss: Tensor) -> None:
    """Populate .grad of every Parameter reachable from a scalar loss.

    Gradients accumulate additively; call `zero_grads` between steps.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor produced by recorded ops")
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return  # constant loss: every gradient is zero

    # iterative topological order (graphs can be deep)
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype).reshape(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                # out-of-place: the stored array may be a read-only view or
                # alias another node's buffer (identity vjps return g itself)
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, parents, vjp, requires_grad=True)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = _coerce(b, a.dtype)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with leading batch dimensions (numpy matmul semantics)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise GraphError("matmul operands must be at least 2-D")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), vjp)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)

    return _make(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact erf-form GELU: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * phi).astype(x.dtype, copy=False)

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (phi + x * pdf)).astype(x.dtype, copy=False),)

    return _make(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (inv * term).astype(x.dtype, copy=False)
        reduce_axes = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=reduce_axes) if g.ndim > 1 else g * xhat
        gbias = g.sum(axis=reduce_axes) if g.ndim > 1 else g
        return gx, _unbroadcast(ggain, gain.data.shape), _unbroadcast(gbias, bias.data.shape)

    del d
    return _make(out, (x, gain, bias), vjp)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise sigmoid + binary cross-entropy, numerically stable."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(x)))
        sig = np.where(x >= 0, s, 1.0 - s)
        return ((g * (sig - t)).astype(x.dtype, copy=False),)

    return _make(out.astype(x.dtype, copy=False), (logits,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        scale = np.asarray(1.0 / count, dtype=a.dtype)
        return (np.broadcast_to(g * scale, a.data.shape),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), vjp)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).astype(a.dtype, copy=False),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), vjp)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return _make(out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _make(out, (a,), vjp)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows per batch element: (B, L, D) indexed by (B, K) -> (B, K, D)."""
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx[:, :, None], axis=1)
    b_idx = np.arange(a.data.shape[0])[:, None]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (b_idx, idx), g)
        return (ga,)

    return _make(out, (a,), vjp)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Embedding-style lookup: (V, D) indexed by integer array -> idx.shape + (D,)."""
    idx = np.asarray(idx)
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), vjp)


def take1d(a: Tensor, idx: np.ndarray) -> Tensor:
    """Reindex a 1-D tensor."""
    idx = np.asarray(idx)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_patches(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution: x (N, C, H, W), w (F, C, kh, kw), optional bias (F,)."""
    n, c, h, wd = x.data.shape
    f, c2, kh, kw = w.data.shape
    if c != c2:
        raise GraphError(f"conv2d channel mismatch: input {c}, kernel {c2}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise GraphError("conv2d output would be empty")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    patches = _conv_patches(xp, kh, kw, stride, oh, ow)
    out = np.tensordot(patches, w.data, axes=([1, 2, 3], [1, 2, 3]))  # (N, OH, OW, F)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b.data[None, :, None, None]

    def vjp(g):
        pat = _conv_patches(xp, kh, kw, stride, oh, ow)
        gw = np.tensordot(g, pat, axes=([0, 2, 3], [0, 4, 5]))  # (F, C, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))  # (N, OH, OW, C)
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        grads = [gx.astype(x.dtype, copy=False), gw.astype(w.dtype, copy=False)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp)


def global_norm(params: Iterable[Parameter]) -> float:
    """L2 norm over all parameter gradients (plain numpy, not differentiable)."""
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))
