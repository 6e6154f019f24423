"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations on tensors that require gradients
record a node holding the parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the recorded graph once in reverse
topological order and frees it afterwards.

Storage defaults to float32; convolutions, matmuls and reductions accumulate
in float64 before casting back. Passing float64 arrays keeps the whole graph
in float64, which is what the gradient checks use.

Broadcasting is deliberately limited to tensor-scalar combinations.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
CE_EPS = 1e-7

__all__ = [
    "Tensor",
    "GraphError",
    "ShapeError",
    "tensor",
    "backward",
    "no_grad_value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow",
    "exp",
    "log",
    "abs",
    "relu",
    "sigmoid",
    "sign",
    "clamp",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "softmax",
    "conv2d",
    "conv_output_size",
    "bilinear_upsample",
    "avg_pool",
    "layer_normalize_per_channel",
    "binary_ce",
]


class GraphError(RuntimeError):
    """Raised on misuse of the autodiff graph (non-scalar loss, freed graph)."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.generic):
        # 0-d arithmetic yields numpy scalars; keep their precision
        data = np.asarray(data)
    if isinstance(data, np.ndarray):
        if dtype is not None:
            return data.astype(dtype, copy=False)
        if data.dtype in (np.float32, np.float64):
            return data
        return data.astype(DEFAULT_DTYPE)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    """N-dimensional float array that can take part in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""

    # -- introspection -----------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{op})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def no_grad_value(x) -> np.ndarray:
    """Raw array behind a tensor or array-like, never recorded."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
        out._op = op
    return out


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only the scalar case reaches here
    return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(shape)


# -- topological backward --------------------------------------------------
def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss`` that requires it.

    Leaf gradients accumulate into an existing ``grad`` buffer; call
    ``zero_grad`` between independent passes. The graph is freed once the
    pass completes, so calling ``backward`` twice on the same loss raises.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    if loss.is_leaf and loss._op == "freed":
        raise GraphError("graph already freed by a previous backward call")

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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.dtype, copy=True)
            else:
                node.grad = node.grad + g.astype(node.dtype)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            if pg.shape != p.shape:
                pg = _reduce_to(pg, p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        # free the graph as we go
        node._parents = ()
        node._backward = None
        node._op = "freed"


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_same(a, b, "add")
    return _node((a.data + b.data).astype(a.dtype, copy=False), (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_same(a, b, "sub")
    return _node((a.data - b.data).astype(a.dtype, copy=False), (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _node((ad * bd).astype(a.dtype, copy=False), (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = (ad / bd).astype(a.dtype, copy=False)
    return _node(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def pow(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("pow supports scalar exponents only")
    x = a.data
    out = np.power(x, exponent).astype(a.dtype, copy=False)
    return _node(out, (a,), lambda g: (g * exponent * np.power(x, exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,), "log")


def abs(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow for any finite input."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep strictly inside (0, 1) even where float rounding would hit 1
    np.clip(out, np.finfo(out.dtype).tiny, 1.0 - np.finfo(out.dtype).epsneg, out=out)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sign(a: Tensor) -> Tensor:
    """Elementwise sign in {-1, 0, 1}; gradient is zero everywhere."""
    out = np.sign(a.data).astype(a.dtype)
    return _node(out, (a,), lambda g: (np.zeros_like(g),), "sign")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi).astype(a.dtype, copy=False)
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x >= lo
    if hi is not None:
        keep &= x <= hi
    return _node(out, (a,), lambda g: (g * keep,), "clamp")


# -- linear algebra and reductions -----------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape[1]} vs {b.shape[0]}")
    ad = a.data.astype(np.float64, copy=False)
    bd = b.data.astype(np.float64, copy=False)
    out = (ad @ bd).astype(a.dtype)

    def fn(g):
        g64 = g.astype(np.float64, copy=False)
        return g64 @ bd.T, ad.T @ g64

    return _node(out, (a, b), fn, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.dtype)
    shape = a.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _node(np.asarray(out), (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    dtype = a.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index]), (a,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ShapeError(f"concat: rank {t.ndim} differs from {ndim}")
        for d in range(ndim):
            if d != axis and t.shape[d] != tensors[0].shape[d]:
                raise ShapeError(f"concat: dimension {d} is {t.shape[d]}, expected {tensors[0].shape[d]}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis).astype(tensors[0].dtype, copy=False)
    return _node(out, tensors, lambda g: np.split(g, cuts, axis=axis), "concat")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64, copy=False)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = s.astype(a.dtype)

    def fn(g):
        g64 = g.astype(np.float64, copy=False)
        dot = (g64 * s).sum(axis=axis, keepdims=True)
        return (s * (g64 - dot),)

    return _node(out, (a,), fn, "softmax")


# -- convolution -----------------------------------------------------------
def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} does not fit padded input of size {size + 2 * padding}")
    if span % stride:
        raise ShapeError(
            f"non-integer output size: ({size} + 2*{padding} - {k}) / {stride} + 1 = {span / stride + 1}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]  # N,C,oh,ow,k,k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(x.shape[0] * oh * ow, -1)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = shape
    cols = cols.reshape(n, oh, ow, c, k, k)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with square OCkk kernels."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be N,C,H,W; got rank {x.ndim}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be O,C,k,k; got {weight.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    o, wc, k, _ = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d channel dimension mismatch: input has C={c}, weight expects {wc}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d bias dimension mismatch: expected ({o},), got {bias.shape}")
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)

    cols = _im2col(x.data.astype(np.float64, copy=False), k, stride, padding, oh, ow)
    wmat = weight.data.astype(np.float64, copy=False).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data.astype(np.float64)
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2).astype(x.dtype)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        gm = g.astype(np.float64, copy=False).transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = _col2im(gm @ wmat, x.shape, k, stride, padding, oh, ow) if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _node(out, parents, fn, "conv2d")


# -- resampling --------------------------------------------------------------
def _interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row i holds the weights mixing input samples into output sample i."""
    mat = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        mat[i, i0] += 1.0 - lam
        mat[i, i1] += lam
    return mat


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of N,C,h,w to N,C,out_h,out_w with half-pixel centers."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects N,C,h,w; got rank {x.ndim}")
    _, _, h, w = x.shape
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample cannot downsample {h}x{w} to {out_h}x{out_w}")
    ah = _interp_matrix(h, out_h)
    aw = _interp_matrix(w, out_w)
    xd = x.data.astype(np.float64, copy=False)
    out = np.einsum("ih,nchw,jw->ncij", ah, xd, aw, optimize=True).astype(x.dtype)

    def fn(g):
        g64 = g.astype(np.float64, copy=False)
        return (np.einsum("ih,ncij,jw->nchw", ah, g64, aw, optimize=True),)

    return _node(out, (x,), fn, "upsample")


def avg_pool(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool: {h}x{w} not divisible by {k}")
    return mean(reshape(x, (n, c, h // k, k, w // k, k)), axis=(3, 5))


# -- normalisation and losses -------------------------------------------------
def layer_normalize_per_channel(x: Tensor, channel_axis: int = -1, eps: float = 1e-30) -> Tensor:
    """Zero-mean, unit-variance rescaling of each channel over its spatial extent.

    Channels with zero variance map to zeros.
    """
    axis = channel_axis % x.ndim
    red = tuple(d for d in range(x.ndim) if d != axis)
    xd = x.data.astype(np.float64, copy=False)
    mu = xd.mean(axis=red, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=red, keepdims=True)
    inv = np.where(var > eps, 1.0 / np.sqrt(np.maximum(var, eps)), 0.0)
    y = xc * inv
    out = y.astype(x.dtype)
    m = int(np.prod([x.shape[d] for d in red]))

    def fn(g):
        g64 = g.astype(np.float64, copy=False)
        gm = g64.mean(axis=red, keepdims=True)
        gy = (g64 * y).sum(axis=red, keepdims=True) / m
        return (inv * (g64 - gm - y * gy),)

    return _node(out, (x,), fn, "layernorm")


def binary_ce(pred: Tensor, target, mode: str = "full") -> Tensor:
    """Per-element cross entropy of probabilities against {0,1} targets.

    ``literal`` keeps only the foreground term ``-y log p``; ``full`` is the
    usual two-sided binary cross entropy. Predictions are clamped to
    ``[1e-7, 1 - 1e-7]`` first.
    """
    if mode not in ("literal", "full"):
        raise ValueError(f"unknown cross-entropy mode {mode!r}")
    y = no_grad_value(target).astype(np.float64)
    if y.shape != pred.shape:
        raise ShapeError(f"binary_ce: prediction {pred.shape} vs target {y.shape}")
    p = clamp(pred, CE_EPS, 1.0 - CE_EPS)
    pd = p.data.astype(np.float64)
    if mode == "literal":
        out = -y * np.log(pd)

        def fn(g):
            return (-g * y / pd,)

    else:
        out = -(y * np.log(pd) + (1.0 - y) * np.log1p(-pd))

        def fn(g):
            return (g * (pd - y) / (pd * (1.0 - pd)),)

    return _node(out.astype(pred.dtype), (p,), fn, "bce")
