"""Dense tensors with reverse-mode automatic differentiation.

Each differentiable op builds an output ``Tensor`` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients. ``backward`` sorts the
graph topologically and visits every node once, in reverse order.

Storage is float32 by default. Pass float64 arrays (or ``dtype=np.float64``) to get a
64-bit graph, which is what the finite-difference checks use.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError

ArrayLike = Union[np.ndarray, Sequence, float, int]
GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._grad_fn: Optional[GradFn] = None
        self.op = "leaf"

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    out.op = op
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + a.dtype.type(c), (a,), lambda g: (g,), "add")
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _make(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the value was not clipped."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, x.dtype.type(lo), x.dtype.type(hi))
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ContractError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ContractError("transpose expects a matrix")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


# ---------------------------------------------------------------------------
# reductions and losses


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def reduce_mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _make(np.asarray(x.data.sum() / n, dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    val = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def grad_fn(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(a.dtype), (-ga).astype(b.dtype)

    return _make(val, (a, b), grad_fn, "mse")


def bce_with_logits(logits: Tensor, target: np.ndarray, weight: Optional[np.ndarray] = None) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a constant target."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.shape:
        raise ContractError(f"bce: shape mismatch {z.shape} vs {t.shape}")
    w = np.ones_like(z) if weight is None else np.asarray(weight, dtype=z.dtype)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    val = np.asarray((w * per).sum() / n, dtype=z.dtype)

    def grad_fn(g):
        with np.errstate(over="ignore"):  # exp overflow gives s = 0, the correct limit
            s = 1.0 / (1.0 + np.exp(-z))
        return ((g / n) * w * (s - t)).astype(z.dtype),

    return _make(val, (logits,), grad_fn, "bce")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def channel_matmul(left: np.ndarray, x: Tensor, right: np.ndarray) -> Tensor:
    """``left @ x[c] @ right`` for every channel of a C x H x W tensor, constant filters."""
    if x.data.ndim != 3:
        raise ContractError(f"channel_matmul expects C x H x W, got {x.shape}")
    if left.shape[1] != x.shape[1] or right.shape[0] != x.shape[2]:
        raise ContractError(f"channel_matmul: {left.shape} @ {x.shape} @ {right.shape}")
    left = left.astype(x.dtype, copy=False)
    right = right.astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(left, x.data), right)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(left.T, g), right.T),), "channel_matmul")


@lru_cache(maxsize=32)
def bilinear_matrix(n: int, factor: int) -> np.ndarray:
    """(n*factor) x n interpolation matrix with half-pixel centres and edge clamping."""
    m = n * factor
    mat = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        src = min(max((i + 0.5) / factor - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        w = src - i0
        mat[i, i0] += 1.0 - w
        mat[i, i1] += w
    mat.setflags(write=False)
    return mat


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of a C x H x W (or H x W) tensor by an integer factor."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ContractError(f"upsample factor must be a positive integer, got {factor!r}")
    squeeze = x.data.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    _, h, w = x.shape
    out = channel_matmul(bilinear_matrix(h, factor), x, bilinear_matrix(w, factor).T)
    out.op = "upsample"
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """Cross-correlation of a C_in x H x W input with C_out x C_in x k x k filters."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ContractError(f"conv2d expects C x H x W input and 4-d weights, got {x.shape}, {w.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ContractError(f"conv2d needs square odd kernels, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ContractError(f"conv2d: input has {x.shape[0]} channels, weights expect {c_in}")
    if pad is None:
        pad = (k - 1) // 2
    _, h, wd = x.shape
    if stride < 1 or (stride > 1 and (h % stride or wd % stride)):
        raise ContractError(f"conv2d: size {h}x{wd} incompatible with stride {stride}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractError("conv2d: output would be empty")
    if b is not None and b.shape != (c_out,):
        raise ContractError(f"conv2d: bias shape {b.shape} != ({c_out},)")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # columns: (c_in*k*k, ho*wo)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * k * k, ho * wo)
    wmat = w.data.reshape(c_out, -1)
    out = wmat @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(c_out, ho, wo)

    def grad_fn(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gcols = (wmat.T @ g2).reshape(c_in, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += gcols[:, di, dj]
        gx = gxp[:, pad:pad + h, pad:pad + wd]
        gb = g2.sum(axis=1) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, grad_fn, "conv2d")


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with ``requires_grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
