"""Dense tensors with a dynamic reverse-mode tape.

Only the operations the few-shot model needs are provided. Every op accepts
an optional leading batch axis where that makes sense, so a whole stack of
images can go through one im2col + BLAS call.
"""

from __future__ import annotations

import contextlib
from collections.abc import Iterator, Mapping
from typing import Callable, Optional, Sequence

import numpy as np

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GeometryError(ValueError):
    """Convolution/pooling geometry yields an empty output."""


class GradientError(RuntimeError):
    """Violation of the differentiation contract."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``grad`` is populated on leaf tensors that require grad; intermediate
    gradients only exist transiently during :meth:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def _wrap_scalar(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor, params: Optional["ParamStore"] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever is already stored; call
    :meth:`ParamStore.zero_grad` between steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")

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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = g.astype(node.dtype, copy=True)
            else:
                node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if params is not None:
        missing = [name for name, t in params.items() if t.grad is None]
        if missing:
            raise GradientError(f"loss is not connected to parameters: {missing[:5]}")


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap_scalar(a, b)
    b = _wrap_scalar(b, a)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap_scalar(a, b)
    b = _wrap_scalar(b, a)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap_scalar(a, b)
    b = _wrap_scalar(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _wrap_scalar(a, b)
    b = _wrap_scalar(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    xd = x.data
    mask = xd >= floor
    return _make(np.maximum(xd, floor), (x,), lambda g: (g * mask,), "clamp_min")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return _make(xd * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow.

    Results are kept strictly inside (0, 1): deep saturation returns the
    smallest positive subnormal (or the largest value below one) of the dtype.
    """
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype, copy=False)
    fi = np.finfo(xd.dtype)
    out = np.clip(out, fi.smallest_subnormal, np.nextafter(xd.dtype.type(1), xd.dtype.type(0)))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


def norm(x: Tensor, axis: int = -1, floor: float = 1e-12) -> Tensor:
    """Euclidean norm along ``axis`` with a floor guarding the derivative."""
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=axis))
    nf = np.maximum(n, floor)

    def bw(g):
        return (np.expand_dims(g / nf, axis) * xd,)

    return _make(nf, (x,), bw, "norm")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(x.data[index]), (x,), bw, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(data, tensors, bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tensors, bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (both operands >= 2-D)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D; reshape vectors first")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(np.matmul(ad, bd), (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# spatial ops; inputs are [C,H,W] or [B,C,H,W]


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) via im2col and batched GEMM."""
    xd, squeeze = _batched(x)
    B, C, H, W = xd.shape
    if weight.ndim != 4:
        raise ShapeError(f"weight must be [C_out, C_in/groups, kH, kW], got {weight.shape}")
    Co, Cg, kh, kw = weight.shape
    if C % groups or Co % groups or Cg != C // groups:
        raise ShapeError(f"input channels {C} incompatible with weight {weight.shape} for groups={groups}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"bias must have shape ({Co},), got {bias.shape}")
    Ho = conv_output_size(H, kh, stride, dilation, padding)
    Wo = conv_output_size(W, kw, stride, dilation, padding)
    if Ho < 1 or Wo < 1:
        raise GeometryError(
            f"conv output {Ho}x{Wo} for input {H}x{W}, kernel {kh}x{kw}, "
            f"dilation {dilation}, padding {padding}, stride {stride}"
        )
    G, Og, K, P = groups, Co // groups, Cg * kh * kw, Ho * Wo
    wd = weight.data

    if padding:
        xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=xd.dtype)
        xp[:, :, padding:padding + H, padding:padding + W] = xd
    else:
        xp = xd
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    if kh == kw == 1 and stride == 1 and not padding:
        cols = xp.reshape(B, G, K, P)
    else:
        cols6 = np.empty((B, C, kh, kw, Ho, Wo), dtype=xd.dtype)
        for i in range(kh):
            r = i * dilation
            for j in range(kw):
                c = j * dilation
                cols6[:, :, i, j] = xp[:, :, r:r + hs:stride, c:c + ws:stride]
        cols = cols6.reshape(B, G, K, P)
    wm = wd.reshape(G, Og, K)
    out = np.matmul(wm, cols)
    out = out.reshape(B, Co, Ho, Wo)
    if bias is not None:
        out += bias.data[:, None, None]
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gm = g4.reshape(B, G, Og, P)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(gm, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wm, -1, -2), gm)
            if kh == kw == 1 and stride == 1 and not padding:
                gx = gcols.reshape(B, C, H, W)
            else:
                gc6 = gcols.reshape(B, C, kh, kw, Ho, Wo)
                gxp = np.zeros(xp.shape, dtype=xd.dtype)
                for i in range(kh):
                    r = i * dilation
                    for j in range(kw):
                        c = j * dilation
                        gxp[:, :, r:r + hs:stride, c:c + ws:stride] += gc6[:, :, i, j]
                gx = gxp[:, :, padding:padding + H, padding:padding + W]
            if squeeze:
                gx = gx[0]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    xd, squeeze = _batched(x)
    B, C, H, W = xd.shape
    Ho, Wo = H // size, W // size
    if Ho < 1 or Wo < 1:
        raise GeometryError(f"max_pool2d window {size} larger than input {H}x{W}")
    crop = xd[:, :, :Ho * size, :Wo * size]
    win = crop.reshape(B, C, Ho, size, Wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gw = np.zeros(win.shape, dtype=xd.dtype)
        np.put_along_axis(gw, idx, g4[..., None], axis=-1)
        gw = gw.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * size, Wo * size)
        gx = np.zeros(xd.shape, dtype=xd.dtype)
        gx[:, :, :Ho * size, :Wo * size] = gw
        return (gx[0] if squeeze else gx,)

    return _make(out, (x,), bw, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: [..., C, H, W] -> [..., C]."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects [..., C, H, W], got {x.shape}")
    return mean(x, axis=(-2, -1))


def _bin_matrix(size: int, target: int, dtype) -> np.ndarray:
    m = np.zeros((target, size), dtype=dtype)
    for i in range(target):
        lo = (i * size) // target
        hi = ((i + 1) * size) // target
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Average over contiguous floor-edged bins; downsampling only."""
    if x.ndim < 3:
        raise ShapeError(f"adaptive_avg_pool expects [..., C, H, W], got {x.shape}")
    H, W = x.shape[-2:]
    if target_h > H or target_w > W:
        raise NotImplementedError(f"adaptive_avg_pool cannot upsample {H}x{W} to {target_h}x{target_w}")
    if target_h < 1 or target_w < 1:
        raise GeometryError("adaptive_avg_pool target must be at least 1x1")
    if (target_h, target_w) == (H, W):
        return x
    ph = _bin_matrix(H, target_h, x.dtype)
    pw = _bin_matrix(W, target_w, x.dtype)
    out = ph @ x.data @ pw.T

    def bw(g):
        return (ph.T @ g @ pw,)

    return _make(out, (x,), bw, "adaptive_avg_pool")


# ---------------------------------------------------------------------------
# parameter container


class ParamStore(Mapping):
    """Named learnable tensors, iterated in lexicographic name order."""

    def __init__(self, params: Optional[Mapping[str, np.ndarray]] = None):
        self._params: dict[str, Tensor] = {}
        if params:
            for name, value in params.items():
                self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.array(value))
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def count(self) -> int:
        """Total number of learnable scalars."""
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def clear_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self._params[name].data for name in self}

    def copy(self) -> "ParamStore":
        return ParamStore({name: self._params[name].data.copy() for name in self})

    def with_prefix(self, prefix: str) -> dict[str, Tensor]:
        return {n: self._params[n] for n in self if n.startswith(prefix)}
