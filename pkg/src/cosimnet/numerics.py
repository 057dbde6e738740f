"""Dense tensors with reverse-mode differentiation, and an SGD optimizer.

Every op takes and returns :class:`Tensor`. Spatial ops accept either a single
``C x H x W`` map or a batch ``N x C x H x W``; the channel axis is always -3.
All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument, PreconditionError

DTYPE = np.float64


class Tensor:
    """A float64 array plus an optional gradient slot and graph links."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward(g)`` receives the upstream gradient and returns one gradient
    (or ``None``) per parent, in order.
    """
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def square(x: Tensor) -> Tensor:
    return make_op(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op(y, (x,), lambda g: (g * y,))


def tabs(x: Tensor) -> Tensor:
    """Absolute value; subgradient 0 at exactly 0."""
    return make_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is 0."""
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tsum(x: Tensor, axis=None) -> Tensor:
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)
    return make_op(x.data.sum(axis=axis), (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))
    return make_op(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), back)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return make_op(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- spatial ops

def _as_batch(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise InvalidArgument(f"{op}: expected C x H x W or N x C x H x W input, got shape {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation plus per-channel bias."""
    xb, squeeze = _as_batch(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise InvalidArgument(f"conv2d: kernel must be C_out x C_in x k x k, got {kernel.shape}")
    n, c, h, w = xb.shape
    c_out, c_in, k, _ = kernel.shape
    if c_in != c:
        raise InvalidArgument(f"conv2d: input channels {c} != kernel in-channels {c_in}")
    if bias.shape != (c_out,):
        raise InvalidArgument(f"conv2d: bias length {bias.shape} != kernel out-channels {c_out}")
    if stride < 1 or pad < 0:
        raise InvalidArgument(f"conv2d: stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    if k > h + 2 * pad:
        raise InvalidArgument(f"conv2d: kernel height {k} exceeds padded input height {h + 2 * pad}")
    if k > w + 2 * pad:
        raise InvalidArgument(f"conv2d: kernel width {k} exceeds padded input width {w + 2 * pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    # channel-major layout: columns are (C*k*k) x (N*Ho*Wo), filled by k*k slice copies
    xt = xb.data.transpose(1, 0, 2, 3)
    xp = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xt
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    wmat = kernel.data.reshape(c_out, c * k * k)
    out = (wmat @ cols + bias.data[:, None]).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, n * ho * wo)
        gk = (gt @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gt.sum(axis=1) if bias.requires_grad else None
        gx = None
        if xb.requires_grad:
            dcols = (wmat.T @ gt).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = (gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp).transpose(1, 0, 2, 3)
        return gx, gk, gb

    return _unbatch(make_op(out, (xb, kernel, bias), back), squeeze)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Window maximum; the gradient goes to the first maximum in scan order."""
    xb, squeeze = _as_batch(x, "maxpool2d")
    n, c, h, w = xb.shape
    if k < 1 or stride < 1:
        raise InvalidArgument(f"maxpool2d: window {k} and stride {stride} must be positive")
    if k > h or k > w:
        raise InvalidArgument(f"maxpool2d: window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    if k == stride and h % k == 0 and w % k == 0:
        return _unbatch(_maxpool_tiled(xb, k), squeeze)
    win = sliding_window_view(xb.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros(xb.shape)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(hit, g, 0.0)
        return (gx,)

    return _unbatch(make_op(out, (xb,), back), squeeze)


def _maxpool_tiled(xb: Tensor, k: int) -> Tensor:
    # non-overlapping windows are a reshape view; walk offsets in scan order
    n, c, h, w = xb.shape
    tiles = xb.data.reshape(n, c, h // k, k, w // k, k)
    offsets = [(i, j) for i in range(k) for j in range(k)]
    out = tiles[:, :, :, 0, :, 0].copy()
    for i, j in offsets[1:]:
        np.maximum(out, tiles[:, :, :, i, :, j], out=out)
    taken = np.zeros(out.shape, dtype=bool)
    picks = []
    for i, j in offsets:
        hit = ~taken & (tiles[:, :, :, i, :, j] == out)
        taken |= hit
        picks.append(hit)

    def back(g):
        gx = np.zeros((n, c, h // k, k, w // k, k))
        for (i, j), hit in zip(offsets, picks):
            gx[:, :, :, i, :, j] = np.where(hit, g, 0.0)
        return (gx.reshape(n, c, h, w),)

    return make_op(out, (xb,), back)


def interp_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape n_dst x n_src."""
    m = np.zeros((n_dst, n_src))
    if n_src == 1 or n_dst == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    i0 = np.minimum(np.floor(pos).astype(int), n_src - 1)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = pos - i0
    rows = np.arange(n_dst)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_upsample(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Align-corners bilinear upsampling of the last two axes."""
    if x.ndim < 2:
        raise InvalidArgument(f"bilinear_upsample: need at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    if h_out < h or w_out < w:
        raise InvalidArgument(
            f"bilinear_upsample: target {h_out}x{w_out} smaller than source {h}x{w}")
    a = interp_matrix(h, h_out)
    b = interp_matrix(w, w_out)
    out = a @ x.data @ b.T
    # rounding in (1-f)a + f b can leave the input range by an ulp
    out = np.clip(out, x.data.min(), x.data.max())
    return make_op(out, (x,), lambda g: (a.T @ g @ b,))


def l2_normalize_channels(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each channel vector by max(its l2 norm, eps)."""
    if eps <= 0:
        raise InvalidArgument(f"l2_normalize_channels: eps must be positive, got {eps}")
    norm = np.sqrt((x.data * x.data).sum(axis=-3, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    big = norm > eps

    def back(g):
        proj = (g * y).sum(axis=-3, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / denom),)

    return make_op(y, (x,), back)


def channel_l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Per-location Euclidean distance over the channel axis (-3)."""
    if a.shape != b.shape:
        raise InvalidArgument(f"distance: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=-3))

    def back(g):
        # zero subgradient where the two vectors coincide
        safe = np.where(d > 0, d, 1.0)
        gd = np.where(d > 0, g / safe, 0.0)[..., None, :, :] * diff
        return gd, -gd

    return make_op(d, (a, b), back)


def channel_cosine(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-location cosine similarity over the channel axis (-3)."""
    if a.shape != b.shape:
        raise InvalidArgument(f"cosine: shapes differ, {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=-3))
    nb = np.sqrt((b.data * b.data).sum(axis=-3))
    da, db = np.maximum(na, eps), np.maximum(nb, eps)
    dot = (a.data * b.data).sum(axis=-3)
    s = dot / (da * db)

    def back(g):
        ga = b.data / (da * db)[..., None, :, :]
        gb = a.data / (da * db)[..., None, :, :]
        # norm terms only vary where the eps guard is inactive
        ga = ga - np.where(na > eps, s / (na * na + (na <= eps)), 0.0)[..., None, :, :] * a.data
        gb = gb - np.where(nb > eps, s / (nb * nb + (nb <= eps)), 0.0)[..., None, :, :] * b.data
        g4 = g[..., None, :, :]
        return g4 * ga, g4 * gb

    return make_op(s, (a, b), back)


# ---------------------------------------------------------------- autodiff

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reaching ``loss``.

    Gradients add onto whatever is already stored; call :func:`zero_grads`
    between optimizer steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise InvalidArgument(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- parameters

@dataclass(eq=False)
class Parameter:
    """A named trainable tensor with its momentum buffer and lr group."""

    name: str
    value: Tensor
    group: str = "backbone"
    momentum_buffer: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = Tensor(self.value.data if isinstance(self.value, Tensor) else self.value,
                            requires_grad=True)
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value.data)
        if self.momentum_buffer.shape != self.value.shape:
            raise InvalidArgument(f"{self.name}: momentum buffer shape mismatch")

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.value.grad = None


def sgd_step(params: Iterable[Parameter], lr_per_group: Mapping[str, float],
             momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """One SGD-with-momentum update, in place.

    Per parameter: ``g = grad + wd * value``, ``buf = momentum * buf + g``,
    ``value -= lr * buf``.
    """
    for p in params:
        if p.value.grad is None:
            raise PreconditionError(f"sgd_step: parameter {p.name!r} has no gradient")
        if p.group not in lr_per_group:
            raise InvalidArgument(f"sgd_step: no learning rate for group {p.group!r}")
        g = p.value.grad + weight_decay * p.value.data if weight_decay else p.value.grad
        p.momentum_buffer = momentum * p.momentum_buffer + g if momentum else g.copy()
        p.value.data = p.value.data - lr_per_group[p.group] * p.momentum_buffer


# ---------------------------------------------------------------- verification

def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``fn(*inputs)`` must return a scalar. Relative error per element is
    ``|a - c| / max(1e-8, |a| + |c|)``.
    """
    inputs = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    out = fn(*inputs)
    if out.data.size != 1:
        raise InvalidArgument(f"grad_check: fn must return a scalar, got shape {out.shape}")
    backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(*[Tensor(u.data) for u in inputs]).data)
            flat[i] = orig - eps
            lo = float(fn(*[Tensor(u.data) for u in inputs]).data)
            flat[i] = orig
            central = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - central) / max(1e-8, abs(a) + abs(central)))
    return worst
