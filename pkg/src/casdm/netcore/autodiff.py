"""Tensor-level reverse-mode automatic differentiation over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output cotangent to one cotangent per parent. The graph is built
eagerly; :func:`backward` walks it in reverse topological order.

Images use NHWC layout throughout.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    # numpy must defer to our reflected operators (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward: BackwardFn | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data = np.asarray(data)
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def leaf(data, requires_grad: bool = True, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=False)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x) if like is None else np.asarray(x, dtype=like.dtype)
    return Tensor(arr)


def _make(data, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, parents=parents, backward=backward, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2 * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x| and much faster than expit
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * s * (1 + x * (1 - s)),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return _make(x * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[index] = g
        return (out,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if need_b else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def stop_gradient(x: Tensor) -> Tensor:
    """Same value as ``x``, no edge back into the graph."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# image ops (NHWC)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(n, h, w, c) -> (n*h*w, kh*kw*c) patches of the zero-padded input, (i, j, c) order."""
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    return np.concatenate(
        [xp[:, i : i + h, j : j + w, :] for i in range(kh) for j in range(kw)], axis=-1
    ).reshape(n * h * w, kh * kw * c)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution. ``w`` has shape (kh, kw, cin, cout), odd kernels."""
    n, h, wd, c = x.shape
    kh, kw, cin, cout = w.shape
    if cin != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel sizes must be odd")
    pointwise = kh == 1 and kw == 1
    w2 = w.data.reshape(kh * kw * cin, cout)
    cols = x.data.reshape(n * h * wd, c) if pointwise else _im2col(x.data, kh, kw)
    out = (cols @ w2).reshape(n, h, wd, cout)
    wshape = w.shape
    need_w, need_x = w.requires_grad, x.requires_grad

    def bw(g):
        g2 = g.reshape(n * h * wd, cout)
        gw = (cols.T @ g2).reshape(wshape) if need_w else None
        if not need_x:
            return None, gw
        if pointwise:
            return (g2 @ w2.T).reshape(n, h, wd, c), gw
        # input gradient = 'same' convolution of g with the flipped, transposed kernel
        wf = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
        gx = (_im2col(g, kh, kw) @ wf).reshape(n, h, wd, c)
        return gx, gw

    y = _make(out, (x, w), bw)
    return y if b is None else add(y, b)


def avg_pool2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial size {h}x{w} is not even")
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
        return (g * 0.25,)

    return _make(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(1, 2))


def upsample2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _make(out, (x,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),))


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (n_out, n_in) interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, h, w, c = x.shape
    if (out_h, out_w) == (h, w):
        return x
    ry = bilinear_matrix(h, out_h, x.dtype)
    rx = bilinear_matrix(w, out_w, x.dtype)
    # (oh,h) x (n,h,w,c) -> (n,oh,w,c) -> (n,oh,ow,c)
    tmp = np.einsum("ah,nhwc->nawc", ry, x.data, optimize=True)
    out = np.einsum("bw,nawc->nabc", rx, tmp, optimize=True)

    def bw(g):
        gt = np.einsum("bw,nabc->nawc", rx, g, optimize=True)
        return (np.einsum("ah,nawc->nhwc", ry, gt, optimize=True),)

    return _make(out, (x,), bw)


def _group_mean(a: np.ndarray) -> np.ndarray:
    # a: (n, hw, groups, cg); two single-axis sums are far faster than one 2-axis mean
    return a.sum(axis=1, keepdims=True).sum(axis=3, keepdims=True) * (1.0 / (a.shape[1] * a.shape[3]))


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, h, w, c = x.shape
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, h * w, groups, c // groups)
    xc = xg - _group_mean(xg)
    var = _group_mean(xc * xc)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def bw(g):
        gg = g.reshape(xg.shape)
        gm = _group_mean(gg)
        gxm = _group_mean(gg * xhat)
        return ((rstd * (gg - gm - xhat * gxm)).reshape(n, h, w, c),)

    normed = _make(xhat.reshape(n, h, w, c), (x,), bw)
    return add(mul(normed, gamma), beta)


# ---------------------------------------------------------------------------
# backward pass


def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Reverse sweep from ``loss``; returns cotangents keyed by ``id(tensor)``.

    ``loss`` must be a scalar unless an explicit ``seed`` cotangent is given.
    """
    if seed is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
    if not loss.requires_grad:
        return grads
    for node in reversed(_topo(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def grad(loss: Tensor, wrt: Mapping[str, Tensor] | Iterable[Tensor]) -> dict:
    """Gradients of scalar ``loss`` for each tensor in ``wrt``.

    Tensors the loss cannot reach get an all-zero array of matching shape.
    """
    table = backward(loss)
    if isinstance(wrt, Mapping):
        return {
            k: table.get(id(t), np.zeros(t.shape, dtype=t.dtype)).astype(t.dtype, copy=False)
            for k, t in wrt.items()
        }
    return [table.get(id(t), np.zeros(t.shape, dtype=t.dtype)) for t in wrt]
