"""Dense arrays with reverse-mode differentiation.

Only the operator set used by the registration network is provided. Arrays
are numpy buffers in row-major order; there is no implicit broadcasting
except for the batch dimensions of :func:`matmul`.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        t = cls.__new__(cls)
        data = np.asarray(data)
        data.flags.writeable = False
        t.data = data
        t.grad = None
        t.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t.requires_grad = False
            t._parents = ()
            t._backward = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- graph traversal -------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Leaves listed in ``params`` that the loss does not reach get zero grads.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# -- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return Tensor._result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = a.data / b.data
    return Tensor._result(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def scale(a: Tensor, k: float) -> Tensor:
    return Tensor._result(a.data * a.dtype.type(k), (a,), lambda g: (g * a.dtype.type(k),), "scale")


def shift(a: Tensor, k: float) -> Tensor:
    return Tensor._result(a.data + a.dtype.type(k), (a,), lambda g: (g,), "shift")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf form of the normal CDF."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * d * d) / np.sqrt(2.0 * np.pi)
    out = (d * cdf).astype(d.dtype, copy=False)
    return Tensor._result(out, (x,), lambda g: ((g * (cdf + d * pdf)).astype(d.dtype, copy=False),), "gelu")


# -- shape manipulation ----------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} along axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in xs], axis=ax), xs, bw, "concat")


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing only."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (isinstance(k, (slice, int)) or k is Ellipsis or k is None):
            raise TypeError("getitem: only basic slicing is differentiable; use gather for index arrays")
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return Tensor._result(out, (x,), bw, "getitem")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to extent {x.shape[ax]}")
    parts, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        parts.append(getitem(x, tuple(idx)))
        start += n
    return parts


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows of a (N, C) tensor picked by an integer array; index -1 yields a zero row."""
    if x.ndim != 2:
        raise ShapeError(f"gather: expected (N, C) source, got {x.shape}")
    index = np.asarray(index, dtype=np.int64)
    n, c = x.shape
    if index.size and (index.min() < -1 or index.max() >= n):
        raise IndexError(f"gather: index out of range for {n} rows")
    padded = np.concatenate([x.data, np.zeros((1, c), x.dtype)], axis=0)
    out = padded[index]

    def bw(g):
        gx = np.zeros((n + 1, c), dtype=g.dtype)
        np.add.at(gx, index.ravel(), g.reshape(-1, c))
        return (gx[:n],)

    return Tensor._result(out, (x,), bw, "gather")


def scatter_add(x: Tensor, index: np.ndarray, rows: int) -> Tensor:
    """Adjoint of :func:`gather`: sum rows of ``x`` (..., C) into a (rows, C) tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.shape[:-1] != index.shape:
        raise ShapeError(f"scatter_add: index shape {index.shape} vs source {x.shape}")
    if index.size and (index.min() < -1 or index.max() >= rows):
        raise IndexError(f"scatter_add: index out of range for {rows} rows")
    c = x.shape[-1]
    out = np.zeros((rows + 1, c), dtype=x.dtype)
    np.add.at(out, index.ravel(), x.data.reshape(-1, c))

    def bw(g):
        padded = np.concatenate([g, np.zeros((1, c), g.dtype)], axis=0)
        return (padded[index],)

    return Tensor._result(out[:rows], (x,), bw, "scatter_add")


# -- reductions ------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis, keepdims), 1.0 / count)


# -- linear algebra and normalization -------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need at least 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``weight`` is (c_in, c_out)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    c_in, c_out = weight.shape
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, c_out)
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, c_in).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, bw, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last extent {c}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * rstd
    out = xh * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gxh = g * gain.data
        gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        return gx.astype(x.dtype, copy=False), (g * xh).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out.astype(x.dtype, copy=False), (x, gain, bias), bw, "layer_norm")


# -- spatial ---------------------------------------------------------------


def grid_sample(image: Tensor, coords: Tensor) -> Tensor:
    """Trilinear sampling of ``image`` at voxel coordinates with border clamping.

    ``image`` is (D, H, W) or (C, D, H, W); ``coords`` is (3, ...) holding
    (depth, height, width) positions in voxel units. The result has shape
    ``coords.shape[1:]`` (prefixed by C for channelled images). Coordinates
    outside the volume are clamped, so their gradient is zero.
    """
    squeeze = image.ndim == 3
    vol = image.data[None] if squeeze else image.data
    if vol.ndim != 4 or coords.shape[0] != 3:
        raise ShapeError(f"grid_sample: image {image.shape} / coords {coords.shape} not understood")
    nc = vol.shape[0]
    dims = vol.shape[1:]
    pos = coords.data
    out_shape = pos.shape[1:]

    lo, hi, frac, inside = [], [], [], []
    for a, n in enumerate(dims):
        p = pos[a]
        pc = np.clip(p, 0, n - 1)
        if n > 1:
            with np.errstate(invalid="ignore"):  # NaN positions keep NaN weights below
                i0 = np.clip(np.floor(pc).astype(np.int64), 0, n - 2)
            i1 = i0 + 1
            inside.append((p > 0) & (p < n - 1))
        else:
            i0 = np.zeros(p.shape, np.int64)
            i1 = i0
            inside.append(np.zeros(p.shape, bool))
        lo.append(i0)
        hi.append(i1)
        frac.append((pc - i0).astype(vol.dtype, copy=False))

    flat = vol.reshape(nc, -1)
    _, hh, ww = dims
    corners = []
    for bits in itertools.product((0, 1), repeat=3):
        idx = [hi[a] if bits[a] else lo[a] for a in range(3)]
        lin = (idx[0] * hh + idx[1]) * ww + idx[2]
        fs = [frac[a] if bits[a] else 1 - frac[a] for a in range(3)]
        corners.append((bits, lin, fs))

    out = np.zeros((nc,) + out_shape, vol.dtype)
    for _, lin, fs in corners:
        out = out + (fs[0] * fs[1] * fs[2]) * flat[:, lin]

    def bw(g):
        g = g[None] if squeeze else g
        gimg = np.zeros_like(flat)
        gpos = np.zeros_like(pos)
        size = flat.shape[1]
        for bits, lin, fs in corners:
            w = fs[0] * fs[1] * fs[2]
            lin_r = lin.ravel()
            for ch in range(nc):
                gimg[ch] += np.bincount(lin_r, weights=(w * g[ch]).ravel(), minlength=size).astype(gimg.dtype)
            vals = (flat[:, lin] * g).sum(axis=0)
            for a in range(3):
                sign = 1.0 if bits[a] else -1.0
                others = [fs[b] for b in range(3) if b != a]
                gpos[a] += sign * others[0] * others[1] * vals
        for a in range(3):
            gpos[a] *= inside[a]
        gimg = gimg.reshape(vol.shape)
        return (gimg[0] if squeeze else gimg), gpos

    return Tensor._result(out[0] if squeeze else out, (image, coords), bw, "grid_sample")


def _box1d(a: np.ndarray, radius: int, axis: int) -> np.ndarray:
    pad = [(0, 0)] * a.ndim
    pad[axis] = (radius + 1, radius)
    c = np.cumsum(np.pad(a, pad), axis=axis)
    n = a.shape[axis]
    hi = np.take(c, np.arange(2 * radius + 1, 2 * radius + 1 + n), axis=axis)
    lo = np.take(c, np.arange(0, n), axis=axis)
    return hi - lo


def _box3d(a: np.ndarray, radius: int) -> np.ndarray:
    for ax in range(3):
        a = _box1d(a, radius, ax)
    return a


def box_sum(x: Tensor, radius: int) -> Tensor:
    """Sum over the (2r+1)^3 cube around each voxel of a (D, H, W) tensor, zero outside.

    The zero-padded symmetric box is self-adjoint.
    """
    if x.ndim != 3:
        raise ShapeError(f"box_sum: expected (D, H, W), got {x.shape}")
    return Tensor._result(_box3d(x.data, radius), (x,), lambda g: (_box3d(g, radius),), "box_sum")
