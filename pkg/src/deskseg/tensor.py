"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to one gradient per parent.  The graph hanging off a loss is
the tape: :func:`backward` walks it once in reverse topological order, so
nothing is global and each forward pass owns its tape.

Only leaves (tensors created directly with ``requires_grad=True``) keep a
``.grad`` buffer; intermediate gradients live in a dict local to the
``backward`` call, which is why calling it twice accumulates leaf gradients
exactly twice.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Raised for op configurations outside what is supported."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # basic introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result; record the graph edge only if some parent needs it."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# backward pass


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
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf's ``.grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    return _make(out, (x,), lambda g: (g * expit(d),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not add up to extent {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + n)
        out.append(getitem(x, tuple(sl)))
        start += n
    return out


def flatten_spatial(x: Tensor) -> Tensor:
    """C×H×W map -> (H·W)×C token sequence, row-major over pixels."""
    c, h, w = x.shape
    return transpose(reshape(x, (c, h * w)))


def unflatten_spatial(tokens: Tensor, height: int, width: int) -> Tensor:
    """(H·W)×C token sequence -> C×H×W map; inverse of :func:`flatten_spatial`."""
    k, c = tokens.shape
    if k != height * width:
        raise DimensionError(f"unflatten: {k} tokens cannot fill a {height}x{width} grid")
    return reshape(transpose(tokens), (c, height, width))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def channel_dot(queries: Tensor, fmap: Tensor) -> Tensor:
    """N×C queries against a C×H×W map -> N×H×W inner products over channels."""
    c, h, w = fmap.shape
    if queries.shape[-1] != c:
        raise DimensionError(f"channel_dot: query width {queries.shape[-1]} vs map channels {c}")
    return reshape(matmul(queries, reshape(fmap, (c, h * w))), (queries.shape[0], h, w))


# ---------------------------------------------------------------------------
# normalisation and softmax


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax.  Where ``mask`` is False the output is exactly 0.

    Every slice along ``axis`` must keep at least one unmasked entry.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a slice is fully masked")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _make(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise along one axis with a per-feature affine along that same axis."""
    ax = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=ax, keepdims=True) + eps)
    xhat = xc * inv
    w = weight.data.reshape(bshape)
    out = xhat * w + bias.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != ax)

    def bw(g):
        gx_hat = g * w
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=ax, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=ax, keepdims=True)
        )
        gw = (g * xhat).sum(axis=other).reshape(weight.shape)
        gb = g.sum(axis=other).reshape(bias.shape)
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw)


# ---------------------------------------------------------------------------
# convolutions and resampling


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in×H×W map with a C_out×C_in×kH×kW kernel."""
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp or stride < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (cin, ho, wo, kh, kw) -> (cin*kh*kw, ho*wo)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(cin * kh * kw, ho * wo)
    w2 = weight.data.reshape(cout, -1)
    out = w2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(cout, ho, wo)

    def bw(g):
        g2 = g.reshape(cout, ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape)
        dcols = (w2.T @ g2).reshape(cin, kh, kw, ho, wo)
        gxp = np.zeros((cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution with a C_in×C_out×2×2 kernel and stride 2.

    Output windows do not overlap in this geometry, so each input pixel
    writes its own 2×2 output block.
    """
    if weight.ndim != 4 or weight.shape[2:] != (2, 2) or stride != 2:
        raise ConfigurationError(
            f"conv_transpose2d supports only 2x2 kernels at stride 2, got {weight.shape[2:]} / {stride}"
        )
    if x.ndim != 3 or weight.shape[0] != x.shape[0]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} incompatible with kernel {weight.shape}")
    cin, h, w = x.shape
    cout = weight.shape[1]
    x2 = x.data.reshape(cin, h * w)
    w2 = weight.data.reshape(cin, cout * 4)
    y = (w2.T @ x2).reshape(cout, 2, 2, h, w).transpose(0, 3, 1, 4, 2).reshape(cout, 2 * h, 2 * w)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def bw(g):
        g2 = g.reshape(cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3).reshape(cout * 4, h * w)
        gx = (w2 @ g2).reshape(x.shape)
        gw = (x2 @ g2.T).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, bw)


def resample_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """n_out×n_in matrix resampling a 1-D signal (half-pixel centres)."""
    if n_out < 1 or n_in < 1:
        raise DimensionError(f"resample: extents must be positive, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    rows = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum(np.floor(rows * scale).astype(int), n_in - 1)
        m[rows, src] = 1.0
    elif mode == "bilinear":
        src = np.maximum((rows + 0.5) * scale - 0.5, 0.0)
        i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        np.add.at(m, (rows, i0), 1.0 - frac)
        np.add.at(m, (rows, i1), frac)
    else:
        raise ConfigurationError(f"unknown interpolation mode {mode!r}")
    return m


def interpolate(x: Tensor, height: int, width: int, mode: str = "bilinear") -> Tensor:
    """Resize a C×H×W map (bilinear uses the align-corners=False convention)."""
    if height < 1 or width < 1:
        raise DimensionError(f"interpolate: target {height}x{width} has a zero extent")
    _, h, w = x.shape
    if (h, w) == (height, width):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    ry = resample_matrix(h, height, mode)
    rx = resample_matrix(w, width, mode)
    out = ry @ x.data @ rx.T
    return _make(out, (x,), lambda g: (ry.T @ g @ rx,))


def interpolate_array(x: np.ndarray, height: int, width: int, mode: str = "bilinear") -> np.ndarray:
    """Same resampling as :func:`interpolate` on a plain (..., H, W) array."""
    h, w = x.shape[-2:]
    if (h, w) == (height, width):
        return x.copy()
    return resample_matrix(h, height, mode) @ x @ resample_matrix(w, width, mode).T


# ---------------------------------------------------------------------------
# gradient checking


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``x.data`` in place."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, floored so all-zero gradients compare as 0."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(num / den)


def gradcheck(fn: Callable[[], Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between backward() and finite differences over ``inputs``."""
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, h)))
    return worst
