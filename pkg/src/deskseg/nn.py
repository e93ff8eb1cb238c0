"""Parameter store and the few layer building blocks shared by the model.

Layers are plain functions of ``(params, prefix, inputs)``; a parameter store
is an ordinary ``dict[str, Tensor]`` keyed by dotted path.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict[str, Tensor]


class ParamInit:
    """Seeded initialiser that writes new leaves into a store."""

    def __init__(self, store: Params, seed: int):
        self.store = store
        self.rng = np.random.default_rng(seed)

    def _put(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.store:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=True)
        self.store[name] = t
        return t

    def normal(self, name: str, shape, std: float) -> Tensor:
        return self._put(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._put(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._put(name, np.ones(shape))

    def conv(self, prefix: str, cin: int, cout: int, k: int) -> None:
        self.normal(f"{prefix}.weight", (cout, cin, k, k), math.sqrt(2.0 / (cin * k * k)))
        self.zeros(f"{prefix}.bias", (cout,))

    def conv_transpose(self, prefix: str, cin: int, cout: int, gain: float = 1.0) -> None:
        self.normal(f"{prefix}.weight", (cin, cout, 2, 2), gain * math.sqrt(2.0 / cin))
        self.zeros(f"{prefix}.bias", (cout,))

    def linear(self, prefix: str, din: int, dout: int, gain: float = 1.0) -> None:
        self.normal(f"{prefix}.weight", (din, dout), gain * math.sqrt(2.0 / (din + dout)))
        self.zeros(f"{prefix}.bias", (dout,))

    def layer_norm(self, prefix: str, dim: int) -> None:
        self.ones(f"{prefix}.weight", (dim,))
        self.zeros(f"{prefix}.bias", (dim,))

    def attention(self, prefix: str, dim: int) -> None:
        for part in ("q", "k", "v", "out"):
            self.linear(f"{prefix}.{part}", dim, dim)

    def feed_forward(self, prefix: str, dim: int, hidden: int) -> None:
        self.linear(f"{prefix}.fc1", dim, hidden, gain=math.sqrt(2.0))
        self.linear(f"{prefix}.fc2", hidden, dim)


def detached(params: Params) -> Params:
    """Views of the same buffers that record no graph (inference)."""
    return {k: Tensor(v.data) for k, v in params.items()}


def fresh_leaves(params: Params) -> Params:
    """Views of the same buffers with their own gradient slots (per-worker tapes)."""
    return {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}


def zero_grad(params: Params) -> None:
    for p in params.values():
        p.grad = None


def linear(params: Params, prefix: str, x: Tensor) -> Tensor:
    return T.linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def layer_norm(params: Params, prefix: str, x: Tensor, axis: int = -1) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], axis=axis)


def conv(params: Params, prefix: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return T.conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride, padding)


def feed_forward(params: Params, prefix: str, x: Tensor) -> Tensor:
    return linear(params, f"{prefix}.fc2", T.relu(linear(params, f"{prefix}.fc1", x)))


def attention(
    params: Params,
    prefix: str,
    query: Tensor,
    key: Tensor,
    value: Tensor,
    heads: int,
    mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention.

    ``mask`` is a boolean (n_query, n_key) array, True where attending is
    allowed; disallowed positions get exactly zero weight.
    """
    nq, dim = query.shape
    nk = key.shape[0]
    if dim % heads:
        raise T.ConfigurationError(f"width {dim} is not divisible by {heads} heads")
    hd = dim // heads
    q = T.transpose(T.reshape(linear(params, f"{prefix}.q", query), (nq, heads, hd)), (1, 0, 2))
    k = T.transpose(T.reshape(linear(params, f"{prefix}.k", key), (nk, heads, hd)), (1, 2, 0))
    v = T.transpose(T.reshape(linear(params, f"{prefix}.v", value), (nk, heads, hd)), (1, 0, 2))
    scores = T.mul(T.matmul(q, k), 1.0 / math.sqrt(hd))
    weights = T.softmax(scores, axis=-1, mask=None if mask is None else mask[None])
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (1, 0, 2)), (nq, dim))
    out = linear(params, f"{prefix}.out", ctx)
    return (out, weights) if return_weights else out
