"""Parameterised building blocks on top of the autodiff engine.

Layers register their tensors in a :class:`ParamStore` under a dotted prefix
and keep direct references, so loading a checkpoint (which writes into the
stored arrays in place) is visible to every layer immediately.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator | None = None, trainable=True, zero=False, bias=True):
        if zero or rng is None:
            w = np.zeros((d_in, d_out))
        else:
            bound = 1.0 / math.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.d_in, self.d_out = d_in, d_out
        self.weight = store.add(f"{name}.weight", w, trainable)
        self.bias = store.add(f"{name}.bias", np.zeros(d_out), trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int, trainable=True, eps=1e-5):
        self.gain = store.add(f"{name}.gain", np.ones(d), trainable)
        self.bias = store.add(f"{name}.bias", np.zeros(d), trainable)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward:
    """Linear -> relu -> linear."""

    def __init__(self, store, name, d, hidden, rng, trainable=True):
        self.fc1 = Linear(store, f"{name}.fc1", d, hidden, rng, trainable)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, d, rng, trainable)

    def __call__(self, x):
        return self.fc2(ad.relu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


class MultiHeadAttention:
    """Scaled dot-product attention with separate q/k/v/out projections."""

    def __init__(self, store, name, d, heads, rng, trainable=True):
        self.heads = heads
        self.scale = 1.0 / math.sqrt(d // heads)
        self.q = Linear(store, f"{name}.q", d, d, rng, trainable)
        self.k = Linear(store, f"{name}.k", d, d, rng, trainable)
        self.v = Linear(store, f"{name}.v", d, d, rng, trainable)
        self.out = Linear(store, f"{name}.out", d, d, rng, trainable)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor | None = None) -> Tensor:
        value = key if value is None else value
        q = split_heads(self.q(query), self.heads)
        k = split_heads(self.k(key), self.heads)
        v = split_heads(self.v(value), self.heads)
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * self.scale
        attn = ad.softmax(scores, axis=-1)
        return self.out(merge_heads(ad.matmul(attn, v)))
