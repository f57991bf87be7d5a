"""Small neural building blocks on top of the autodiff tape."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import SeededRng, Tensor
from .optim import ParameterStore


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 rng: SeededRng, bias: bool = True, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal((d_in, d_out), std=np.sqrt(2.0 / (d_in + d_out)))
        self.w = store.create(f"{name}.w", w)
        self.b = store.create(f"{name}.b", np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w
        if self.b is not None:
            out = out + self.b
        return out


class MLP:
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, store: ParameterStore, name: str, dims: list[int],
                 rng: SeededRng, zero_last: bool = False):
        if len(dims) < 2:
            raise ValueError("MLP needs at least input and output dims")
        self.layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            self.layers.append(Linear(store, f"{name}.{i}", dims[i], dims[i + 1],
                                      rng.child(i), zero_init=zero_last and last))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


def mlp_apply(mlp: MLP, x: Tensor) -> Tensor:
    return mlp(x)


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int):
        self.gamma = store.create(f"{name}.gamma", np.ones(d))
        self.beta = store.create(f"{name}.beta", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention:
    """Scaled dot-product attention; accepts (T, D) or batched (B, T, D) input."""

    def __init__(self, store: ParameterStore, name: str, d_model: int, heads: int,
                 rng: SeededRng):
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(store, f"{name}.q", d_model, d_model, rng.child("q"))
        self.wk = Linear(store, f"{name}.k", d_model, d_model, rng.child("k"))
        self.wv = Linear(store, f"{name}.v", d_model, d_model, rng.child("v"))
        self.wo = Linear(store, f"{name}.o", d_model, d_model, rng.child("o"))

    def _split(self, x: Tensor) -> Tensor:
        # (..., T, D) -> (..., heads, T, d_head)
        shape = x.shape
        t = ad.reshape(x, shape[:-1] + (self.heads, self.d_head))
        axes = tuple(range(len(shape) - 2)) + (len(shape) - 1, len(shape) - 2, len(shape))
        return ad.transpose(t, axes)

    def _merge(self, x: Tensor) -> Tensor:
        # (..., heads, T, d_head) -> (..., T, D)
        nd = len(x.shape)
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        t = ad.transpose(x, axes)
        return ad.reshape(t, t.shape[:-2] + (self.heads * self.d_head,))

    def __call__(self, query: Tensor, memory: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q = self._split(self.wq(query))
        k = self._split(self.wk(memory))
        v = self._split(self.wv(memory))
        logits = (q @ ad.transpose(k, tuple(range(len(k.shape) - 2)) + (len(k.shape) - 1, len(k.shape) - 2))) \
            * (1.0 / np.sqrt(self.d_head))
        if mask is not None:
            logits = logits + Tensor(mask)  # additive; broadcast over heads
        att = ad.softmax(logits, axis=-1)
        out = self._merge(att @ v)
        return self.wo(out)


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, d_model: int, d_hidden: int,
                 rng: SeededRng):
        self.l1 = Linear(store, f"{name}.1", d_model, d_hidden, rng.child(1))
        self.l2 = Linear(store, f"{name}.2", d_hidden, d_model, rng.child(2))

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(ad.relu(self.l1(x)))


# -- sine-cosine positional encodings ------------------------------------------

def sincos_1d(positions: np.ndarray, d: int) -> np.ndarray:
    """Classic transformer encoding of scalar positions into d channels."""
    if d % 2 != 0:
        raise ValueError(f"encoding width must be even, got {d}")
    positions = np.asarray(positions, dtype=np.float64)
    half = d // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = positions[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def sincos_2d_points(xy: np.ndarray, d: int) -> np.ndarray:
    """Encode (..., 2) continuous grid coordinates (x, y) into d channels."""
    if d % 4 != 0:
        raise ValueError(f"2-D encoding width must be divisible by 4, got {d}")
    xy = np.asarray(xy, dtype=np.float64)
    return np.concatenate([sincos_1d(xy[..., 0], d // 2),
                           sincos_1d(xy[..., 1], d // 2)], axis=-1)


def sincos_grid(h: int, w: int, d: int) -> np.ndarray:
    """(h*w, d) encoding of every cell, rows raveled row-major."""
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    xy = np.stack([cols.reshape(-1), rows.reshape(-1)], axis=-1)
    return sincos_2d_points(xy, d)
