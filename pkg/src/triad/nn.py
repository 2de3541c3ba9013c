"""Parameter containers and the transformer building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import (
    Tensor,
    layer_norm_rows,
    matmul,
    permute,
    relu,
    reshape,
    softmax_rows,
    swap_last,
)


def param(array: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float32), requires_grad=True, name=name)


def gaussian(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


def zeros(shape) -> Tensor:
    return param(np.zeros(shape))


def ones(shape) -> Tensor:
    return param(np.ones(shape))


class Module:
    """Holds named parameters; sub-modules and lists of them are walked in
    attribute insertion order, so parameter order is deterministic."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        self.weight = gaussian(rng, (n_in, n_out), 1.0 / math.sqrt(n_in))
        self.bias = zeros((n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = ones((dim,))
        self.bias = zeros((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm_rows(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"embedding width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)

    def __call__(self, q: Tensor, kv: Tensor, mask: np.ndarray | None) -> Tensor:
        return masked_attention(q, kv, mask, self.heads, self)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, dim = x.shape
    x = reshape(x, (*lead, length, heads, dim // heads))
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return permute(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, d = x.shape
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return reshape(permute(x, axes), (*lead, length, heads * d))


def masked_attention(q: Tensor, kv: Tensor, mask, heads: int, proj: MultiHeadAttention) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``q`` is ``(..., Lq, e)``, ``kv`` is ``(..., Lk, e)``.  ``mask`` is
    boolean and broadcastable to ``(..., Lq, Lk)``; ``mask[i, j]`` True means
    query ``i`` may attend to key ``j``.  Every query must see a key.
    """
    dim = q.shape[-1]
    if dim % heads:
        raise ValueError(f"embedding width {dim} not divisible by {heads} heads")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        full = np.broadcast_shapes(mask.shape, (*q.shape[:-2], q.shape[-2], kv.shape[-2]))
        if not np.broadcast_to(mask, full).any(axis=-1).all():
            raise ValueError("attention mask leaves a query with no visible key")
        mask = np.expand_dims(mask, -3)  # broadcast over heads
    qh = _split_heads(proj.q(q), heads)
    kh = _split_heads(proj.k(kv), heads)
    vh = _split_heads(proj.v(kv), heads)
    scores = matmul(qh, swap_last(kh)) * (1.0 / math.sqrt(dim // heads))
    attn = softmax_rows(scores, mask)
    return proj.o(_merge_heads(matmul(attn, vh)))


class TransformerLayer(Module):
    """Pre-norm self-attention block followed by a ReLU feed-forward block."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ff_mult: int = 2):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(rng, dim, ff_mult * dim)
        self.ff2 = Linear(rng, ff_mult * dim, dim)

    def __call__(self, x: Tensor, mask) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff2(relu(self.ff1(self.norm2(x))))


class TransformerStack(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, layers: int, ff_mult: int = 2):
        self.layers = [TransformerLayer(rng, dim, heads, ff_mult) for _ in range(layers)]
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor, mask) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)
