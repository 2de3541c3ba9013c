"""Multi-view image features and the history text encoder."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    matmul,
    max_over_axis,
    maxpool_over_set,
    permute,
    relu,
    reshape,
    softmax_rows,
    swap_last,
    take_rows,
)
from .errors import ContractError
from .nn import Linear, Module, TransformerStack, gaussian


def _patchify(x: Tensor, p: int) -> Tensor:
    """``(N, H, W, C)`` -> ``(N, H/p, W/p, p*p*C)`` non-overlapping patches."""
    n, h, w, c = x.shape
    x = reshape(x, (n, h // p, p, w // p, p, c))
    x = permute(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (n, h // p, w // p, p * p * c))


class ImageEncoder(Module):
    """Two strided convolutions (kernel == stride) and a dense layer to R^c."""

    def __init__(self, rng: np.random.Generator, image_size: int, c: int, c1: int = 8, c2: int = 16):
        if image_size % 8:
            raise ValueError("image size must be a multiple of 8")
        self.image_size = image_size
        self.conv1 = Linear(rng, 16, c1)
        self.conv2 = Linear(rng, 4 * c1, c2)
        self.fc = Linear(rng, (image_size // 8) ** 2 * c2, c)

    def features(self, images) -> Tensor:
        """``(..., H, W)`` pixel grids to ``(..., c)`` features."""
        images = as_tensor(images)
        lead = images.shape[:-2]
        size = self.image_size
        x = reshape(images, (-1, size, size, 1))
        x = relu(self.conv1(_patchify(x, 4)))
        x = relu(self.conv2(_patchify(x, 2)))
        x = reshape(x, (x.shape[0], -1))
        x = relu(self.fc(x))
        return reshape(x, (*lead, x.shape[-1]))


def _pixels(view) -> np.ndarray:
    return view.pixels if hasattr(view, "pixels") else np.asarray(view, dtype=np.float32)


def encode_views(views: Sequence, encoder: ImageEncoder) -> Tensor:
    """Shared per-view features, max-pooled over the set of views."""
    if not views:
        raise ContractError("encode_views needs at least one view")
    return maxpool_over_set([encoder.features(_pixels(v)[None])[0] for v in views])


def encode_view_batch(images: np.ndarray, view_mask: np.ndarray, encoder: ImageEncoder) -> Tensor:
    """Batched variant: ``images`` ``(B, M, H, W)``, ``view_mask`` ``(B, M)``."""
    if not np.asarray(view_mask).any(axis=1).all():
        raise ContractError("every study needs at least one view")
    feats = encoder.features(images)
    return max_over_axis(feats, axis=1, mask=np.asarray(view_mask, dtype=bool)[..., None])


class TextEncoder(Module):
    """Bidirectional transformer encoder over token ids or continuous rows."""

    def __init__(self, rng: np.random.Generator, vocab_size: int | None, dim: int, heads: int,
                 layers: int, max_len: int, positional: bool = True, ff_mult: int = 2):
        self.vocab_size = vocab_size
        self.positional = positional
        if vocab_size is not None:
            self.embedding = gaussian(rng, (vocab_size, dim), 1.0)
        self.position = gaussian(rng, (max_len, dim), 0.1)
        self.stack = TransformerStack(rng, dim, heads, layers, ff_mult)

    def encode_embeddings(self, x: Tensor, valid: np.ndarray | None = None) -> Tensor:
        length = x.shape[-2]
        if length < 1:
            raise ContractError("text encoder needs at least one token")
        if length > self.position.shape[0]:
            raise ContractError(f"sequence length {length} exceeds max_len {self.position.shape[0]}")
        if self.positional:
            x = x + self.position[:length]
        mask = None
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            mask = valid[..., None, :]  # key padding, every query row
        return self.stack(x, mask)

    def encode_tokens(self, ids, valid: np.ndarray | None = None) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and ids.max() >= self.vocab_size:
            raise ContractError(f"token id {int(ids.max())} outside vocabulary of size {self.vocab_size}")
        return self.encode_embeddings(take_rows(self.embedding, ids), valid)


def encode_text(tokens: Sequence[int], encoder: TextEncoder) -> Tensor:
    """Hidden states ``(l, e)`` for one token sequence."""
    if len(tokens) < 1:
        raise ContractError("encode_text needs l >= 1")
    return encoder.encode_tokens(np.asarray(tokens)[None])[0]


def summarize_text(queries: Tensor, hidden: Tensor, valid: np.ndarray | None = None,
                   scale: bool = False) -> tuple[Tensor, np.ndarray]:
    """Disease-query attention pooling ``softmax(Q H^T) H``.

    Returns the ``(..., n, e)`` summary and the ``(..., n, l)`` heat-map.
    Logits are unscaled unless ``scale`` is set.
    """
    if queries.shape[-1] != hidden.shape[-1]:
        raise ValueError(f"query width {queries.shape} does not match hidden {hidden.shape}")
    logits = matmul(queries, swap_last(hidden))
    if scale:
        logits = logits * (1.0 / math.sqrt(hidden.shape[-1]))
    mask = None if valid is None else np.asarray(valid, dtype=bool)[..., None, :]
    heat = softmax_rows(logits, mask)
    return matmul(heat, hidden), heat.data
