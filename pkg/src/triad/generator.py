"""Report generator conditioned on the enriched disease embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    concat,
    cross_entropy,
    matmul,
    reshape,
    softmax_rows,
    swap_last,
    take_rows,
)
from .corpus import BOS, EOS, PAD
from .errors import ContractError
from .nn import Module, TransformerStack, gaussian


class Generator(Module):
    """Masked transformer over ``[d_1..d_n, w_1..w_l]``.

    ``embedding`` is the vocabulary table ``W``: it embeds the word inputs
    and scores the output distribution (weight tying).
    """

    def __init__(self, rng: np.random.Generator, vocab_size: int, dim: int, heads: int,
                 layers: int, max_len: int, ff_mult: int = 2):
        self.embedding = gaussian(rng, (vocab_size, dim), 1.0 / math.sqrt(dim))
        self.position = gaussian(rng, (max_len, dim), 0.1)
        self.stack = TransformerStack(rng, dim, heads, layers, ff_mult)


@dataclass
class GeneratorState:
    prefix: np.ndarray
    hidden: np.ndarray
    p_word: np.ndarray
    w_hat: np.ndarray


def _never_emit(v: int) -> np.ndarray:
    out = np.zeros(v, dtype=bool)
    out[[BOS, PAD]] = True
    return out


def generator_mask(n: int, length: int) -> np.ndarray:
    """Disease slots see each other; word ``i`` sees every slot and words ``<= i``."""
    size = n + length
    mask = np.zeros((size, size), dtype=bool)
    mask[:, :n] = True
    mask[n:, n:] = np.tril(np.ones((length, length), dtype=bool))
    return mask


def decode_hidden(prefix, d_enriched: Tensor, gen: Generator) -> Tensor:
    """Word-position hidden states.

    ``prefix`` ``(B, l)`` with ``d_enriched`` ``(B, n, e)``, or a single
    ``(l,)`` prefix with an ``(n, e)`` embedding.
    """
    prefix = np.asarray(prefix)
    if prefix.ndim == 1:
        n, e = d_enriched.shape
        return decode_hidden(prefix[None], reshape(d_enriched, (1, n, e)), gen)[0]
    n = d_enriched.shape[-2]
    length = prefix.shape[-1]
    if length < 1:
        raise ContractError("generator needs a non-empty prefix")
    if length > gen.position.shape[0]:
        raise ContractError(f"prefix length {length} exceeds the context budget {gen.position.shape[0]}")
    words = take_rows(gen.embedding, prefix) + gen.position[:length]
    x = concat([d_enriched, words], axis=1)
    out = gen.stack(x, generator_mask(n, length))
    return out[:, n:, :]


def word_distribution(hidden: Tensor, W: Tensor) -> Tensor:
    return softmax_rows(matmul(hidden, swap_last(W)))


def generation_loss(p_word: Tensor, targets, pad_id: int = PAD) -> Tensor:
    """Teacher-forced cross-entropy, padding positions excluded.

    ``targets`` holds the next-token ids aligned with the rows of ``p_word``.
    """
    targets = np.asarray(targets)
    valid = targets != pad_id
    if not valid.any():
        raise ContractError("generation loss over an all-padding target")
    onehot = np.eye(p_word.shape[-1], dtype=p_word.dtype)[targets]
    return cross_entropy(p_word, onehot, valid)


def weighted_words(p_word: Tensor, W: Tensor) -> Tensor:
    """Expected word embedding ``p_word W``."""
    return matmul(p_word, W)


def greedy_decode(d_enriched: Tensor, gen: Generator, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched greedy decoding.

    Returns ``tokens`` ``(B, 1 + T)`` starting with BOS (PAD after EOS) and
    ``p_word`` ``(B, T, v)`` holding each step's distribution.
    """
    d = as_tensor(d_enriched)
    if d.ndim == 2:
        d = as_tensor(d.data[None])
    if max_len + 1 > gen.position.shape[0]:
        raise ContractError(f"max_len {max_len} exceeds the context budget")
    batch = d.shape[0]
    W = gen.embedding
    tokens = np.full((batch, 1), BOS, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    dists = []
    never = _never_emit(W.shape[0])
    for _ in range(max_len):
        hidden = decode_hidden(tokens, d, gen)
        last = as_tensor(hidden.data[:, -1:, :])
        p = word_distribution(last, W).data[:, 0, :]
        nxt = np.where(never, -1.0, p).argmax(axis=-1)
        nxt = np.where(done, PAD, nxt)
        dists.append(np.where(done[:, None], 0.0, p).astype(p.dtype))
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    return tokens, np.stack(dists, axis=1)


def generate(d_enriched: Tensor, gen: Generator, max_len: int) -> tuple[list[int], GeneratorState]:
    """Decode one study from its ``(n, e)`` embedding."""
    d = as_tensor(d_enriched)
    tokens, p_word = greedy_decode(d, gen, max_len)
    seq = [int(t) for t in tokens[0] if t != PAD]
    p = p_word[0, :len(seq) - 1]
    prefix = np.asarray(seq[:len(p)])
    hidden = decode_hidden(prefix, d, gen).data
    return seq, GeneratorState(np.asarray(seq), hidden, p, p @ gen.embedding.data)
