"""Reads the weighted word embedding back into a checklist.

The interpreter is a text encoder that accepts continuous rows, a set of
disease queries and its own state embedding.  During fine-tuning it is
frozen: its loss still back-propagates through the generated report into
the generator and classifier, but its own parameters never move.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .autodiff import Tensor, matmul, softmax_rows, swap_last
from .classifier import classification_loss
from .encoders import TextEncoder, summarize_text
from .errors import ContractError
from .nn import Module, gaussian


class Interpreter(Module):
    def __init__(self, rng: np.random.Generator, dim: int, n: int, k: int, heads: int,
                 layers: int, max_len: int, ff_mult: int = 2):
        self.encoder = TextEncoder(rng, None, dim, heads, layers, max_len, ff_mult=ff_mult)
        self.queries = gaussian(rng, (n, dim), 1.0 / math.sqrt(dim))
        self.S = gaussian(rng, (k, dim), 1.0 / math.sqrt(dim))
        self.frozen = False

    def freeze(self) -> None:
        self.frozen = True
        self.set_trainable(False)

    def unfreeze(self) -> None:
        self.frozen = False
        self.set_trainable(True)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def interpret_report(w_hat: Tensor, interp: Interpreter, valid: np.ndarray | None = None,
                     scale: bool = False) -> tuple[Tensor, np.ndarray]:
    """Report-summarised disease embedding ``(..., n, e)`` and its heat-map."""
    if w_hat.shape[-2] < 1:
        raise ContractError("interpreter needs at least one word")
    hidden = interp.encoder.encode_embeddings(w_hat, valid)
    return summarize_text(interp.queries, hidden, valid, scale)


def interpret_states(d_txt_hat: Tensor, S_int: Tensor) -> Tensor:
    return softmax_rows(matmul(d_txt_hat, swap_last(S_int)))


def interpreter_loss(p_int: Tensor, y) -> Tensor:
    return classification_loss(p_int, y)


def total_loss(l_c, l_g, l_i=None, weights=(1.0, 1.0, 1.0)):
    """Weighted sum of the three losses; ``l_i`` may be absent."""
    terms = [(l_c, weights[0]), (l_g, weights[1]), (l_i, weights[2])]
    total = None
    for term, w in terms:
        if term is None or w == 0:
            continue
        value = term.data if isinstance(term, Tensor) else term
        if not np.all(np.isfinite(value)):
            raise FloatingPointError("non-finite loss term")
        scaled = term * w if w != 1 else term
        total = scaled if total is None else total + scaled
    if total is None:
        return 0.0
    return total


def fine_tune_step(batch, model, optimizer) -> dict[str, float]:
    """One step on the total loss with the interpreter frozen.

    The interpreter reads the generator's weighted word embedding, so its
    loss reaches generator, classifier and encoder parameters; the frozen
    interpreter parameters are excluded from gradients and updates.
    """
    if not model.interpreter.frozen:
        raise ContractError("fine-tuning requires a frozen interpreter")
    return model.train_step(batch, optimizer, interpreter_input="generated")
