"""Disease embeddings, state classification and the enriched embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import Tensor, as_tensor, cross_entropy, matmul, permute, reshape, softmax_rows, swap_last
from .checklist import Checklist, Mode, is_one_hot
from .errors import ContractError
from .nn import LayerNorm, Module, gaussian, zeros


class Phase(str, Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass
class DiseaseEmbeddings:
    d_img: Tensor | None = None
    d_txt: Tensor | None = None
    d_fused: Tensor | None = None
    d_states: Tensor | None = None
    d_topics: Tensor | None = None
    d_enriched: Tensor | None = None


class Classifier(Module):
    def __init__(self, rng: np.random.Generator, c: int, e: int, n: int, k: int):
        self.A = gaussian(rng, (n, c, e), 1.0 / math.sqrt(c))
        self.b = zeros((n, e))
        self.norm = LayerNorm(e)
        self.S = gaussian(rng, (k, e), 1.0 / math.sqrt(e))
        self.topics = gaussian(rng, (n, e), 1.0 / math.sqrt(e))


def project_visual(x: Tensor, A: Tensor, b: Tensor) -> Tensor:
    """Row ``j`` is ``A_j^T x + b_j``; ``x`` is ``(..., c)``, output ``(..., n, e)``."""
    x = as_tensor(x)
    n, c, e = A.shape
    if x.shape[-1] != c:
        raise ValueError(f"visual feature width {x.shape[-1]} != {c}")
    flat = reshape(permute(A, (1, 0, 2)), (c, n * e))
    lead = x.shape[:-1]
    x2 = reshape(x, (-1, c))
    return reshape(matmul(x2, flat), (*lead, n, e)) + b


def fuse(d_img: Tensor, d_txt: Tensor | None, norm: LayerNorm) -> Tensor:
    """Layer-normalised sum; no history means ``d_txt`` is zero."""
    return norm(d_img if d_txt is None else d_img + d_txt)


def classify_states(d_fused: Tensor, S: Tensor) -> Tensor:
    return softmax_rows(matmul(d_fused, swap_last(S)))


def classification_loss(p: Tensor, y) -> Tensor:
    """Mean over diseases (and studies) of the categorical cross-entropy."""
    y = np.asarray(y.states if isinstance(y, Checklist) else y)
    if not is_one_hot(y):
        raise ContractError("classification target rows must be one-hot")
    return cross_entropy(p, y)


def state_embedding(states, S: Tensor, phase: Phase) -> Tensor:
    """``y S`` during training (teacher forcing), ``p S`` at inference.

    TRAIN accepts a truth checklist or a one-hot array; INFER accepts the
    predicted probabilities as a tensor (gradients flow) or checklist.
    """
    phase = Phase(phase)
    if isinstance(states, Checklist):
        if phase is Phase.TRAIN and states.mode is not Mode.ONE_HOT_TRUTH:
            raise ContractError("training phase needs a ground-truth checklist")
        if phase is Phase.INFER and states.mode is not Mode.PREDICTED:
            raise ContractError("inference phase needs a predicted checklist")
        states = states.states.astype(S.dtype)
    elif phase is Phase.TRAIN:
        raw = states.data if isinstance(states, Tensor) else np.asarray(states)
        if not is_one_hot(raw):
            raise ContractError("training phase needs one-hot truth states")
    return matmul(as_tensor(states, S.dtype), S)


def enrich(d_states: Tensor | None, d_topics: Tensor | None, d_fused: Tensor | None) -> Tensor:
    """Elementwise sum; a ``None`` addend is an ablated (zero) component."""
    parts = [t for t in (d_states, d_topics, d_fused) if t is not None]
    if not parts:
        raise ContractError("enrich needs at least one component")
    out = parts[0]
    for t in parts[1:]:
        out = out + t
    return out


def predicted_checklists(p: np.ndarray) -> list[Checklist]:
    return [Checklist(row.astype(np.float64) / row.sum(axis=-1, keepdims=True), Mode.PREDICTED)
            for row in np.asarray(p)]
