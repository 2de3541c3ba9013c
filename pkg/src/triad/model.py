"""The classifier-generator-interpreter pipeline wired together."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor, as_tensor, zero_grad
from .classifier import (
    Classifier,
    DiseaseEmbeddings,
    Phase,
    classification_loss,
    classify_states,
    enrich,
    fuse,
    project_visual,
    state_embedding,
)
from .config import RunConfig
from .corpus import PAD, Study
from .encoders import ImageEncoder, TextEncoder, encode_view_batch, summarize_text
from .errors import ConfigError, NumericAbort
from .generator import (
    Generator,
    decode_hidden,
    generation_loss,
    greedy_decode,
    weighted_words,
    word_distribution,
)
from .interpreter import Interpreter, interpret_report, interpret_states, interpreter_loss, total_loss
from .nn import Module, gaussian

MAX_VIEWS = 3


@dataclass
class Batch:
    """Padded arrays for a set of studies."""

    ids: list[str]
    images: np.ndarray        # (B, M, H, W)
    view_mask: np.ndarray     # (B, M)
    history: np.ndarray       # (B, Lh)
    history_valid: np.ndarray
    report: np.ndarray        # (B, Lr), BOS ... EOS then PAD
    truth: np.ndarray         # (B, n) state indices
    truth_onehot: np.ndarray  # (B, n, k)

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index) -> "Batch":
        index = np.asarray(index)
        rl = int((self.report[index] != PAD).sum(axis=1).max())
        hl = int(self.history_valid[index].sum(axis=1).max())
        vm = int(self.view_mask[index].sum(axis=1).max())
        return Batch(
            ids=[self.ids[i] for i in index],
            images=self.images[index, :vm],
            view_mask=self.view_mask[index, :vm],
            history=self.history[index, :hl],
            history_valid=self.history_valid[index, :hl],
            report=self.report[index, :rl],
            truth=self.truth[index],
            truth_onehot=self.truth_onehot[index],
        )

    @property
    def prefix(self) -> np.ndarray:
        return self.report[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.report[:, 1:]


def make_batch(studies: Sequence[Study], k: int = 4) -> Batch:
    b = len(studies)
    size = studies[0].views[0].pixels.shape[0]
    m = max(len(s.views) for s in studies)
    images = np.zeros((b, m, size, size), dtype=np.float32)
    view_mask = np.zeros((b, m), dtype=bool)
    hl = max(max(len(s.history) for s in studies), 1)
    history = np.full((b, hl), PAD, dtype=np.int64)
    history_valid = np.zeros((b, hl), dtype=bool)
    rl = max(len(s.report) for s in studies)
    report = np.full((b, rl), PAD, dtype=np.int64)
    truth = np.zeros((b, studies[0].truth.n), dtype=np.int64)
    for i, s in enumerate(studies):
        for j, v in enumerate(s.views):
            images[i, j] = v.pixels
            view_mask[i, j] = True
        history[i, :len(s.history)] = s.history
        history_valid[i, :len(s.history)] = True
        report[i, :len(s.report)] = s.report
        truth[i] = s.truth.indices()
    onehot = np.eye(k, dtype=np.float32)[truth]
    return Batch([s.id for s in studies], images, view_mask, history, history_valid, report, truth, onehot)


@dataclass
class Forward:
    emb: DiseaseEmbeddings
    p: Tensor
    heat: np.ndarray | None
    p_word: Tensor | None = None
    losses: dict = field(default_factory=dict)


class ReportModel(Module):
    def __init__(self, config: RunConfig, n: int, k: int, vocab_size: int):
        config.validate()
        if config.n and config.n != n:
            raise ConfigError(f"config n={config.n} does not match the grammar's {n} topics")
        if config.v and config.v != vocab_size:
            raise ConfigError(f"config v={config.v} does not match vocabulary size {vocab_size}")
        self.config = config.replace(n=n, k=k, v=vocab_size)
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        e = cfg.e
        self.image = ImageEncoder(rng, cfg.image_size, cfg.c)
        self.history = TextEncoder(rng, vocab_size, e, cfg.heads, cfg.layers, cfg.history_len,
                                   cfg.positional, cfg.ff_mult)
        self.queries = gaussian(rng, (n, e), 1.0 / math.sqrt(e))
        self.classifier = Classifier(rng, cfg.c, e, n, k)
        self.generator = Generator(rng, vocab_size, e, cfg.heads, cfg.layers, cfg.max_len, cfg.ff_mult)
        self.interpreter = Interpreter(rng, e, n, k, cfg.heads, cfg.layers, cfg.max_len, cfg.ff_mult)

    # -- forward pieces ------------------------------------------------------

    def view_inputs(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        if self.config.use_multiview:
            return batch.images, batch.view_mask
        return batch.images[:, :1], batch.view_mask[:, :1]

    def embed(self, batch: Batch, phase: Phase) -> Forward:
        cfg = self.config
        cls = self.classifier
        images, view_mask = self.view_inputs(batch)
        x = encode_view_batch(images, view_mask, self.image)
        d_img = project_visual(x, cls.A, cls.b)
        d_txt, heat = None, None
        if cfg.use_history:
            hidden = self.history.encode_tokens(batch.history, batch.history_valid)
            d_txt, heat = summarize_text(self.queries, hidden, batch.history_valid, cfg.scale_text_logits)
        d_fused = fuse(d_img, d_txt, cls.norm)
        p = classify_states(d_fused, cls.S)
        if Phase(phase) is Phase.TRAIN:
            d_states = state_embedding(batch.truth_onehot, cls.S, Phase.TRAIN)
        else:
            d_states = state_embedding(p.detach() if cfg.detach_states else p, cls.S, Phase.INFER)
        d_enriched = enrich(
            None if cfg.drop_states else d_states,
            None if cfg.drop_topics else cls.topics,
            None if cfg.drop_fused else d_fused,
        )
        if d_enriched.ndim == 2:  # only topics survived ablation
            d_enriched = d_enriched + np.zeros((len(batch), 1, 1), dtype=d_enriched.dtype)
        emb = DiseaseEmbeddings(d_img, d_txt, d_fused, d_states, cls.topics, d_enriched)
        return Forward(emb, p, heat)

    def interpreter_states(self) -> Tensor:
        return self.classifier.S if self.config.share_state_embedding else self.interpreter.S

    def forward(self, batch: Batch, phase: Phase = Phase.TRAIN, interpreter_input: str | None = None) -> Forward:
        """Teacher-forced pass producing every loss term.

        ``interpreter_input`` is ``"truth"`` (the interpreter reads the
        ground-truth report's embeddings, which carry no gradient into the
        generator), ``"generated"`` (it reads ``p_word W``), or ``None``.
        """
        cfg = self.config
        fwd = self.embed(batch, phase)
        gen = self.generator
        l_c = classification_loss(fwd.p, batch.truth_onehot)
        hidden = decode_hidden(batch.prefix, fwd.emb.d_enriched, gen)
        p_word = word_distribution(hidden, gen.embedding)
        l_g = generation_loss(p_word, batch.targets)
        fwd.p_word = p_word
        l_i = None
        if interpreter_input and cfg.use_interpreter and cfg.w_i != 0:
            targets = batch.targets
            valid = targets != PAD
            if interpreter_input == "truth":
                w_hat = as_tensor(gen.embedding.data[targets])
            elif interpreter_input == "generated":
                if cfg.finetune_states == "predicted" and Phase(phase) is Phase.TRAIN:
                    inf = self.embed(batch, Phase.INFER)
                    p_gen = word_distribution(decode_hidden(batch.prefix, inf.emb.d_enriched, gen), gen.embedding)
                else:
                    p_gen = p_word
                w_hat = weighted_words(p_gen, gen.embedding)
            else:
                raise ValueError(f"unknown interpreter input {interpreter_input!r}")
            d_hat, _ = interpret_report(w_hat, self.interpreter, valid, cfg.scale_text_logits)
            p_int = interpret_states(d_hat, self.interpreter_states())
            l_i = interpreter_loss(p_int, batch.truth_onehot)
            fwd.losses["p_int"] = p_int
        total = total_loss(l_c, l_g, l_i, cfg.loss_weights)
        fwd.losses.update(l_c=l_c, l_g=l_g, l_i=l_i, total=total)
        return fwd

    def train_step(self, batch: Batch, optimizer, interpreter_input: str | None = None) -> dict[str, float]:
        params = optimizer.params
        zero_grad(params)
        with Tape() as tape:
            fwd = self.forward(batch, Phase.TRAIN, interpreter_input)
            total = fwd.losses["total"]
            if not np.isfinite(total.data):
                raise NumericAbort("non-finite training loss")
            tape.backward(total)
        optimizer.step()
        out = {"l_c": float(fwd.losses["l_c"].data), "l_g": float(fwd.losses["l_g"].data)}
        if fwd.losses["l_i"] is not None:
            out["l_i"] = float(fwd.losses["l_i"].data)
        out["total"] = float(total.data)
        return out

    # -- inference -------------------------------------------------------------

    def decode(self, batch: Batch, max_len: int | None = None):
        """Greedy reports for a batch: tokens, per-step distributions and the
        classifier's predicted state probabilities."""
        max_len = max_len or self.config.max_len - 1
        fwd = self.embed(batch, Phase.INFER)
        tokens, p_word = greedy_decode(fwd.emb.d_enriched, self.generator, max_len)
        return tokens, p_word, fwd.p.data

    def teacher_forced_accuracy(self, batch: Batch) -> float:
        fwd = self.embed(batch, Phase.TRAIN)
        hidden = decode_hidden(batch.prefix, fwd.emb.d_enriched, self.generator)
        p_word = word_distribution(hidden, self.generator.embedding).data
        targets = batch.targets
        valid = targets != PAD
        return float(((p_word.argmax(-1) == targets) & valid).sum() / valid.sum())

    def heat_maps(self, batch: Batch, max_len: int | None = None):
        """Attention heat-maps for the first study of ``batch``.

        Returns the history map ``(n, l_hist)`` (None without history), the
        greedy token sequence, and the interpreter's map ``(n, l_report)``
        over the weighted word embedding of that generated report.
        """
        one = batch.take([0])
        max_len = max_len or self.config.decode_len or self.config.max_len - 1
        fwd = self.embed(one, Phase.INFER)
        tokens, p_word = greedy_decode(fwd.emb.d_enriched, self.generator, max_len)
        seq = [int(t) for t in tokens[0] if t != PAD]
        w_hat = weighted_words(as_tensor(p_word[0, :len(seq) - 1]), self.generator.embedding)
        _, report_heat = interpret_report(w_hat, self.interpreter, None, self.config.scale_text_logits)
        history_heat = None if fwd.heat is None else fwd.heat[0]
        return history_heat, seq, report_heat
