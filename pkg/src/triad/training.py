"""Training schedule and evaluation.

Phase A trains everything jointly; when the interpreter is enabled it reads
the ground-truth reports so it learns a correct reading model.  Phase B
freezes the interpreter and lets its loss on the generated weighted word
embedding fine-tune the rest of the model.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checklist import Checklist, Mode
from .corpus import PAD, STATES, GrammarSpec, Study, rule_label
from .errors import NumericAbort
from .interpreter import fine_tune_step
from .metrics import ClinicalScores, LanguageScores, clinical_scores, language_scores
from .model import Batch, ReportModel, make_batch
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_bleu4: float = -1.0
    best_step: int = -1
    best_state: dict | None = None
    steps_run: int = 0


def make_optimizer(model: ReportModel) -> Adam:
    cfg = model.config
    return Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                warmup=cfg.warmup, clip=cfg.clip or None)


def batch_order(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled every epoch."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size], start + batch_size >= n


def train(model: ReportModel, data: Batch, val: tuple[Batch, Sequence[Study], GrammarSpec] | None = None,
          on_epoch: Callable[[dict], None] | None = None,
          on_best: Callable[[ReportModel, int, float], None] | None = None) -> TrainReport:
    cfg = model.config
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    opt = make_optimizer(model)
    report = TrainReport()
    total_steps = cfg.steps + cfg.finetune_steps
    use_interp = cfg.use_interpreter and cfg.w_i != 0
    sums: dict[str, float] = {}
    count = 0
    epoch = 0
    stream = batch_order(len(data), cfg.batch_size, rng)
    for step in range(total_steps):
        phase_b = step >= cfg.steps
        if phase_b and use_interp and not model.interpreter.frozen:
            model.interpreter.freeze()
        idx, epoch_end = next(stream)
        batch = data.take(idx)
        if not use_interp:
            losses = model.train_step(batch, opt, None)
        elif phase_b:
            losses = fine_tune_step(batch, model, opt)
        else:
            losses = model.train_step(batch, opt, "truth")
        for key, value in losses.items():
            if not math.isfinite(value):
                raise NumericAbort(f"non-finite {key} at step {step}")
            sums[key] = sums.get(key, 0.0) + value
        count += 1
        last = step == total_steps - 1
        if epoch_end or last:
            row = {"epoch": epoch, "step": step + 1, **{k: v / count for k, v in sums.items()}}
            report.epochs.append(row)
            if on_epoch:
                on_epoch(row)
            sums, count = {}, 0
            epoch += 1
        if val is not None and ((cfg.eval_every and (step + 1) % cfg.eval_every == 0) or last):
            lang, _, _ = evaluate(model, val[1], val[2], batch=val[0])
            if lang.bleu4 > report.best_bleu4:
                report.best_bleu4 = lang.bleu4
                report.best_step = step + 1
                report.best_state = copy.deepcopy(model.state_dict())
                if on_best:
                    on_best(model, step + 1, lang.bleu4)
    report.steps_run = total_steps
    if use_interp and model.interpreter.frozen:
        model.interpreter.unfreeze()
    return report


def decode_studies(model: ReportModel, batch: Batch, chunk: int = 256, max_len: int | None = None):
    """Greedy-decode every study; returns token lists (BOS..EOS) and the
    per-step distributions and classifier probabilities."""
    seqs, dists, probs = [], [], []
    max_len = max_len or model.config.decode_len or model.config.max_len - 1
    for start in range(0, len(batch), chunk):
        sub = batch.take(np.arange(start, min(start + chunk, len(batch))))
        tokens, p_word, p = model.decode(sub, max_len)
        for row, dist in zip(tokens, p_word):
            seq = [int(t) for t in row if t != PAD]
            seqs.append(seq)
            dists.append(dist[:len(seq) - 1])
        probs.extend(p)
    return seqs, dists, probs


def evaluate(model: ReportModel, studies: Sequence[Study], grammar: GrammarSpec,
             batch: Batch | None = None) -> tuple[LanguageScores, ClinicalScores, list[dict]]:
    batch = batch if batch is not None else make_batch(studies, grammar.k)
    seqs, _, probs = decode_studies(model, batch)
    vocab = grammar.vocab
    candidates = [vocab.decode(s) for s in seqs]
    references = [vocab.decode(s.report) for s in studies]
    lang = language_scores(candidates, references)
    preds = [rule_label(c, grammar) for c in candidates]
    truths = [s.truth for s in studies]
    clin = clinical_scores([Checklist(p.states, Mode.PREDICTED) for p in preds], truths)
    rows = []
    for study, seq, cand, pred, p in zip(studies, seqs, candidates, preds, probs):
        rows.append({
            "id": study.id,
            "generated": " ".join(cand),
            "tokens": seq,
            "reference": vocab.detokenize(study.report),
            "labels": pred.to_json(grammar.topic_names, STATES)["states"],
            "classifier": np.asarray(p, dtype=float).round(6).tolist(),
        })
    return lang, clin, rows


def oracle_evaluate(studies: Sequence[Study], grammar: GrammarSpec) -> tuple[LanguageScores, ClinicalScores]:
    """Scores of the ground-truth reports against themselves."""
    refs = [grammar.vocab.decode(s.report) for s in studies]
    lang = language_scores(refs, refs)
    preds = [Checklist(rule_label(r, grammar).states, Mode.PREDICTED) for r in refs]
    return lang, clinical_scores(preds, [s.truth for s in studies])
