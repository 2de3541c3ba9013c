"""Language metrics (BLEU, ROUGE-L, METEOR-lite) and checklist scores."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .checklist import Checklist
from .corpus import POSITIVE
from .errors import ContractError

log = logging.getLogger(__name__)

Tokens = Sequence[str]


@dataclass
class LanguageScores:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class PRF:
    auc: float
    f1: float
    precision: float
    recall: float


@dataclass
class ClinicalScores:
    accuracy: float
    macro: PRF
    micro: PRF

    def as_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4,
         smooth: bool = False) -> list[float]:
    """Corpus BLEU-1..BLEU-``max_n`` with clipped counts and brevity penalty.

    ``smooth`` adds one to every n-gram numerator and denominator above
    order 1 (useful for sentence-level debugging only).
    """
    if len(candidates) != len(references):
        raise ContractError("candidate and reference lists differ in length")
    if not candidates:
        raise ContractError("BLEU of an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cc, rc = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in cc.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            log_sum = -math.inf
        else:
            log_sum += math.log(m / t)
        scores.append(0.0 if log_sum == -math.inf else bp * math.exp(log_sum / (n + 1)))
    return scores


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Tokens, reference: Tokens, beta: float = 1.2) -> float:
    """LCS F-measure ``(1 + b^2) P R / (R + b^2 P)``."""
    if not reference:
        raise ContractError("ROUGE-L with an empty reference")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def meteor_alignment(candidate: Tokens, reference: Tokens) -> list[tuple[int, int]]:
    """Exact-match unigram alignment.

    Candidate tokens are visited left to right; each takes the reference
    position right after the previous match when that token matches there,
    otherwise the leftmost unused matching reference position.
    """
    used = [False] * len(reference)
    pairs = []
    last = -2
    for i, tok in enumerate(candidate):
        nxt = last + 1
        if 0 <= nxt < len(reference) and not used[nxt] and reference[nxt] == tok and pairs and pairs[-1][0] == i - 1:
            j = nxt
        else:
            j = next((j for j, r in enumerate(reference) if not used[j] and r == tok), None)
        if j is None:
            continue
        used[j] = True
        pairs.append((i, j))
        last = j
    return pairs


def count_chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(candidate: Tokens, reference: Tokens) -> float:
    """METEOR-lite: exact matches only, ``Fmean = 10PR/(R+9P)``,
    penalty ``0.5 (chunks/matches)^3``."""
    pairs = meteor_alignment(candidate, reference)
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(candidate)
    r = m / len(reference)
    fmean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return fmean * (1 - penalty)


def language_scores(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> LanguageScores:
    b = bleu(candidates, references, 4)
    rl = float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))
    mt = float(np.mean([meteor(c, r) for c, r in zip(candidates, references)]))
    return LanguageScores(*b, rouge_l=rl, meteor=mt)


# -- clinical scores ------------------------------------------------------------


def auc_score(scores, labels) -> float:
    """Mann-Whitney rank statistic; ties count one half.  NaN if one class is empty."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def clinical_scores(pred: Sequence[Checklist], truth: Sequence[Checklist],
                    positive: int = POSITIVE) -> ClinicalScores:
    """Accuracy over (study, topic) states plus macro/micro positive-vs-rest scores.

    Topics with no positive in either predictions or truth are left out of
    the macro average (with a warning); AUC uses the predicted probability
    of the positive state.
    """
    if len(pred) != len(truth):
        raise ContractError("prediction and truth lists differ in length")
    if not pred:
        raise ContractError("clinical scores of an empty corpus")
    P = np.stack([c.states for c in pred])   # (S, n, k)
    T = np.stack([c.states for c in truth])
    accuracy = float((P.argmax(-1) == T.argmax(-1)).mean())
    pred_pos = P.argmax(-1) == positive
    true_pos = T.argmax(-1) == positive
    score = P[..., positive]
    n = P.shape[1]

    per_topic = []
    skipped = []
    for j in range(n):
        if not pred_pos[:, j].any() and not true_pos[:, j].any():
            skipped.append(j)
            continue
        tp = int((pred_pos[:, j] & true_pos[:, j]).sum())
        fp = int((pred_pos[:, j] & ~true_pos[:, j]).sum())
        fn = int((~pred_pos[:, j] & true_pos[:, j]).sum())
        per_topic.append((*_prf(tp, fp, fn), auc_score(score[:, j], true_pos[:, j])))
    if skipped:
        log.warning("topics %s have no positives in predictions or truth; excluded from macro", skipped)
    if per_topic:
        arr = np.array(per_topic, dtype=np.float64)
        aucs = arr[:, 3][~np.isnan(arr[:, 3])]
        macro = PRF(float(aucs.mean()) if aucs.size else float("nan"),
                    float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean()))
    else:
        macro = PRF(float("nan"), 0.0, 0.0, 0.0)

    tp = int((pred_pos & true_pos).sum())
    fp = int((pred_pos & ~true_pos).sum())
    fn = int((~pred_pos & true_pos).sum())
    f1, precision, recall = _prf(tp, fp, fn)
    micro = PRF(auc_score(score.ravel(), true_pos.ravel()), f1, precision, recall)
    return ClinicalScores(accuracy, macro, micro)


TABLE_COLUMNS = ["B-1", "B-2", "B-3", "B-4", "MTR", "RG-L", "Acc.",
                 "Macro AUC", "Macro F-1", "Macro Prec.", "Macro Rec.",
                 "Micro AUC", "Micro F-1", "Micro Prec.", "Micro Rec."]


def table_row(lang: LanguageScores, clin: ClinicalScores) -> list[float]:
    return [lang.bleu1, lang.bleu2, lang.bleu3, lang.bleu4, lang.meteor, lang.rouge_l, clin.accuracy,
            clin.macro.auc, clin.macro.f1, clin.macro.precision, clin.macro.recall,
            clin.micro.auc, clin.micro.f1, clin.micro.precision, clin.micro.recall]
