"""Synthetic paired studies with known topic states.

Each study has 1-3 glyph-grid "radiographs", a short indication text that
mentions symptom words correlated with positive topics, and a report built
from per-(topic, state) sentence templates.  Because the report grammar is
closed, :func:`rule_label` recovers the ground-truth checklist exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .checklist import Checklist, Mode

log = logging.getLogger(__name__)

BOS, EOS, PAD, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>", "<unk>")
STATES = ("positive", "negative", "uncertain", "unmentioned")
POSITIVE, NEGATIVE, UNCERTAIN, UNMENTIONED = range(4)

NEGATION_CUES = frozenset({"no", "without"})
UNCERTAINTY_CUES = frozenset({"possible", "may", "questionable", "suspected"})

CELL = 8


class ViewTag(str, Enum):
    AP = "AP"
    PA = "PA"
    LA = "LA"
    SYNTH = "SYNTH"


@dataclass
class ViewImage:
    pixels: np.ndarray
    tag: ViewTag = ViewTag.SYNTH

    def __post_init__(self):
        self.pixels = np.clip(np.asarray(self.pixels, dtype=np.float32), 0.0, 1.0)
        self.tag = ViewTag(self.tag)

    def __eq__(self, other):
        return (isinstance(other, ViewImage) and self.tag == other.tag
                and np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True)
class Topic:
    name: str
    symptom: str
    view: str = "both"  # "frontal", "lateral" or "both"


# 4x4 bitmaps, upscaled 2x into an 8x8 cell
_GLYPHS = {
    POSITIVE: ["1111", "1111", "1111", "1111"],
    NEGATIVE: ["1111", "1001", "1001", "1111"],
    UNCERTAIN: ["1000", "0100", "0010", "0001"],
    UNMENTIONED: ["0000", "0110", "0110", "0000"],
}

DEFAULT_TEMPLATES = {
    POSITIVE: ("there is {t} .",),
    NEGATIVE: ("no evidence of {t} .",),
    UNCERTAIN: ("possible {t} .",),
    UNMENTIONED: ("",),
}


@dataclass
class GrammarSpec:
    """Closed grammar of topics, templates, glyphs and history wording."""

    name: str
    topics: tuple[Topic, ...]
    templates: dict = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))
    state_probs: tuple[float, ...] = (0.35, 0.25, 0.1, 0.3)
    image_size: int = 32
    lateral_prob: float = 0.8
    extra_view_prob: float = 0.3
    occlusion: float = 0.2
    noise: float = 0.1
    symptom_recall: float = 0.7
    symptom_precision: float = 0.9
    empty_report: str = "no acute findings ."

    def __post_init__(self):
        self.validate()

    @property
    def n(self) -> int:
        return len(self.topics)

    @property
    def k(self) -> int:
        return len(STATES)

    @property
    def topic_names(self) -> list[str]:
        return [t.name for t in self.topics]

    def validate(self) -> None:
        if not np.isclose(sum(self.state_probs), 1.0) or len(self.state_probs) != self.k:
            raise ValueError("state_probs must be a distribution over the states")
        if self.image_size % CELL or (self.image_size // CELL) ** 2 < self.n:
            raise ValueError("image too small for one glyph cell per topic")
        if len({t.name for t in self.topics}) != self.n:
            raise ValueError("topic names must be distinct")
        for s in range(self.k):
            if not self.templates.get(s):
                raise ValueError(f"state {STATES[s]} has no template")
        for t in self.topics:
            if t.view not in ("frontal", "lateral", "both"):
                raise ValueError(f"bad view for topic {t.name}: {t.view}")
        # every template must read back as its own (topic, state) under the cue rules
        for j, topic in enumerate(self.topics):
            for s in range(self.k):
                for tpl in self.templates[s]:
                    words = self.render(tpl, topic).split()
                    got = _cue_label(words, self.topic_names)
                    want = {} if s == UNMENTIONED else {j: s}
                    if got != want:
                        raise ValueError(f"template {tpl!r} is ambiguous for {topic.name}")
        for j in range(self.n):
            if self.false_symptom_rate(j) > 1.0:
                raise ValueError("symptom precision unattainable for this prior")

    @staticmethod
    def render(template: str, topic: Topic) -> str:
        return template.format(t=topic.name)

    def false_symptom_rate(self, j: int) -> float:
        """P(symptom mentioned | topic not positive) giving the configured precision."""
        prior = self.state_probs[POSITIVE]
        rho = self.symptom_precision
        return self.symptom_recall * prior * (1.0 - rho) / (rho * (1.0 - prior))

    @cached_property
    def vocab(self) -> "Vocabulary":
        words: set[str] = set()
        for topic in self.topics:
            words.update((topic.name, topic.symptom))
            for s in range(self.k):
                for tpl in self.templates[s]:
                    words.update(self.render(tpl, topic).split())
        words.update(self.empty_report.split())
        words.update(_HISTORY_WORDS)
        return Vocabulary(list(SPECIAL_TOKENS) + sorted(words))

    def glyph(self, state: int) -> np.ndarray:
        bitmap = np.array([[int(c) for c in row] for row in _GLYPHS[state]], dtype=np.float32)
        return np.kron(bitmap, np.ones((2, 2), dtype=np.float32))

    def cell_origin(self, j: int) -> tuple[int, int]:
        per_row = self.image_size // CELL
        return (j // per_row) * CELL, (j % per_row) * CELL

    @cached_property
    def sentence_table(self) -> dict[tuple[str, ...], tuple[int, int]]:
        table = {}
        for j, topic in enumerate(self.topics):
            for s in range(self.k):
                for tpl in self.templates[s]:
                    words = tuple(self.render(tpl, topic).split())
                    if words:
                        table[words] = (j, s)
        return table


_HISTORY_WORDS = ("indication", ":", "and", "routine", "exam", ".")


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if self.words[:4] != list(SPECIAL_TOKENS):
            raise ValueError("special tokens must occupy ids 0-3")

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str | Iterable[str]) -> list[int]:
        tokens = text.split() if isinstance(text, str) else text
        return [self.index.get(w, UNK) for w in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (BOS, PAD):
                continue
            if strip and i == EOS:
                break
            out.append(self.words[i])
        return out

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))


@dataclass
class Study:
    id: str
    views: list[ViewImage]
    history: list[int]
    report: list[int]
    truth: Checklist

    def __post_init__(self):
        if not self.views:
            raise ValueError(f"study {self.id} has no views")
        if len(self.report) < 2:
            raise ValueError(f"study {self.id} has an empty report")
        if self.truth.mode is not Mode.ONE_HOT_TRUTH:
            raise ValueError("study truth must be a one-hot checklist")

    def __eq__(self, other):
        return (isinstance(other, Study) and self.id == other.id and self.views == other.views
                and list(self.history) == list(other.history)
                and list(self.report) == list(other.report)
                and np.array_equal(self.truth.states, other.truth.states))


def _quantize(x: np.ndarray) -> np.ndarray:
    # multiples of 1/32 are exact in float32 and short in JSON
    return (np.round(np.clip(x, 0.0, 1.0) * 32.0) / 32.0).astype(np.float32)


def _render_view(grammar: GrammarSpec, states, visible, rng) -> np.ndarray:
    size = grammar.image_size
    img = rng.normal(0.0, grammar.noise, size=(size, size))
    for j, s in enumerate(states):
        if visible[j]:
            r, c = grammar.cell_origin(j)
            img[r:r + CELL, c:c + CELL] += 0.8 * grammar.glyph(s)
    return _quantize(img)


def generate_study(seed: int, grammar: GrammarSpec, study_id: str | None = None) -> Study:
    """Sample one study deterministically from ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    n = grammar.n
    states = rng.choice(grammar.k, size=n, p=grammar.state_probs)

    views = []
    frontal_tags = [ViewTag.PA, ViewTag.AP]
    first = int(rng.integers(2))
    plan = [(frontal_tags[first], "frontal")]
    if rng.random() < grammar.lateral_prob:
        plan.append((ViewTag.LA, "lateral"))
    if rng.random() < grammar.extra_view_prob:
        plan.append((frontal_tags[1 - first], "frontal"))
    for tag, kind in plan:
        shown = np.array([t.view in (kind, "both") for t in grammar.topics])
        kept = rng.random(n) >= grammar.occlusion
        views.append(ViewImage(_render_view(grammar, states, shown & kept, rng), tag))

    symptoms = []
    for j, topic in enumerate(grammar.topics):
        rate = grammar.symptom_recall if states[j] == POSITIVE else grammar.false_symptom_rate(j)
        if rng.random() < rate:
            symptoms.append(topic.symptom)
    body = " and ".join(symptoms) if symptoms else "routine exam"
    history = f"indication : {body} ."

    sentences = []
    for j, topic in enumerate(grammar.topics):
        options = grammar.templates[int(states[j])]
        tpl = options[int(rng.integers(len(options)))] if len(options) > 1 else options[0]
        if tpl:
            sentences.append(grammar.render(tpl, topic))
    report = " ".join(sentences) if sentences else grammar.empty_report

    vocab = grammar.vocab
    return Study(
        id=study_id or f"study-{seed}",
        views=views,
        history=vocab.encode(history),
        report=[BOS] + vocab.encode(report) + [EOS],
        truth=Checklist.from_indices(states, grammar.k),
    )


def generate_corpus(seed: int, count: int, grammar: GrammarSpec, start: int = 0) -> list[Study]:
    seeds = np.random.SeedSequence(seed).generate_state(start + count, dtype=np.uint32)[start:]
    return [generate_study(int(s), grammar, f"s{seed}-{start + i:06d}") for i, s in enumerate(seeds)]


def _cue_label(words: Sequence[str], topic_names: Sequence[str]) -> dict[int, int]:
    lookup = {name: j for j, name in enumerate(topic_names)}
    found: dict[int, int] = {}
    sentence: list[str] = []
    for w in list(words) + ["."]:
        if w != ".":
            sentence.append(w)
            continue
        cues = set(sentence)
        if cues & NEGATION_CUES:
            state = NEGATIVE
        elif cues & UNCERTAINTY_CUES:
            state = UNCERTAIN
        else:
            state = POSITIVE
        for w2 in sentence:
            if w2 in lookup and lookup[w2] not in found:
                found[lookup[w2]] = state
        sentence = []
    return found


def rule_label(report, grammar: GrammarSpec) -> Checklist:
    """Label a report (token ids or words) into a one-hot checklist.

    Sentences that exactly match a template take its (topic, state); other
    sentences fall back to negation / uncertainty cue words.  The first
    mention of a topic wins; unmentioned topics get the ``unmentioned`` state.
    """
    words = [w for w in _as_words(report, grammar) if w not in SPECIAL_TOKENS]
    sentences: list[list[str]] = []
    current: list[str] = []
    for w in words:
        current.append(w)
        if w == ".":
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    states = np.full(grammar.n, UNMENTIONED)
    assigned: set[int] = set()
    for sentence in sentences:
        hit = grammar.sentence_table.get(tuple(sentence))
        labels = {hit[0]: hit[1]} if hit else _cue_label(sentence, grammar.topic_names)
        for j, s in labels.items():
            if j not in assigned:
                states[j] = s
                assigned.add(j)
    return Checklist.from_indices(states, grammar.k)


def _as_words(report, grammar: GrammarSpec) -> list[str]:
    report = list(report)
    if report and not isinstance(report[0], str):
        ids = [int(i) for i in report]
        if EOS in ids:
            ids = ids[:ids.index(EOS)]
        return [grammar.vocab.words[i] for i in ids]
    return report


# -- JSONL persistence -------------------------------------------------------

_REQUIRED = ("id", "views", "history", "report", "truth")


def study_to_record(study: Study, grammar: GrammarSpec) -> dict:
    vocab = grammar.vocab
    truth = study.truth.indices()
    return {
        "id": study.id,
        "views": [{"tag": v.tag.value, "pixels": v.pixels.tolist()} for v in study.views],
        "history": " ".join(vocab.decode(study.history)),
        "report": vocab.detokenize(study.report),
        "truth": {t: STATES[s] for t, s in zip(grammar.topic_names, truth)},
    }


def record_to_study(rec: dict, grammar: GrammarSpec) -> Study:
    vocab = grammar.vocab
    lookup = {s: i for i, s in enumerate(STATES)}
    truth = [lookup[rec["truth"][t]] for t in grammar.topic_names]
    return Study(
        id=str(rec["id"]),
        views=[ViewImage(np.asarray(v["pixels"], dtype=np.float32), v["tag"]) for v in rec["views"]],
        history=vocab.encode(rec["history"]),
        report=[BOS] + vocab.encode(rec["report"]) + [EOS],
        truth=Checklist.from_indices(truth, grammar.k),
    )


def write_jsonl(studies: Iterable[Study], path, grammar: GrammarSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for study in studies:
            fh.write(json.dumps(study_to_record(study, grammar), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path, grammar: GrammarSpec) -> list[Study]:
    studies = []
    unknown = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ValueError(f"{path}:{lineno}: record is not an object")
            for key in _REQUIRED:
                if key not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field '{key}'")
            unknown += len(set(rec) - set(_REQUIRED))
            try:
                studies.append(record_to_study(rec, grammar))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: invalid record ({exc})") from None
    if unknown:
        log.warning("ignored %d unknown field(s) in %s", unknown, path)
    return studies


# -- grammar presets -----------------------------------------------------------


def synthetic6() -> GrammarSpec:
    topics = (
        Topic("cardiomegaly", "palpitations", "both"),
        Topic("effusion", "dyspnea", "both"),
        Topic("pneumonia", "cough", "both"),
        Topic("edema", "swelling", "both"),
        Topic("atelectasis", "hypoxia", "lateral"),
        Topic("pneumothorax", "pleuritic", "lateral"),
    )
    return GrammarSpec("synthetic6", topics)


def chexpert14() -> GrammarSpec:
    names = [
        ("no_finding", "screening", "both"),
        ("enlarged_cardiomediastinum", "widening", "both"),
        ("cardiomegaly", "palpitations", "both"),
        ("lung_lesion", "hemoptysis", "lateral"),
        ("lung_opacity", "fever", "both"),
        ("edema", "swelling", "both"),
        ("consolidation", "sputum", "both"),
        ("pneumonia", "cough", "both"),
        ("atelectasis", "hypoxia", "lateral"),
        ("pneumothorax", "pleuritic", "both"),
        ("pleural_effusion", "dyspnea", "both"),
        ("pleural_other", "friction", "lateral"),
        ("fracture", "trauma", "lateral"),
        ("support_devices", "intubated", "both"),
    ]
    return GrammarSpec("chexpert14", tuple(Topic(*t) for t in names))


GRAMMARS = {"synthetic6": synthetic6, "chexpert14": chexpert14}


def get_grammar(name: str) -> GrammarSpec:
    try:
        return GRAMMARS[name]()
    except KeyError:
        raise ValueError(f"unknown grammar {name!r}; choose from {sorted(GRAMMARS)}") from None
