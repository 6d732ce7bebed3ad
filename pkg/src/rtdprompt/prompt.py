"""Template rendering and replaced-token scoring.

A template wraps the input text and one label-word slot. Classification
scores each class by how "original" its label word looks to the
discriminator; the per-class scores are normalized into probabilities.
Regression maps the single label word's replaced-probability linearly onto
the task's value interval.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import model as M
from .model import WeightContainer
from .tokenizer import Vocab, build_sequence

CLASSIFICATION = "classification"
REGRESSION = "regression"
SEGMENT_MARKER = "<SEP>"
SCORE_FLOOR = 1e-9

_PLACEHOLDER = re.compile(r"\{([a-z0-9_]+)\}")
ALLOWED_PLACEHOLDERS = {"input", "premise", "hypothesis", "question1", "question2",
                        "sentence1", "sentence2", "label"}


class TemplateError(ValueError):
    pass


class DegenerateScoresError(ValueError):
    """Every class scored zero even after clamping was disabled."""


@dataclass(frozen=True)
class Template:
    name: str
    pattern: str                 # placeholders plus an optional <SEP> split
    label_words: tuple
    task_kind: str = CLASSIFICATION
    bounds: tuple | None = None  # (V1, V2), regression only

    def __post_init__(self):
        slots = _PLACEHOLDER.findall(self.pattern)
        unknown = set(slots) - ALLOWED_PLACEHOLDERS
        if unknown:
            raise TemplateError(f"unknown placeholders {sorted(unknown)}")
        if slots.count("label") != 1:
            raise TemplateError("pattern must contain exactly one {label} slot")
        if self.task_kind == CLASSIFICATION:
            if len(self.label_words) < 2:
                raise TemplateError("classification needs at least two label words")
        elif self.task_kind == REGRESSION:
            if len(self.label_words) != 1:
                raise TemplateError("regression needs exactly one label word")
            if self.bounds is None or not self.bounds[0] < self.bounds[1]:
                raise TemplateError(f"regression needs bounds V1 < V2, got {self.bounds}")
        else:
            raise TemplateError(f"unknown task kind {self.task_kind!r}")

    @property
    def num_classes(self) -> int:
        return len(self.label_words)


@dataclass(frozen=True)
class Prediction:
    y_hat: float | int
    class_probs: np.ndarray | None = None
    degenerate: bool = False


# Built-in templates for the supported tasks, addressable by lowercase name.
BUILTIN_TEMPLATES = {
    "sst2": Template("sst2", "{input} <SEP> This movie is {label}!!",
                     ("great", "terrible")),
    "sst5": Template("sst5", "This movie is {label}. <SEP> {input}",
                     ("perfect", "good", "okay", "bad", "terrible")),
    "mr": Template("mr", "It was {label}! <SEP> {input}", ("great", "terrible")),
    "cr": Template("cr", "{input} <SEP> I really {label} this product.",
                   ("love", "hate")),
    "mpqa": Template("mpqa", "{input} <SEP> {label} good,", ("really", "not")),
    "subj": Template("subj", "{label} speaking. <SEP> {input}",
                     ("Subjectively", "Objectively")),
    "trec": Template("trec", "The answer is about a {label}, <SEP> {input}",
                     ("definition", "entity", "meaning", "person", "place", "number")),
    "cola": Template("cola", "The grammar of the following sentence is {label}, <SEP> {input}",
                     ("correct", "wrong")),
    "mnli": Template("mnli", "{premise} <SEP> ? {label}, {hypothesis}",
                     ("Yes", "Maybe", "No")),
    "snli": Template("snli", "{premise} <SEP> ? {label}, {hypothesis}",
                     ("Yes", "Maybe", "No")),
    "qnli": Template("qnli", "{premise} <SEP> ? {label}! {hypothesis}", ("Yes", "No")),
    "rte": Template("rte", "{premise} <SEP> ? {label}! {hypothesis}", ("Yes", "No")),
    "mrpc": Template("mrpc", "{question1} <SEP> ? {label}, {question2}", ("Yes", "No")),
    "qqp": Template("qqp", "{question1} <SEP> ? {label}, {question2}", ("Yes", "No")),
    "stsb": Template("stsb", "{sentence1} <SEP> ? {label}!! {sentence2}",
                     ("NO",), task_kind=REGRESSION, bounds=(0.0, 5.0)),
}


def parse_template(text: str, name: str = "custom") -> Template:
    """Parse a template spec: 'kind:', 'pattern:', 'bounds:', then 'labels:'
    followed by one label word per line."""
    kind = CLASSIFICATION
    pattern = None
    bounds = None
    words: list = []
    in_labels = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(":")
        key = key.strip().lower()
        if not in_labels and key in ("kind", "pattern", "bounds", "labels"):
            rest = rest.strip()
            if key == "kind":
                kind = rest
            elif key == "pattern":
                pattern = rest
            elif key == "bounds":
                parts = rest.split()
                if len(parts) != 2:
                    raise TemplateError(f"line {lineno}: bounds needs two numbers")
                bounds = (float(parts[0]), float(parts[1]))
            else:
                in_labels = True
        elif in_labels:
            words.append(line)
        else:
            raise TemplateError(f"line {lineno}: unexpected content {line!r}")
    if pattern is None:
        raise TemplateError("template spec has no pattern")
    return Template(name, pattern, tuple(words), task_kind=kind, bounds=bounds)


def render(template: Template, fields: dict, label_word: str):
    """Substitute fields and the label word; returns build_sequence segments
    [(text, [marked_span...]), ...] with the label word's span marked."""
    segments = []
    for seg_pattern in template.pattern.split(SEGMENT_MARKER):
        text_parts: list = []
        marked: list = []
        pos = 0
        out_len = 0
        for m in _PLACEHOLDER.finditer(seg_pattern):
            lit = seg_pattern[pos:m.start()]
            text_parts.append(lit)
            out_len += len(lit)
            key = m.group(1)
            if key == "label":
                value = label_word
                marked.append((out_len, out_len + len(value)))
            elif key in fields:
                value = str(fields[key])
            else:
                raise TemplateError(f"unbound placeholder {{{key}}}")
            text_parts.append(value)
            out_len += len(value)
            pos = m.end()
        tail = seg_pattern[pos:]
        text_parts.append(tail)
        text = "".join(text_parts)
        # leading whitespace shifts marked spans when stripped
        lead = len(text) - len(text.lstrip())
        segments.append((text.strip(), [(lo - lead, hi - lead) for lo, hi in marked]))
    return segments


def class_score_tensors(fields: dict, template: Template, params: dict, cfg,
                        vocab: Vocab, max_len: int):
    """Per-class raw scores s_m = 1 - mean P(label-word piece replaced),
    as autodiff scalars (one forward pass per class)."""
    scores = []
    for word in template.label_words:
        enc = build_sequence(render(template, fields, word), vocab, max_len)
        (lo, hi), = [r for r in enc.marked]
        ids = np.asarray(enc.ids)[None, :]
        seg = np.asarray(enc.segment_ids)[None, :]
        p = M.discriminator_probs(ids, seg, params, cfg)
        scores.append(1.0 - p[0, lo:hi].mean())
    return scores


def normalize_scores(raw_scores: np.ndarray) -> tuple[np.ndarray, bool]:
    """Normalize non-negative class scores to probabilities (float64).

    Scores that vanish at working precision are floored at SCORE_FLOOR so a
    batch run keeps going; the flag reports that the case was degenerate.
    """
    s = np.asarray(raw_scores, dtype=np.float64)
    degenerate = bool((s <= 0).all())
    s = np.maximum(s, SCORE_FLOOR)
    return s / s.sum(), degenerate


def classify(fields: dict, template: Template, weights: WeightContainer,
             vocab: Vocab, max_len: int = 128,
             on_degenerate: str = "clamp") -> Prediction:
    """Normalized class probabilities and argmax label (ties -> lowest index)."""
    if template.task_kind != CLASSIFICATION:
        raise TemplateError(f"template {template.name!r} is not a classification template")
    scores = class_score_tensors(fields, template, weights.params(),
                                 weights.config, vocab, max_len)
    raw = np.asarray([s.item() for s in scores])
    probs, degenerate = normalize_scores(raw)
    if degenerate and on_degenerate == "error":
        raise DegenerateScoresError("all class scores are zero")
    return Prediction(y_hat=int(np.argmax(probs)), class_probs=probs,
                      degenerate=degenerate)


def regress(fields: dict, template: Template, weights: WeightContainer,
            vocab: Vocab, max_len: int = 128) -> Prediction:
    """y_hat = |V2 - V1| * P(label word replaced) + V1."""
    if template.task_kind != REGRESSION:
        raise TemplateError(f"template {template.name!r} is not a regression template")
    enc = build_sequence(render(template, fields, template.label_words[0]),
                         vocab, max_len)
    (lo, hi), = [r for r in enc.marked]
    out = M.discriminator_forward(enc.ids, enc.segment_ids, weights)
    p_rep = float(out.p_replaced[lo:hi].mean())
    v1, v2 = template.bounds
    return Prediction(y_hat=abs(v2 - v1) * p_rep + v1)
