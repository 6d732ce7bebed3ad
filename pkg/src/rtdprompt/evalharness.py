"""Dataset loading, metrics, and batch evaluation runs."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import WeightContainer
from .prompt import CLASSIFICATION, REGRESSION, Template, classify, regress
from .tokenizer import Vocab


class DatasetError(ValueError):
    pass


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSchema:
    fields: dict                 # template placeholder -> column name
    label: str                   # label column name
    labels: tuple | None = None  # classification label space, index = class id
    bounds: tuple | None = None  # regression value interval
    positive_class: int = 1      # class treated as positive for F1


@dataclass
class Dataset:
    task: str
    examples: list               # dicts: placeholder-keyed text + "label"
    labels: tuple | None = None
    bounds: tuple | None = None

    def __len__(self) -> int:
        return len(self.examples)


def _parse_label(value: str, schema: DatasetSchema, where: str):
    if schema.labels is not None:
        if value not in schema.labels:
            raise DatasetError(f"{where}: label {value!r} not in {list(schema.labels)}")
        return schema.labels.index(value)
    try:
        y = float(value)
    except ValueError:
        raise DatasetError(f"{where}: unparseable label {value!r}") from None
    if schema.bounds is not None and not schema.bounds[0] <= y <= schema.bounds[1]:
        raise DatasetError(f"{where}: label {y} outside bounds {schema.bounds}")
    return y


def load_dataset(path, fmt: str, schema: DatasetSchema, task: str = "") -> Dataset:
    """Read a TSV (first row header) or JSONL file into validated examples."""
    if fmt not in ("tsv", "jsonl"):
        raise DatasetError(f"unknown format {fmt!r}")
    examples = []
    with open(path, encoding="utf-8") as fh:
        if fmt == "tsv":
            header_line = fh.readline()
            if not header_line:
                raise DatasetError(f"{path}: empty file")
            header = header_line.rstrip("\n").split("\t")
            cols = {c: i for i, c in enumerate(header)}
            needed = list(schema.fields.values()) + [schema.label]
            for col in needed:
                if col not in cols:
                    raise DatasetError(f"{path}: missing column {col!r}")
            for lineno, line in enumerate(fh, 2):
                if not line.strip():
                    continue
                row = line.rstrip("\n").split("\t")
                if len(row) < len(header):
                    raise DatasetError(f"{path}:{lineno}: expected {len(header)} columns")
                ex = {ph: row[cols[col]] for ph, col in schema.fields.items()}
                ex["label"] = _parse_label(row[cols[schema.label]], schema,
                                           f"{path}:{lineno}")
                examples.append(ex)
        else:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path}:{lineno}: bad JSON: {exc}") from exc
                for col in list(schema.fields.values()) + [schema.label]:
                    if col not in obj:
                        raise DatasetError(f"{path}:{lineno}: missing field {col!r}")
                ex = {ph: str(obj[col]) for ph, col in schema.fields.items()}
                ex["label"] = _parse_label(str(obj[schema.label]), schema,
                                           f"{path}:{lineno}")
                examples.append(ex)
    if not examples:
        raise DatasetError(f"{path}: no examples")
    return Dataset(task=task, examples=examples, labels=schema.labels,
                   bounds=schema.bounds)


def sample_examples(dataset: Dataset, n: int, seed: int = 13) -> Dataset:
    """Fixed-seed subsample used for the large sentiment test sets."""
    if n >= len(dataset):
        return dataset
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(len(dataset.examples), size=n, replace=False))
    return Dataset(task=dataset.task, examples=[dataset.examples[i] for i in idx],
                   labels=dataset.labels, bounds=dataset.bounds)


# -- metrics ------------------------------------------------------------------

def matthews_corr(predictions, golds) -> tuple[float, bool]:
    """Binary MCC from confusion counts; (value, defined)."""
    preds = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(golds, dtype=np.int64)
    tp = int(((preds == 1) & (gold == 1)).sum())
    tn = int(((preds == 0) & (gold == 0)).sum())
    fp = int(((preds == 1) & (gold == 0)).sum())
    fn = int(((preds == 0) & (gold == 1)).sum())
    denom = math.sqrt(float((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)))
    if denom == 0:
        return 0.0, False
    return (tp * tn - fp * fn) / denom, True


def f1_score(predictions, golds, positive_class: int = 1) -> float:
    preds = np.asarray(predictions)
    gold = np.asarray(golds)
    tp = int(((preds == positive_class) & (gold == positive_class)).sum())
    fp = int(((preds == positive_class) & (gold != positive_class)).sum())
    fn = int(((preds != positive_class) & (gold == positive_class)).sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def pearson_corr(predictions, golds) -> float:
    x = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(golds, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    vx, vy = (xc * xc).sum(), (yc * yc).sum()
    if vx == 0 or vy == 0:
        raise MetricError("pearson undefined: zero-variance input")
    return float((xc * yc).sum() / math.sqrt(vx * vy))


def compute_metric(kind: str, predictions, golds, positive_class: int = 1) -> float:
    if len(predictions) != len(golds) or len(predictions) == 0:
        raise MetricError(
            f"need equal non-empty inputs, got {len(predictions)} vs {len(golds)}")
    if kind == "accuracy":
        return float(np.mean(np.asarray(predictions) == np.asarray(golds)))
    if kind == "matthews":
        value, _ = matthews_corr(predictions, golds)
        return value
    if kind == "f1":
        return f1_score(predictions, golds, positive_class)
    if kind == "pearson":
        return pearson_corr(predictions, golds)
    raise MetricError(f"unknown metric {kind!r}")


# -- evaluation runs ----------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    template_id: str
    model_id: str
    metrics: dict
    example_count: int
    confusion: list | None       # M x M counts [gold][pred], classification only
    wall_clock_s: float
    degenerate_count: int = 0
    flags: list = field(default_factory=list)
    seed: int | None = None

    def to_json(self) -> str:
        # wall clock stays out of the file so identical runs emit identical bytes
        return json.dumps({
            "task": self.task, "template": self.template_id, "model": self.model_id,
            "metrics": self.metrics, "examples": self.example_count,
            "confusion": self.confusion,
            "degenerate": self.degenerate_count, "flags": self.flags,
            "seed": self.seed,
        }, sort_keys=True)

    def table(self) -> str:
        rows = [("task", self.task), ("template", self.template_id),
                ("model", self.model_id), ("examples", str(self.example_count)),
                ("wall_clock_s", f"{self.wall_clock_s:.3f}")]
        rows += [(k, f"{v:.4f}") for k, v in sorted(self.metrics.items())]
        if self.degenerate_count:
            rows.append(("degenerate", str(self.degenerate_count)))
        if self.flags:
            rows.append(("flags", ",".join(self.flags)))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def run_eval(dataset: Dataset, template: Template, weights: WeightContainer,
             vocab: Vocab, metric_kinds, max_len: int = 128, threads: int = 1,
             model_id: str = "", positive_class: int = 1) -> EvalReport:
    """Score every example and aggregate metrics deterministically."""
    t0 = time.monotonic()
    is_classification = template.task_kind == CLASSIFICATION
    for kind in metric_kinds:
        if kind == "pearson" and is_classification:
            raise MetricError("pearson applies to regression tasks")
        if kind in ("accuracy", "matthews", "f1") and not is_classification:
            raise MetricError(f"{kind} applies to classification tasks")

    def score(indexed):
        i, ex = indexed
        fields = {k: v for k, v in ex.items() if k != "label"}
        try:
            if is_classification:
                return classify(fields, template, weights, vocab, max_len)
            return regress(fields, template, weights, vocab, max_len)
        except Exception as exc:
            raise RuntimeError(f"example {i}: {exc}") from exc

    items = list(enumerate(dataset.examples))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(score, items))
    else:
        preds = [score(it) for it in items]

    y_hat = [p.y_hat for p in preds]
    golds = [ex["label"] for ex in dataset.examples]
    degenerate = sum(1 for p in preds if p.degenerate)
    metrics = {}
    flags = []
    for kind in metric_kinds:
        if kind == "matthews":
            value, defined = matthews_corr(y_hat, golds)
            metrics[kind] = value
            if not defined:
                flags.append("matthews_undefined")
        else:
            metrics[kind] = compute_metric(kind, y_hat, golds, positive_class)
    confusion = None
    if is_classification:
        m = template.num_classes
        confusion = [[0] * m for _ in range(m)]
        for g, p in zip(golds, y_hat):
            confusion[int(g)][int(p)] += 1
    return EvalReport(task=dataset.task, template_id=template.name, model_id=model_id,
                      metrics=metrics, example_count=len(dataset.examples),
                      confusion=confusion, wall_clock_s=time.monotonic() - t0,
                      degenerate_count=degenerate, flags=flags)
