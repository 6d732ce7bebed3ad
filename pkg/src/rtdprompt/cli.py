"""Command-line entry point: predict, evaluate, pretrain-toy, finetune,
inspect-weights."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import evalharness as E
from . import model as M
from . import pretrain as P
from .prompt import BUILTIN_TEMPLATES, CLASSIFICATION, Template, classify, parse_template, regress
from .tokenizer import load_vocab

MODEL_DIR_ENV = "RTD_MODEL_DIR"


def _resolve_path(path: str) -> str:
    if path and not os.path.exists(path):
        base = os.environ.get(MODEL_DIR_ENV)
        if base:
            candidate = os.path.join(base, path)
            if os.path.exists(candidate):
                return candidate
    return path


def _load_template(args) -> Template:
    if getattr(args, "template_file", None):
        with open(args.template_file, encoding="utf-8") as fh:
            return parse_template(fh.read(), name=os.path.basename(args.template_file))
    if getattr(args, "task", None):
        name = args.task.lower()
        if name not in BUILTIN_TEMPLATES:
            raise ValueError(f"unknown task {name!r}; built-ins: "
                             f"{', '.join(sorted(BUILTIN_TEMPLATES))}")
        return BUILTIN_TEMPLATES[name]
    raise ValueError("one of --task or --template-file is required")


def _parse_fields(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--field expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        out[k] = v
    return out


def _print_config(name: str, cfg: dict) -> None:
    print(f"[{name}] " + " ".join(f"{k}={v}" for k, v in sorted(cfg.items())))


def _schema_for(template: Template, args) -> E.DatasetSchema:
    fields = _parse_fields(args.field)
    if not fields:
        import re
        placeholders = [p for p in re.findall(r"\{([a-z0-9_]+)\}", template.pattern)
                        if p != "label"]
        if template.name == "sst2":
            fields = {"input": "sentence"}
        else:
            fields = {p: p for p in placeholders}
    labels = bounds = None
    if template.task_kind == CLASSIFICATION:
        if args.labels:
            labels = tuple(args.labels.split(","))
        elif template.name == "sst2":
            labels = ("1", "0")  # class 0 = positive label word
        else:
            labels = tuple(str(i) for i in range(template.num_classes))
    else:
        bounds = template.bounds
    return E.DatasetSchema(fields=fields, label=args.label_column, labels=labels,
                           bounds=bounds, positive_class=args.positive_class)


def cmd_predict(args) -> int:
    template = _load_template(args)
    vocab = load_vocab(_resolve_path(args.vocab), lowercase=not args.cased)
    weights = M.load_weights(_resolve_path(args.weights))
    fields = _parse_fields(args.field)
    if args.text is not None:
        fields.setdefault("input", args.text)
    _print_config("predict", {"task": template.name, "weights": args.weights,
                              "vocab": args.vocab, "max_len": args.max_len,
                              "seed": args.seed})
    if template.task_kind == CLASSIFICATION:
        pred = classify(fields, template, weights, vocab, max_len=args.max_len)
        out = {"task": template.name, "label": int(pred.y_hat),
               "label_word": template.label_words[int(pred.y_hat)],
               "probs": [round(float(p), 6) for p in pred.class_probs],
               "degenerate": pred.degenerate, "seed": args.seed}
    else:
        pred = regress(fields, template, weights, vocab, max_len=args.max_len)
        out = {"task": template.name, "value": float(pred.y_hat), "seed": args.seed}
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    template = _load_template(args)
    vocab = load_vocab(_resolve_path(args.vocab), lowercase=not args.cased)
    weights = M.load_weights(_resolve_path(args.weights))
    schema = _schema_for(template, args)
    dataset = E.load_dataset(args.data, args.format, schema, task=template.name)
    if args.sample:
        dataset = E.sample_examples(dataset, args.sample, seed=args.seed)
    metrics = args.metrics.split(",") if args.metrics else (
        ["accuracy"] if template.task_kind == CLASSIFICATION else ["pearson"])
    _print_config("evaluate", {"task": template.name, "weights": args.weights,
                               "data": args.data, "examples": len(dataset),
                               "metrics": ",".join(metrics), "threads": args.threads,
                               "max_len": args.max_len, "seed": args.seed})
    report = E.run_eval(dataset, template, weights, vocab, metrics,
                        max_len=args.max_len, threads=args.threads,
                        model_id=os.path.basename(args.weights),
                        positive_class=schema.positive_class)
    report.seed = args.seed
    print(report.table())
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        print(f"report written to {args.output}")
    return 0


def cmd_pretrain_toy(args) -> int:
    if args.config:
        config = P.PretrainConfig.from_file(args.config)
    else:
        config = P.PretrainConfig()
    for key in ("seed", "steps", "batch_size", "lr", "lambda_disc"):
        val = getattr(args, key)
        if val is not None:
            config = dataclasses.replace(config, **{key: val})
    _print_config("pretrain-toy", dataclasses.asdict(config))

    def progress(step, l_mlm, l_disc, elapsed):
        print(f"step {step}/{config.steps}  L_MLM={l_mlm:.4f}  L_Disc={l_disc:.4f}  "
              f"{elapsed:.1f}s")

    state, vocab, curve, _ = P.run_toy_pretraining(config, curve_path=args.curve,
                                                   progress=progress)
    M.save_weights(state.discriminator_container(), args.out_discriminator)
    print(f"discriminator weights written to {args.out_discriminator}")
    if args.out_generator:
        M.save_weights(state.generator_container(), args.out_generator)
        print(f"generator weights written to {args.out_generator}")
    if args.out_vocab:
        with open(args.out_vocab, "w", encoding="utf-8") as fh:
            fh.write("\n".join(vocab.id_to_token) + "\n")
        print(f"vocabulary written to {args.out_vocab}")
    return 0


def cmd_finetune(args) -> int:
    template = _load_template(args)
    vocab = load_vocab(_resolve_path(args.vocab), lowercase=not args.cased)
    weights = M.load_weights(_resolve_path(args.weights))
    schema = _schema_for(template, args)
    dataset = E.load_dataset(args.data, args.format, schema, task=template.name)
    examples = [({k: v for k, v in ex.items() if k != "label"}, int(ex["label"]))
                for ex in dataset.examples]
    _print_config("finetune", {"task": template.name, "weights": args.weights,
                               "k": args.k, "epochs": args.epochs, "lr": args.lr,
                               "loss_mode": args.loss_mode, "seed": args.seed})
    updated = P.finetune_prompt(weights, examples, template, vocab, args.k,
                                args.epochs, lr=args.lr, seed=args.seed,
                                max_len=args.max_len, loss_mode=args.loss_mode)
    M.save_weights(updated, args.out)
    print(f"fine-tuned weights written to {args.out}")
    return 0


def cmd_inspect_weights(args) -> int:
    container = M.load_weights(_resolve_path(args.weights))
    cfg = container.config
    _print_config("inspect-weights", {"weights": args.weights})
    print(json.dumps(dataclasses.asdict(cfg), sort_keys=True))
    total = 0
    for name in sorted(container.tensors):
        arr = container.tensors[name]
        total += arr.size
        print(f"{name:40s} {str(arr.shape):>18s} {arr.size:>10d}")
    print(f"{'total parameters':40s} {'':>18s} {total:>10d}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rtdprompt",
        description="Replaced-token-detection prompt classification engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, weights=True):
        if weights:
            p.add_argument("--weights", required=True)
            p.add_argument("--vocab", required=True)
            p.add_argument("--cased", action="store_true",
                           help="vocabulary preserves case (default: uncased)")
        p.add_argument("--task")
        p.add_argument("--template-file")
        p.add_argument("--max-len", type=int, default=128)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--field", action="append",
                       help="placeholder=value (predict) or placeholder=column")

    p = sub.add_parser("predict", help="classify or regress a single example")
    common(p)
    p.add_argument("--text", help="shorthand for --field input=...")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="run a dataset and report metrics")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv")
    p.add_argument("--label-column", default="label")
    p.add_argument("--labels", help="comma-separated label values, index = class")
    p.add_argument("--positive-class", type=int, default=1)
    p.add_argument("--metrics")
    p.add_argument("--output", help="JSON-lines report path")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--sample", type=int, help="fixed-seed subsample size")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("pretrain-toy", help="toy RTD pre-training run")
    p.add_argument("--config", help="key = value training configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-disc", type=float)
    p.add_argument("--out-discriminator", required=True)
    p.add_argument("--out-generator")
    p.add_argument("--out-vocab")
    p.add_argument("--curve", help="loss-curve CSV path")
    p.set_defaults(fn=cmd_pretrain_toy)

    p = sub.add_parser("finetune", help="prompt-based few-shot fine-tuning")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv")
    p.add_argument("--label-column", default="label")
    p.add_argument("--labels")
    p.add_argument("--positive-class", type=int, default=1)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--loss-mode", choices=("nll", "bce"), default="nll")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("inspect-weights", help="print container config and tensors")
    p.add_argument("--weights", required=True)
    p.set_defaults(fn=cmd_inspect_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    np.random.seed(getattr(args, "seed", 0) or 0)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # runtime errors exit 1, usage errors exit 2 via argparse
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
