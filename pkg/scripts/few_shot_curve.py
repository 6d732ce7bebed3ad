#!/usr/bin/env python3
"""Sweep the per-class example count K for prompt fine-tuning.

Pre-trains the toy discriminator once, then for each K fine-tunes through
the prompt objective and reports held-out accuracy on the synthetic
2-class task, averaged over seeds. K=0 is the zero-shot baseline.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from rtdprompt import pretrain as P
from rtdprompt.prompt import classify


def accuracy(weights, examples, template, vocab):
    hits = sum(classify(fields, template, weights, vocab, max_len=32).y_hat == y
               for fields, y in examples)
    return hits / len(examples)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ks", type=int, nargs="+", default=[0, 1, 4, 16, 32])
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--lr", type=float, default=3e-4)
    args = parser.parse_args()

    config = P.PretrainConfig(seed=0, steps=args.steps)
    print(f"pre-training {config.steps} steps ...")
    state, vocab, _, _ = P.run_toy_pretraining(config)
    base = state.discriminator_container()

    print(f"{'K':>4s}  " + "  ".join(f"seed{s}" for s in range(args.seeds)) + "   mean")
    for k in args.ks:
        accs = []
        for seed in range(args.seeds):
            rng = np.random.default_rng(100 + seed)
            train, template = P.parity_task(vocab, 64, rng)
            held, _ = P.parity_task(vocab, 64, rng)
            weights = P.finetune_prompt(base, train, template, vocab, k_per_class=k,
                                        epochs=args.epochs, lr=args.lr, seed=seed,
                                        max_len=32)
            accs.append(accuracy(weights, held, template, vocab))
        row = "  ".join(f"{a:5.3f}" for a in accs)
        print(f"{k:>4d}  {row}  {np.mean(accs):6.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
