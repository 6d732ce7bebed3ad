"""Toy-scale replaced-token-detection pre-training and prompt fine-tuning.

Trains a small generator (masked-token prediction) jointly with a
discriminator (original-vs-replaced per token). Sampling replacement tokens
is non-differentiable, so no gradient flows from the discriminator loss into
the generator; both models are updated by adaptive-moment descent with
linear warmup. Runs are fully seeded and bit-reproducible.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import model as M
from . import tensor as T
from .model import ModelConfig, WeightContainer
from .tensor import Tensor
from .tokenizer import Encoding, Vocab

ORIGINAL = 0
REPLACED = 1
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class MaskPlan:
    positions: tuple
    k: int


@dataclass
class CorruptedBatch:
    x_masked: np.ndarray
    x_corrupt: np.ndarray
    rtd_labels: np.ndarray       # ORIGINAL / REPLACED per position
    positions: np.ndarray        # masked positions
    originals: np.ndarray        # source tokens at the masked positions
    segment_ids: np.ndarray


def rtd_label(original_id: int, corrupt_id: int) -> int:
    """A sampled-equal token still counts as original."""
    return ORIGINAL if original_id == corrupt_id else REPLACED


def make_mask_plan(encoding: Encoding, rate: float = 0.15,
                   rng: np.random.Generator | None = None) -> MaskPlan:
    """Pick k = max(1, round(rate * n)) maskable positions uniformly."""
    if rng is None:
        raise ValueError("make_mask_plan requires an explicit rng for reproducibility")
    maskable = [i for i, sp in enumerate(encoding.spans) if sp is not None]
    if not maskable:
        raise ValueError("no maskable (non-special) tokens in the sequence")
    n = len(maskable)
    k = max(1, int(math.floor(rate * n + 0.5)))  # round half up
    chosen = rng.choice(np.asarray(maskable), size=k, replace=False)
    return MaskPlan(positions=tuple(sorted(int(i) for i in chosen)), k=k)


def corrupt(encoding: Encoding, plan: MaskPlan, generator: WeightContainer,
            rng: np.random.Generator, mask_id: int) -> CorruptedBatch:
    """Mask the planned positions, sample generator replacements, label them."""
    ids = np.asarray(encoding.ids, dtype=np.int64)
    seg = np.asarray(encoding.segment_ids, dtype=np.int64)
    positions = np.asarray(plan.positions, dtype=np.int64)
    x_masked = ids.copy()
    x_masked[positions] = mask_id
    dists = M.generator_forward(x_masked, seg, generator, positions)
    x_corrupt = ids.copy()
    for row, pos in zip(dists, positions):
        sampled = int(rng.choice(len(row), p=row / row.sum()))
        x_corrupt[pos] = sampled
    labels = np.full(len(ids), ORIGINAL, dtype=np.int64)
    for pos in positions:
        labels[pos] = rtd_label(int(ids[pos]), int(x_corrupt[pos]))
    return CorruptedBatch(x_masked=x_masked, x_corrupt=x_corrupt, rtd_labels=labels,
                          positions=positions, originals=ids[positions].copy(),
                          segment_ids=seg)


# -- losses -------------------------------------------------------------------

def mlm_loss_tensor(batches: list[CorruptedBatch], params: dict, cfg: ModelConfig) -> Tensor:
    """Mean over masked positions of -log P(original | x_masked), batch-averaged.

    All batches must share one sequence length (they are stacked for a single
    forward pass).
    """
    if any(len(b.positions) == 0 for b in batches) or not batches:
        raise ValueError("mlm loss needs at least one masked position per sequence")
    ids = np.stack([b.x_masked for b in batches])
    seg = np.stack([b.segment_ids for b in batches])
    logp = T.log_row_softmax(M.generator_logits(ids, seg, params, cfg))
    total = None
    for bi, b in enumerate(batches):
        rows = np.full(len(b.positions), bi)
        picked = logp[(rows, b.positions, b.originals)]
        term = -picked.mean()
        total = term if total is None else total + term
    return total * (1.0 / len(batches))


def disc_loss_tensor(batches: list[CorruptedBatch], params: dict, cfg: ModelConfig) -> Tensor:
    """Binary cross-entropy of P(replaced) against the corruption labels,
    averaged over all positions, then over the batch."""
    ids = np.stack([b.x_corrupt for b in batches])
    seg = np.stack([b.segment_ids for b in batches])
    p = M.discriminator_probs(ids, seg, params, cfg).clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    labels = np.stack([b.rtd_labels for b in batches]).astype(p.dtype)
    losses = -(p.log() * labels + (1.0 - p).log() * (1.0 - labels))
    return losses.mean(axis=1).mean()


def mlm_loss(batch: CorruptedBatch, generator: WeightContainer) -> float:
    return mlm_loss_tensor([batch], generator.params(), generator.config).item()


def disc_loss(batch: CorruptedBatch, discriminator: WeightContainer) -> float:
    return disc_loss_tensor([batch], discriminator.params(), discriminator.config).item()


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, params: dict, lr: float, t: int) -> None:
        for name in sorted(params):
            p = params[name]
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / (1 - self.beta1 ** t)
            vhat = self.v[name] / (1 - self.beta2 ** t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainState:
    gen_cfg: ModelConfig
    disc_cfg: ModelConfig
    gen_params: dict
    disc_params: dict
    rng: np.random.Generator
    seed: int
    step: int = 0
    total_steps: int = 1
    lr: float = 5e-4
    warmup_frac: float = 0.1
    mask_rate: float = 0.15
    gen_opt: AdamState = field(default_factory=AdamState)
    disc_opt: AdamState = field(default_factory=AdamState)

    @staticmethod
    def create(disc_cfg: ModelConfig, seed: int, total_steps: int,
               gen_cfg: ModelConfig | None = None, lr: float = 5e-4,
               mask_rate: float = 0.15, init_std: float = 0.1) -> "TrainState":
        if gen_cfg is None:
            gen_cfg = M.generator_config(disc_cfg)
        rng = np.random.default_rng(seed)
        gen = {k: Tensor(v, requires_grad=True)
               for k, v in M.init_params(gen_cfg, rng, std=init_std).items()}
        disc = {k: Tensor(v, requires_grad=True)
                for k, v in M.init_params(disc_cfg, rng, std=init_std).items()}
        return TrainState(gen_cfg=gen_cfg, disc_cfg=disc_cfg, gen_params=gen,
                          disc_params=disc, rng=rng, seed=seed,
                          total_steps=total_steps, lr=lr, mask_rate=mask_rate)

    def current_lr(self) -> float:
        warmup = max(1, int(self.warmup_frac * self.total_steps))
        return self.lr * min(1.0, (self.step + 1) / warmup)

    def generator_container(self) -> WeightContainer:
        return WeightContainer.from_params(self.gen_cfg, self.gen_params)

    def discriminator_container(self) -> WeightContainer:
        return WeightContainer.from_params(self.disc_cfg, self.disc_params)


def train_step(state: TrainState, encodings: list[Encoding], mask_id: int,
               lambda_disc: float = 50.0) -> tuple[float, float]:
    """One joint optimizer step; returns (mlm loss, discriminator loss)."""
    generator = state.generator_container()
    batches = [corrupt(e, make_mask_plan(e, state.mask_rate, state.rng),
                       generator, state.rng, mask_id) for e in encodings]
    l_mlm = mlm_loss_tensor(batches, state.gen_params, state.gen_cfg)
    l_disc = disc_loss_tensor(batches, state.disc_params, state.disc_cfg)
    combined = l_mlm + lambda_disc * l_disc
    if not math.isfinite(combined.item()):
        raise FloatingPointError(
            f"non-finite loss at step {state.step}: mlm={l_mlm.item()}, disc={l_disc.item()}")
    for p in list(state.gen_params.values()) + list(state.disc_params.values()):
        p.zero_grad()
    combined.backward()
    lr = state.current_lr()
    state.step += 1
    state.gen_opt.step(state.gen_params, lr, state.step)
    state.disc_opt.step(state.disc_params, lr, state.step)
    for p in list(state.gen_params.values()) + list(state.disc_params.values()):
        if not np.isfinite(p.data).all():
            raise FloatingPointError(f"non-finite parameter after step {state.step}")
    return l_mlm.item(), l_disc.item()


# -- synthetic corpus ---------------------------------------------------------

def toy_vocab(vocab_size: int = 30) -> Vocab:
    """[PAD] [UNK] [CLS] [SEP] [MASK] then content tokens tok0, tok1, ..."""
    toks = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    toks += [f"tok{i}" for i in range(vocab_size - len(toks))]
    return Vocab({t: i for i, t in enumerate(toks)}, toks, lowercase=True)


@dataclass
class MarkovChain:
    """Sparse random transition structure over the content tokens."""
    content: list
    trans: np.ndarray

    @staticmethod
    def create(vocab: Vocab, rng: np.random.Generator) -> "MarkovChain":
        content = sorted(set(range(len(vocab))) - set(vocab.special_ids))
        k = len(content)
        # sharp transitions: two likely successors per state over a faint
        # background, so off-chain replacements are statistically visible
        trans = np.full((k, k), 0.005)
        for i in range(k):
            nxt = rng.choice(k, size=2, replace=False)
            trans[i, nxt] += rng.uniform(2.0, 5.0, size=2)
        trans /= trans.sum(axis=1, keepdims=True)
        return MarkovChain(content=content, trans=trans)

    def sample(self, vocab: Vocab, n_sequences: int, seq_len: int,
               rng: np.random.Generator) -> list[Encoding]:
        k = len(self.content)
        out = []
        for _ in range(n_sequences):
            state = int(rng.integers(k))
            ids = [vocab.cls_id]
            for _ in range(seq_len - 2):
                state = int(rng.choice(k, p=self.trans[state]))
                ids.append(self.content[state])
            ids.append(vocab.sep_id)
            spans = [None] + [(i, i + 1) for i in range(seq_len - 2)] + [None]
            out.append(Encoding(ids=ids, spans=spans, segment_ids=[0] * seq_len))
        return out


def markov_corpus(vocab: Vocab, n_sequences: int, seq_len: int,
                  rng: np.random.Generator) -> list[Encoding]:
    """One-shot corpus from a fresh chain (training and held-out splits that
    must share statistics should go through MarkovChain directly)."""
    return MarkovChain.create(vocab, rng).sample(vocab, n_sequences, seq_len, rng)


# -- training driver ----------------------------------------------------------

@dataclass
class PretrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    vocab_size: int = 30
    seq_len: int = 20
    corpus_size: int = 512
    hidden: int = 32
    heads: int = 2
    num_layers: int = 2
    intermediate: int = 64
    lr: float = 2e-3
    lambda_disc: float = 50.0
    mask_rate: float = 0.15
    init_std: float = 0.1

    @staticmethod
    def from_file(path) -> "PretrainConfig":
        """key = value lines; '#' starts a comment."""
        kw = {}
        types = {f.name: f.type for f in fields(PretrainConfig)}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key = value")
                key, val = (s.strip() for s in line.split("=", 1))
                if key not in types:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                kw[key] = float(val) if types[key] == "float" else int(val)
        return PretrainConfig(**kw)


def run_toy_pretraining(config: PretrainConfig, curve_path=None,
                        log_every: int = 50, progress=None):
    """Train on a synthetic Markov corpus.

    Returns (state, vocab, curve rows, chain); the chain lets callers draw
    held-out sequences from the training distribution.
    """
    vocab = toy_vocab(config.vocab_size)
    disc_cfg = ModelConfig(num_layers=config.num_layers, hidden=config.hidden,
                           heads=config.heads, intermediate=config.intermediate,
                           vocab_size=config.vocab_size,
                           max_positions=max(64, config.seq_len),
                           embedding_size=config.hidden,
                           head_role=M.ROLE_DISCRIMINATOR, pad_id=vocab.pad_id)
    state = TrainState.create(disc_cfg, seed=config.seed, total_steps=config.steps,
                              lr=config.lr, mask_rate=config.mask_rate,
                              init_std=config.init_std)
    corpus_rng = np.random.default_rng(config.seed + 1)
    chain = MarkovChain.create(vocab, corpus_rng)
    corpus = chain.sample(vocab, config.corpus_size, config.seq_len, corpus_rng)
    curve = []
    t0 = time.monotonic()
    for step in range(config.steps):
        idx = state.rng.choice(len(corpus), size=config.batch_size, replace=False)
        batch = [corpus[i] for i in idx]
        l_mlm, l_disc = train_step(state, batch, vocab.mask_id, config.lambda_disc)
        curve.append((step, l_mlm, l_disc))
        if progress and (step + 1) % log_every == 0:
            progress(step + 1, l_mlm, l_disc, time.monotonic() - t0)
    if curve_path is not None:
        with open(curve_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "L_MLM", "L_Disc"])
            w.writerows(curve)
    return state, vocab, curve, chain


def detection_auc(state: TrainState, encodings: list[Encoding], mask_id: int,
                  seed: int = 12345) -> float:
    """Held-out AUC of P(replaced) against the true corruption labels."""
    rng = np.random.default_rng(seed)
    generator = state.generator_container()
    discriminator = state.discriminator_container()
    scores, labels = [], []
    for enc in encodings:
        plan = make_mask_plan(enc, state.mask_rate, rng)
        batch = corrupt(enc, plan, generator, rng, mask_id)
        out = M.discriminator_forward(batch.x_corrupt, batch.segment_ids, discriminator)
        scores.extend(out.p_replaced.tolist())
        labels.extend(batch.rtd_labels.tolist())
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    pos, neg = scores[labels == REPLACED], scores[labels == ORIGINAL]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC undefined: one class is empty")
    # rank statistic with tie correction
    order = np.argsort(np.concatenate([pos, neg]), kind="mergesort")
    ranks = np.empty(len(order))
    ranks[order] = np.arange(1, len(order) + 1)
    allv = np.concatenate([pos, neg])
    for v in np.unique(allv):
        tie = allv == v
        if tie.sum() > 1:
            ranks[tie] = ranks[tie].mean()
    return float((ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2)
                 / (len(pos) * len(neg)))


def parity_task(vocab: Vocab, n_examples: int, rng: np.random.Generator,
                tokens_per_example: int = 8):
    """Synthetic 2-class prompt task over the toy vocabulary.

    Class 0 sentences draw from even content-token ids, class 1 from odd
    ones; the label words are one token from each pool. Returns
    (examples, template) where examples are (fields, class index) pairs.
    """
    from .prompt import Template

    content = sorted(set(range(len(vocab))) - set(vocab.special_ids))
    pools = ([vocab.id_to_token[i] for i in content if i % 2 == 0],
             [vocab.id_to_token[i] for i in content if i % 2 == 1])
    examples = []
    for _ in range(n_examples):
        y = int(rng.integers(2))
        toks = rng.choice(pools[y], size=tokens_per_example)
        examples.append(({"input": " ".join(toks)}, y))
    template = Template("toy2", "{input} <SEP> {label}", (pools[0][0], pools[1][0]))
    return examples, template


# -- prompt-based few-shot fine-tuning ---------------------------------------

def finetune_prompt(discriminator: WeightContainer, examples: list, template,
                    vocab: Vocab, k_per_class: int, epochs: int,
                    lr: float = 1e-4, seed: int = 0, max_len: int = 64,
                    loss_mode: str = "nll") -> WeightContainer:
    """Update the discriminator on K labeled examples per class.

    examples: list of (fields dict, class index). loss_mode "nll" minimizes
    -log of the normalized class probability; "bce" trains per-token
    original/replaced targets on the label words directly.
    """
    from .prompt import class_score_tensors  # local import avoids a cycle

    if loss_mode not in ("nll", "bce"):
        raise ValueError(f"unknown loss_mode {loss_mode!r}")
    rng = np.random.default_rng(seed)
    by_class: dict = {}
    for ex in examples:
        by_class.setdefault(ex[1], []).append(ex)
    train = []
    for cls in sorted(by_class):
        pool = by_class[cls]
        take = min(k_per_class, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        train.extend(pool[i] for i in idx)
    if not train or epochs == 0:
        return discriminator

    params = discriminator.params(requires_grad=True)
    cfg = discriminator.config
    opt = AdamState()
    t = 0
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for i in order:
            ex_fields, y = train[i]
            scores = class_score_tensors(ex_fields, template, params, cfg, vocab, max_len)
            if loss_mode == "nll":
                total = scores[0]
                for s in scores[1:]:
                    total = total + s
                loss = -(scores[y].clip(1e-9, 1.0).log() - total.clip(1e-9, None).log())
            else:
                loss = None
                for m, s in enumerate(scores):
                    p_rep = (1.0 - s).clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
                    term = -(p_rep.log() if m != y else (1.0 - p_rep).log())
                    loss = term if loss is None else loss + term
            for p in params.values():
                p.zero_grad()
            loss.backward()
            t += 1
            opt.step(params, lr, t)
    return WeightContainer.from_params(cfg, params)
