import copy
import math

import numpy as np
import pytest

from rtdprompt import model as M
from rtdprompt import pretrain as P
from rtdprompt.tokenizer import Encoding


def toy_encoding(content_ids, vocab):
    n = len(content_ids) + 2
    ids = [vocab.cls_id] + list(content_ids) + [vocab.sep_id]
    spans = [None] + [(i, i + 1) for i in range(len(content_ids))] + [None]
    return Encoding(ids=ids, spans=spans, segment_ids=[0] * n)


def forced_generator(cfg, token_id=None, delta=None):
    """Generator whose output distribution is a fixed bias pattern."""
    tensors = M.zero_params(cfg)
    bias = np.zeros(cfg.vocab_size, dtype=np.float32)
    if token_id is not None:
        bias[token_id] = 100.0
    if delta is not None:
        bias += delta
    tensors["head.out_bias"] = bias
    return M.WeightContainer(cfg, tensors)


@pytest.fixture
def gen_cfg(toy_vocab):
    return M.ModelConfig(1, 16, 2, 16, len(toy_vocab), 64, 16,
                         M.ROLE_GENERATOR, pad_id=toy_vocab.pad_id)


class TestMaskPlan:
    def test_fifteen_percent_of_twenty(self, toy_vocab):
        enc = toy_encoding(range(5, 25), toy_vocab)
        plan = P.make_mask_plan(enc, 0.15, np.random.default_rng(0))
        assert plan.k == 3 and len(plan.positions) == 3

    def test_floor_guard(self, toy_vocab):
        enc = toy_encoding([5, 6], toy_vocab)
        plan = P.make_mask_plan(enc, 0.15, np.random.default_rng(0))
        assert plan.k == 1

    def test_round_half_up(self, toy_vocab):
        enc = toy_encoding(range(5, 15), toy_vocab)  # 10 maskable, 1.5 -> 2
        plan = P.make_mask_plan(enc, 0.15, np.random.default_rng(0))
        assert plan.k == 2

    def test_seeded_determinism(self, toy_vocab):
        enc = toy_encoding(range(5, 25), toy_vocab)
        a = P.make_mask_plan(enc, 0.15, np.random.default_rng(7))
        b = P.make_mask_plan(enc, 0.15, np.random.default_rng(7))
        assert a == b

    def test_never_selects_specials(self, toy_vocab):
        enc = toy_encoding(range(5, 25), toy_vocab)
        rng = np.random.default_rng(1)
        for _ in range(50):
            plan = P.make_mask_plan(enc, 0.5, rng)
            for pos in plan.positions:
                assert enc.spans[pos] is not None

    def test_no_maskable_tokens(self, toy_vocab):
        enc = Encoding(ids=[toy_vocab.cls_id, toy_vocab.sep_id],
                       spans=[None, None], segment_ids=[0, 0])
        with pytest.raises(ValueError, match="maskable"):
            P.make_mask_plan(enc, 0.15, np.random.default_rng(0))


class TestCorrupt:
    def test_rtd_label_exhaustive_vocab4(self):
        for original in range(4):
            for sampled in range(4):
                want = P.ORIGINAL if sampled == original else P.REPLACED
                assert P.rtd_label(original, sampled) == want

    def test_generator_emitting_originals_labels_all_original(self, toy_vocab, gen_cfg):
        enc = toy_encoding([7, 7, 7, 7], toy_vocab)
        plan = P.make_mask_plan(enc, 0.5, np.random.default_rng(0))
        gen = forced_generator(gen_cfg, token_id=7)
        batch = P.corrupt(enc, plan, gen, np.random.default_rng(1), toy_vocab.mask_id)
        assert (batch.rtd_labels == P.ORIGINAL).all()
        assert np.array_equal(batch.x_corrupt, enc.ids)

    def test_forced_wrong_token_labels_replaced_exactly_at_m(self, toy_vocab, gen_cfg):
        enc = toy_encoding([7, 8, 9, 10], toy_vocab)
        plan = P.make_mask_plan(enc, 0.5, np.random.default_rng(0))
        gen = forced_generator(gen_cfg, token_id=6)
        batch = P.corrupt(enc, plan, gen, np.random.default_rng(1), toy_vocab.mask_id)
        replaced = {i for i, lab in enumerate(batch.rtd_labels) if lab == P.REPLACED}
        assert replaced == set(plan.positions)

    def test_corrupt_only_differs_at_masked_positions(self, toy_vocab, gen_cfg, toy_gen):
        enc = toy_encoding(range(5, 15), toy_vocab)
        plan = P.make_mask_plan(enc, 0.3, np.random.default_rng(3))
        batch = P.corrupt(enc, plan, toy_gen, np.random.default_rng(4), toy_vocab.mask_id)
        diff = np.flatnonzero(batch.x_corrupt != np.asarray(enc.ids))
        assert set(diff).issubset(set(plan.positions))

    def test_uniform_generator_replacement_rate(self, toy_vocab, gen_cfg):
        # zero weights -> uniform sampling over the whole vocabulary
        gen = forced_generator(gen_cfg)
        enc = toy_encoding([7] * 10, toy_vocab)
        rng = np.random.default_rng(5)
        plans = P.make_mask_plan(enc, 1.0, rng)
        replaced = total = 0
        for _ in range(1000):
            batch = P.corrupt(enc, plans, gen, rng, toy_vocab.mask_id)
            replaced += int((batch.rtd_labels[list(plans.positions)] == P.REPLACED).sum())
            total += len(plans.positions)
        expected = 1.0 - 1.0 / gen_cfg.vocab_size
        assert replaced / total == pytest.approx(expected, abs=0.02)


class TestLosses:
    def test_mlm_uniform_vocab4(self, toy_vocab):
        cfg = M.ModelConfig(1, 8, 2, 8, 4, 16, 8, M.ROLE_GENERATOR, pad_id=0)
        gen = M.WeightContainer(cfg, M.zero_params(cfg))
        batch = P.CorruptedBatch(
            x_masked=np.array([2, 3, 2]), x_corrupt=np.array([2, 1, 2]),
            rtd_labels=np.array([0, 1, 0]), positions=np.array([1]),
            originals=np.array([1]), segment_ids=np.zeros(3, dtype=int))
        assert P.mlm_loss(batch, gen) == pytest.approx(math.log(4), abs=1e-6)

    def test_mlm_perfect_prediction(self, toy_vocab, gen_cfg):
        gen = forced_generator(gen_cfg, token_id=7)
        enc = toy_encoding([7, 7, 7], toy_vocab)
        plan = P.MaskPlan(positions=(1, 2), k=2)
        batch = P.corrupt(enc, plan, gen, np.random.default_rng(0), toy_vocab.mask_id)
        assert P.mlm_loss(batch, gen) == pytest.approx(0.0, abs=1e-3)

    def test_mlm_nonnegative(self, toy_vocab, toy_gen):
        rng = np.random.default_rng(0)
        for _ in range(5):
            enc = toy_encoding(rng.integers(5, 29, size=8), toy_vocab)
            plan = P.make_mask_plan(enc, 0.3, rng)
            batch = P.corrupt(enc, plan, toy_gen, rng, toy_vocab.mask_id)
            assert P.mlm_loss(batch, toy_gen) >= 0.0

    def test_mlm_requires_masked_positions(self, toy_gen):
        batch = P.CorruptedBatch(
            x_masked=np.array([2, 3]), x_corrupt=np.array([2, 3]),
            rtd_labels=np.array([0, 0]), positions=np.array([], dtype=int),
            originals=np.array([], dtype=int), segment_ids=np.zeros(2, dtype=int))
        with pytest.raises(ValueError):
            P.mlm_loss(batch, toy_gen)

    def test_disc_half_everywhere_gives_ln2(self, toy_vocab, toy_disc_cfg):
        disc = M.WeightContainer(toy_disc_cfg, M.zero_params(toy_disc_cfg))
        batch = P.CorruptedBatch(
            x_masked=np.array([2, 7, 3]), x_corrupt=np.array([2, 8, 3]),
            rtd_labels=np.array([0, 1, 0]), positions=np.array([1]),
            originals=np.array([7]), segment_ids=np.zeros(3, dtype=int))
        assert P.disc_loss(batch, disc) == pytest.approx(math.log(2), abs=1e-6)

    def test_disc_label_flip_symmetry(self, toy_vocab, toy_disc):
        batch = P.CorruptedBatch(
            x_masked=np.array([2, 7, 8, 3]), x_corrupt=np.array([2, 9, 8, 3]),
            rtd_labels=np.array([0, 1, 0, 0]), positions=np.array([1]),
            originals=np.array([7]), segment_ids=np.zeros(4, dtype=int))
        base = P.disc_loss(batch, toy_disc)
        # D -> 1 - D by negating the head projection; flip the labels too
        flipped_tensors = copy.deepcopy(toy_disc.tensors)
        flipped_tensors["head.out.w"] = -flipped_tensors["head.out.w"]
        flipped_tensors["head.out.b"] = -flipped_tensors["head.out.b"]
        flipped = M.WeightContainer(toy_disc.config, flipped_tensors)
        batch_flipped = copy.deepcopy(batch)
        batch_flipped.rtd_labels = 1 - batch_flipped.rtd_labels
        assert P.disc_loss(batch_flipped, flipped) == pytest.approx(base, abs=1e-6)

    def test_disc_extreme_scores_stay_finite(self, toy_vocab, toy_disc_cfg):
        tensors = M.zero_params(toy_disc_cfg)
        tensors["head.out.b"] = np.array([1e4], dtype=np.float32)
        disc = M.WeightContainer(toy_disc_cfg, tensors)
        batch = P.CorruptedBatch(
            x_masked=np.array([2, 7, 3]), x_corrupt=np.array([2, 8, 3]),
            rtd_labels=np.array([0, 1, 0]), positions=np.array([1]),
            originals=np.array([7]), segment_ids=np.zeros(3, dtype=int))
        assert math.isfinite(P.disc_loss(batch, disc))


class TestTrainStep:
    def test_zero_lr_is_noop(self, toy_disc_cfg, toy_vocab):
        state = P.TrainState.create(toy_disc_cfg, seed=0, total_steps=10, lr=0.0)
        before = {k: v.data.copy() for k, v in state.disc_params.items()}
        corpus = P.markov_corpus(toy_vocab, 4, 12, np.random.default_rng(0))
        P.train_step(state, corpus, toy_vocab.mask_id, 50.0)
        for k, v in state.disc_params.items():
            assert np.array_equal(before[k], v.data)

    def test_identical_seeds_identical_trajectories(self, toy_disc_cfg, toy_vocab):
        def run():
            state = P.TrainState.create(toy_disc_cfg, seed=3, total_steps=20, lr=1e-3)
            corpus = P.markov_corpus(toy_vocab, 16, 12, np.random.default_rng(5))
            return [P.train_step(state, corpus[:4], toy_vocab.mask_id, 50.0)
                    for _ in range(10)]

        assert run() == run()

    def test_nonfinite_parameters_detected(self, toy_disc_cfg, toy_vocab):
        state = P.TrainState.create(toy_disc_cfg, seed=0, total_steps=10, lr=1e-3)
        state.disc_params["head.out.b"].data[:] = np.nan
        corpus = P.markov_corpus(toy_vocab, 4, 12, np.random.default_rng(0))
        with pytest.raises(FloatingPointError):
            P.train_step(state, corpus, toy_vocab.mask_id, 50.0)


class TestPretrainConfig:
    def test_from_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("seed = 7\nsteps=100  # short\nlr = 0.001\n", encoding="utf-8")
        cfg = P.PretrainConfig.from_file(path)
        assert (cfg.seed, cfg.steps, cfg.lr) == (7, 100, 0.001)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("bogus = 1\n", encoding="utf-8")
        with pytest.raises(ValueError, match="bogus"):
            P.PretrainConfig.from_file(path)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("just words\n", encoding="utf-8")
        with pytest.raises(ValueError, match="key = value"):
            P.PretrainConfig.from_file(path)


class TestFinetunePrompt:
    def test_k_zero_leaves_weights_unchanged(self, pretrained_toy):
        state, vocab = pretrained_toy["state"], pretrained_toy["vocab"]
        disc = state.discriminator_container()
        examples, template = P.parity_task(vocab, 8, np.random.default_rng(0))
        out = P.finetune_prompt(disc, examples, template, vocab, k_per_class=0,
                                epochs=3, seed=0)
        assert out is disc

    def test_one_epoch_descends_on_training_set(self, pretrained_toy):
        state, vocab = pretrained_toy["state"], pretrained_toy["vocab"]
        disc = state.discriminator_container()
        rng = np.random.default_rng(1)
        examples, template = P.parity_task(vocab, 16, rng)

        def nll(weights):
            from rtdprompt.prompt import class_score_tensors
            total = 0.0
            for fields, y in examples:
                scores = class_score_tensors(fields, template, weights.params(),
                                             weights.config, vocab, 32)
                raw = np.maximum([s.item() for s in scores], 1e-9)
                total += -math.log(raw[y] / raw.sum())
            return total / len(examples)

        before = nll(disc)
        after_w = P.finetune_prompt(disc, examples, template, vocab, k_per_class=16,
                                    epochs=1, lr=1e-4, seed=0, max_len=32)
        assert nll(after_w) <= before

    def test_loss_mode_validated(self, toy_disc, toy_vocab):
        examples, template = P.parity_task(toy_vocab, 4, np.random.default_rng(0))
        with pytest.raises(ValueError, match="loss_mode"):
            P.finetune_prompt(toy_disc, examples, template, toy_vocab, 4, 1,
                              loss_mode="mse")

    def test_bce_mode_runs(self, toy_disc, toy_vocab):
        examples, template = P.parity_task(toy_vocab, 4, np.random.default_rng(0))
        out = P.finetune_prompt(toy_disc, examples, template, toy_vocab, 2, 1,
                                lr=1e-4, seed=0, max_len=32, loss_mode="bce")
        assert isinstance(out, M.WeightContainer)


def test_markov_chain_reproducible(toy_vocab):
    a = P.MarkovChain.create(toy_vocab, np.random.default_rng(4))
    b = P.MarkovChain.create(toy_vocab, np.random.default_rng(4))
    assert np.array_equal(a.trans, b.trans)
    sa = a.sample(toy_vocab, 3, 10, np.random.default_rng(1))
    sb = b.sample(toy_vocab, 3, 10, np.random.default_rng(1))
    assert [e.ids for e in sa] == [e.ids for e in sb]
