import numpy as np
import pytest

from rtdprompt import model as M
from rtdprompt import pretrain as P


@pytest.fixture(scope="session")
def toy_vocab():
    return P.toy_vocab(30)


@pytest.fixture(scope="session")
def toy_disc_cfg(toy_vocab):
    return M.ModelConfig(num_layers=2, hidden=32, heads=2, intermediate=64,
                         vocab_size=len(toy_vocab), max_positions=64,
                         embedding_size=32, head_role=M.ROLE_DISCRIMINATOR,
                         pad_id=toy_vocab.pad_id)


@pytest.fixture(scope="session")
def toy_disc(toy_disc_cfg):
    rng = np.random.default_rng(11)
    return M.WeightContainer(toy_disc_cfg, M.init_params(toy_disc_cfg, rng))


@pytest.fixture(scope="session")
def toy_gen(toy_disc_cfg):
    cfg = M.generator_config(toy_disc_cfg)
    rng = np.random.default_rng(12)
    return M.WeightContainer(cfg, M.init_params(cfg, rng))


@pytest.fixture(scope="session")
def pretrained_toy():
    """One seeded 2,000-step toy pre-training run, shared across tests."""
    import time
    config = P.PretrainConfig(seed=0, steps=2000)
    t0 = time.monotonic()
    state, vocab, curve, chain = P.run_toy_pretraining(config)
    elapsed = time.monotonic() - t0
    return {"config": config, "state": state, "vocab": vocab,
            "curve": curve, "chain": chain, "elapsed_s": elapsed}
