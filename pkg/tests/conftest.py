"""Shared fixtures: a generated dataset directory and one trained
micro-model, reused by the CLI and acceptance tests."""

import pytest

from dualvqa.config import TrainConfig
from dualvqa.data import DataConfig, build_answer_vocab, build_word_vocab, generate_dataset
from dualvqa.training import prepare_examples, train


@pytest.fixture(scope="session")
def vocabs():
    return build_word_vocab(), build_answer_vocab()


@pytest.fixture(scope="session")
def micro_world():
    """(data_config, train examples, val examples) at trainable scale."""
    dc = DataConfig()
    train_ex, val_ex = generate_dataset(2000, 300, dc, seed=0)
    return dc, train_ex, val_ex


@pytest.fixture(scope="session")
def trained_micro(micro_world, vocabs):
    """A dual-trained model good enough for decode-quality checks."""
    from dualvqa.objectives import LossWeights

    dc, train_ex, val_ex = micro_world
    word_vocab, answer_vocab = vocabs
    config = TrainConfig(
        regime="dt", epochs=100, batch_size=32, lr=2e-3, seed=0,
        t=32, t_v=32, rank=4, d_q=32, d_a=32, d_w=24, beam_width=3,
        weights=LossWeights(vqg=3.0, q_duality=2.0, a_duality=2.0),
    )
    items = prepare_examples(train_ex, word_vocab, answer_vocab, dc)
    val_items = prepare_examples(val_ex, word_vocab, answer_vocab, dc)
    result = train(config, items, val_items, word_vocab, answer_vocab)
    return result.model, result.best_report, dc, val_ex
