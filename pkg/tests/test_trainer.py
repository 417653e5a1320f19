"""Optimizer fixtures, training-loop contracts, checkpointing, augmentation,
and regime wiring on miniature runs."""

import numpy as np
import pytest

from dualvqa.config import TrainConfig
from dualvqa.data import (
    DataConfig,
    SplitSpec,
    build_answer_vocab,
    build_word_vocab,
    generate_dataset,
    split_for_augmentation,
)
from dualvqa.model import Model, answer_scores
from dualvqa.training import (
    AdamState,
    TrainingError,
    adam_step,
    augment_with_vqg,
    evaluate,
    load_model,
    prepare_examples,
    records_to_jsonl,
    run_regime,
    save_model,
    train,
)

DC = DataConfig()
WORDS = build_word_vocab()
ANSWERS = build_answer_vocab()


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=8, lr=1e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def tiny_data(n_train=24, n_val=8, seed=0):
    train_ex, val_ex = generate_dataset(n_train, n_val, DC, seed=seed)
    return (
        prepare_examples(train_ex, WORDS, ANSWERS, DC),
        prepare_examples(val_ex, WORDS, ANSWERS, DC),
        train_ex,
        val_ex,
    )


class TestAdam:
    def test_zero_gradient_from_rest_leaves_params(self):
        params = {"p": np.array([1.0, -2.0])}
        state = AdamState()
        adam_step(params, {"p": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_allclose(params["p"], [1.0, -2.0], atol=1e-12)

    def test_zero_gradient_decays_moments(self):
        params = {"p": np.array([1.0, -2.0])}
        state = AdamState(m={"p": np.array([0.5, 0.5])}, v={"p": np.array([0.25, 0.25])}, t=3)
        adam_step(params, {"p": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_allclose(state.m["p"], 0.9 * 0.5)
        np.testing.assert_allclose(state.v["p"], 0.999 * 0.25)

    def test_first_step_magnitude_is_learning_rate(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            g = rng.uniform(0.5, 2.0, size=4) * rng.choice([-1.0, 1.0], size=4)
            g *= 10.0 ** rng.integers(-1, 3)
            params = {"p": np.zeros(4)}
            adam_step(params, {"p": g.copy()}, AdamState(), lr=0.01)
            np.testing.assert_allclose(np.abs(params["p"]), 0.01, rtol=1e-4)
            np.testing.assert_allclose(np.sign(params["p"]), -np.sign(g))

    def test_three_step_trace_matches_hand_recursion(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        grads = [1.0, 1.0, -1.0]
        # hand recursion
        theta, m, v = 0.0, 0.0, 0.0
        expected = []
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            expected.append(theta)
        params = {"p": np.zeros(1)}
        state = AdamState()
        got = []
        for g in grads:
            adam_step(params, {"p": np.array([g])}, state, lr=lr)
            got.append(float(params["p"][0]))
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_rejects_non_finite_gradients(self):
        with pytest.raises(TrainingError, match="non-finite"):
            adam_step({"p": np.zeros(1)}, {"p": np.array([np.nan])}, AdamState(), lr=0.1)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(TrainingError, match="shape"):
            adam_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, AdamState(), lr=0.1)


class TestTrainLoop:
    def test_zero_epochs_returns_initial_params_with_report(self):
        train_items, val_items, _, _ = tiny_data()
        config = tiny_config(epochs=0)
        result = train(config, train_items, val_items, WORDS, ANSWERS)
        fresh = Model.init(config, len(WORDS), len(ANSWERS), np.random.default_rng(0))
        for name in fresh.params:
            np.testing.assert_array_equal(result.model.params[name], fresh.params[name])
        assert result.best_report.n_examples == len(val_items)
        assert result.best_epoch == 0

    def test_zero_learning_rate_keeps_params(self):
        train_items, val_items, _, _ = tiny_data()
        config = tiny_config(lr=1e-30, epochs=2)  # lr must be positive; use negligible
        result = train(config, train_items, val_items, WORDS, ANSWERS)
        fresh = Model.init(config, len(WORDS), len(ANSWERS), np.random.default_rng(0))
        for name in fresh.params:
            np.testing.assert_allclose(result.model.params[name], fresh.params[name], atol=1e-20)

    def test_training_loss_decreases_on_micro_run(self):
        train_ex, val_ex = generate_dataset(200, 20, DC, seed=1)
        items = prepare_examples(train_ex, WORDS, ANSWERS, DC)
        val_items = prepare_examples(val_ex, WORDS, ANSWERS, DC)
        result = train(tiny_config(epochs=5, batch_size=32), items, val_items, WORDS, ANSWERS)
        losses = [r["loss_total"] for r in result.records if r["split"] == "train"]
        assert len(losses) == 5
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_records_schema(self):
        train_items, val_items, _, _ = tiny_data()
        result = train(tiny_config(epochs=1), train_items, val_items, WORDS, ANSWERS)
        keys = {
            "phase", "epoch", "split", "acc1", "acc5", "bleu",
            "loss_vqa", "loss_vqg", "loss_q_duality", "loss_a_duality", "loss_total",
        }
        for rec in result.records:
            assert set(rec) == keys
        train_recs = [r for r in result.records if r["split"] == "train"]
        val_recs = [r for r in result.records if r["split"] == "val"]
        assert train_recs[0]["acc1"] is None
        assert 0.0 <= val_recs[0]["acc1"] <= 1.0

    def test_determinism_bit_identical_records(self):
        out = []
        for _ in range(2):
            train_items, val_items, _, _ = tiny_data()
            result = train(tiny_config(epochs=2), train_items, val_items, WORDS, ANSWERS)
            out.append(records_to_jsonl(result.records).encode())
        assert out[0] == out[1]

    def test_best_epoch_params_returned(self):
        train_items, val_items, _, _ = tiny_data(n_train=60, n_val=16)
        result = train(tiny_config(epochs=3), train_items, val_items, WORDS, ANSWERS)
        report, _ = evaluate(result.model, val_items, WORDS, beam_width=1)
        assert report.acc_at_1 == pytest.approx(result.best_report.acc_at_1)


class TestCheckpoint:
    def test_round_trip_bit_exact_forward(self, tmp_path):
        train_items, val_items, _, _ = tiny_data()
        result = train(tiny_config(epochs=1), train_items, val_items, WORDS, ANSWERS)
        path = tmp_path / "model.ckpt"
        save_model(path, result.model, adam=result.adam, rng=result.rng, epoch=1)
        loaded, meta, adam, rng = load_model(path)
        for name, arr in result.model.params.items():
            assert arr.tobytes() == loaded.params[name].tobytes()
        item = val_items[0]
        np.testing.assert_array_equal(
            answer_scores(result.model, item.grid, item.question_ids),
            answer_scores(loaded, item.grid, item.question_ids),
        )
        assert meta["epoch"] == 1
        assert adam.t == result.adam.t
        for name, arr in result.adam.m.items():
            assert arr.tobytes() == adam.m[name].tobytes()
        # restored rng continues the same stream
        assert rng.integers(1 << 30) == result.rng.integers(1 << 30)

    def test_rejects_corrupted_file(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_model(path)


class TestAugmentation:
    def trained_micro_model(self):
        train_items, val_items, _, _ = tiny_data(n_train=40, n_val=8)
        return train(tiny_config(epochs=1), train_items, val_items, WORDS, ANSWERS).model

    def test_empty_input_empty_output(self):
        model = self.trained_micro_model()
        out, dropped = augment_with_vqg(model, [], WORDS, ANSWERS, DC)
        assert out == [] and dropped == 0

    def test_records_marked_synthetic_with_questions(self):
        model = self.trained_micro_model()
        train_ex, _ = generate_dataset(12, 0, DC, seed=3)
        _, set2 = split_for_augmentation(train_ex, SplitSpec(fraction_pairs=0.5, seed=0))
        out, dropped = augment_with_vqg(model, set2, WORDS, ANSWERS, DC)
        assert len(out) + dropped == len(set2)
        for ex in out:
            assert ex.synthetic
            assert ex.question is not None and len(ex.question) >= 1
            assert ex.answer in ANSWER_VALUES_SET

    def test_rigged_decoder_emits_fixed_question_or_drops(self):
        model = self.trained_micro_model()
        # rig the decode head so <end> always wins: every record drops
        model.params["decode.out_w"][...] = 0.0
        model.params["decode.out_b"][...] = 0.0
        model.params["decode.out_b"][2] = 50.0
        train_ex, _ = generate_dataset(6, 0, DC, seed=4)
        _, set2 = split_for_augmentation(train_ex, SplitSpec(fraction_pairs=0.5, seed=0))
        out, dropped = augment_with_vqg(model, set2, WORDS, ANSWERS, DC)
        assert out == [] and dropped == len(set2)
        # rig a fixed two-token question instead
        model.params["decode.out_b"][2] = 0.0
        model.params["decode.out_b"][5] = 50.0  # always token 5... then still 5
        out2, dropped2 = augment_with_vqg(model, set2, WORDS, ANSWERS, DC)
        assert dropped2 == 0
        expected = [WORDS.token_of(5)] * model.config.max_question_len
        assert all(ex.question == expected for ex in out2)


ANSWER_VALUES_SET = set(
    build_answer_vocab().decode(range(len(build_answer_vocab())))
)


class TestRegimes:
    def run(self, regime, train_ex, val_ex, **kw):
        config = tiny_config(regime=regime, epochs=1, **kw)
        return run_regime(config, train_ex, val_ex, WORDS, ANSWERS, DC)

    def test_dt_with_full_fraction_skips_augmentation(self):
        _, _, train_ex, val_ex = tiny_data(n_train=16, n_val=8)
        result = self.run("dt", train_ex, val_ex, set1_fraction=1.0)
        assert result.synthesized == 0 and result.dropped == 0
        phases = {r["phase"] for r in result.records}
        assert phases == {"main"}

    def test_baseline_uses_disjoint_models(self):
        _, _, train_ex, val_ex = tiny_data(n_train=16, n_val=8)
        result = self.run("baseline", train_ex, val_ex)
        assert result.model.separate
        assert any(k.startswith("fusion_vqa.") for k in result.model.params)

    def test_vqg_regimes_train_augmenter_then_final(self):
        _, _, train_ex, val_ex = tiny_data(n_train=20, n_val=8)
        result = self.run("vqg_dt", train_ex, val_ex, set1_fraction=0.5)
        phases = [r["phase"] for r in result.records]
        assert "augmenter" in phases and "main" in phases
        assert result.synthesized + result.dropped == 10

    def test_vqg_dt_ft_has_pretrain_and_finetune_phases(self):
        _, _, train_ex, val_ex = tiny_data(n_train=20, n_val=8)
        result = self.run("vqg_dt_ft", train_ex, val_ex, set1_fraction=0.5)
        phases = [r["phase"] for r in result.records]
        assert "pretrain" in phases and "finetune" in phases
        assert not result.model.separate

    def test_seed_changes_shuffle_order_but_not_schema(self):
        _, _, train_ex, val_ex = tiny_data(n_train=16, n_val=8)
        a = self.run("dt", train_ex, val_ex, seed=0)
        b = self.run("dt", train_ex, val_ex, seed=1)
        c = self.run("dt", train_ex, val_ex, seed=0)
        ja, jb, jc = (records_to_jsonl(r.records) for r in (a, b, c))
        assert ja == jc
        assert ja != jb
