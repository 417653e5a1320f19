"""Loss fixtures: smooth-L1 knot values, uniform cross entropy, rigged
sequence NLL, and the weighted-total bookkeeping."""

import math

import numpy as np
import pytest

from dualvqa.linalg import ShapeError
from dualvqa.objectives import (
    ExampleOutputs,
    LossWeights,
    smooth_l1,
    total_loss,
    vqa_classification_loss,
    vqg_sequence_loss,
)


class TestSmoothL1:
    def test_fixtures(self):
        assert smooth_l1(np.array([0.0, 0.0])) == 0.0
        assert smooth_l1(np.array([0.5])) == pytest.approx(0.125, abs=1e-12)
        assert smooth_l1(np.array([2.0])) == pytest.approx(1.5, abs=1e-12)

    def test_continuous_at_knot(self):
        quadratic = 0.5 * 1.0**2
        linear = abs(1.0) - 0.5
        assert quadratic == pytest.approx(linear, abs=1e-15)
        eps = 1e-9
        assert smooth_l1(np.array([1.0 - eps])) == pytest.approx(
            smooth_l1(np.array([1.0 + eps])), abs=1e-8
        )

    def test_first_derivative_continuous_at_knot(self):
        h = 1e-6

        def slope(x):
            return (smooth_l1(np.array([x + h])) - smooth_l1(np.array([x - h]))) / (2 * h)

        assert slope(1.0 - 1e-4) == pytest.approx(slope(1.0 + 1e-4), abs=1e-3)
        assert slope(1.0) == pytest.approx(1.0, abs=1e-6)

    def test_nonnegative_and_zero_iff_zero(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            x = rng.standard_normal(4)
            val = smooth_l1(x)
            assert val >= 0.0
            assert (val == 0.0) == bool(np.all(x == 0.0))

    def test_mean_reduction(self):
        assert smooth_l1(np.array([0.5, 2.0])) == pytest.approx((0.125 + 1.5) / 2)


class TestClassificationLoss:
    def test_uniform_scores_give_log_n(self):
        assert vqa_classification_loss(np.zeros(4), 2) == pytest.approx(math.log(4), abs=1e-12)

    def test_confident_correct_approaches_zero(self):
        scores = np.zeros(5)
        scores[3] = 200.0
        assert vqa_classification_loss(scores, 3) < 1e-12

    def test_matches_log_sum_exp_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            scores = rng.standard_normal(7)
            target = int(rng.integers(7))
            lse = math.log(sum(math.exp(s) for s in scores))
            np.testing.assert_allclose(
                vqa_classification_loss(scores, target), lse - scores[target], atol=1e-10
            )

    def test_strictly_decreasing_in_target_score(self):
        scores = np.array([0.1, -0.4, 0.7])
        base = vqa_classification_loss(scores, 1)
        scores[1] += 0.5
        assert vqa_classification_loss(scores, 1) < base

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            vqa_classification_loss(np.zeros(3), 3)


class TestSequenceLoss:
    def test_single_uniform_step(self):
        assert vqg_sequence_loss([np.zeros(8)], [5]) == pytest.approx(math.log(8), abs=1e-12)

    def test_perfect_model_limit(self):
        step = np.zeros(6)
        step[2] = 500.0
        assert vqg_sequence_loss([step], [2]) < 1e-12

    def test_two_step_rigged_mean(self):
        s1 = np.array([1.0, 0.0, 0.0])
        s2 = np.array([0.0, 2.0, 0.0])
        nll1 = math.log(math.exp(1) + 2) - 1.0
        nll2 = math.log(math.exp(2) + 2) - 0.0  # target 0 under s2
        expected = (nll1 + nll2) / 2
        assert vqg_sequence_loss([s1, s2], [0, 0]) == pytest.approx(expected, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            vqg_sequence_loss([np.zeros(3)], [1, 2])


class TestTotalLoss:
    def rigged_outputs(self, rng, q_res=0.0, a_res=0.0):
        q = rng.standard_normal(4)
        a = rng.standard_normal(3)
        return ExampleOutputs(
            vqa_scores=rng.standard_normal(5),
            vqg_step_scores=[rng.standard_normal(6) for _ in range(3)],
            question_feature=q,
            question_feature_pred=q - q_res,
            answer_feature=a,
            answer_feature_pred=a - a_res,
        )

    def test_zero_residuals_reduce_to_unary_sum(self):
        rng = np.random.default_rng(2)
        outputs = self.rigged_outputs(rng)
        breakdown = total_loss(outputs, 1, [2, 0, 4])
        assert breakdown.q_duality == 0.0
        assert breakdown.a_duality == 0.0
        assert breakdown.total == pytest.approx(breakdown.vqa_loss + breakdown.vqg_loss, abs=1e-12)

    def test_zero_duality_weights_drop_regularizers(self):
        rng = np.random.default_rng(3)
        outputs = self.rigged_outputs(rng, q_res=0.4, a_res=0.2)
        weights = LossWeights(q_duality=0.0, a_duality=0.0)
        breakdown = total_loss(outputs, 1, [2, 0, 4], weights)
        assert breakdown.q_duality > 0.0  # the term is still reported
        assert breakdown.total == pytest.approx(breakdown.vqa_loss + breakdown.vqg_loss, abs=1e-12)

    def test_total_is_weighted_sum_of_recomputed_terms(self):
        rng = np.random.default_rng(4)
        outputs = self.rigged_outputs(rng, q_res=0.3, a_res=0.7)
        weights = LossWeights(vqa=0.5, vqg=2.0, q_duality=1.5, a_duality=0.25)
        targets = [2, 0, 4]
        breakdown = total_loss(outputs, 3, targets, weights)
        # recompute every term independently
        vqa = vqa_classification_loss(outputs.vqa_scores, 3)
        vqg = vqg_sequence_loss(outputs.vqg_step_scores, targets)
        qd = smooth_l1(outputs.question_feature - outputs.question_feature_pred)
        ad = smooth_l1(outputs.answer_feature - outputs.answer_feature_pred)
        assert breakdown.total == pytest.approx(
            0.5 * vqa + 2.0 * vqg + 1.5 * qd + 0.25 * ad, abs=1e-12
        )
        for term in (breakdown.vqa_loss, breakdown.vqg_loss, breakdown.q_duality, breakdown.a_duality):
            assert term >= 0.0

    def test_unit_weights_equal_plain_sum(self):
        rng = np.random.default_rng(5)
        outputs = self.rigged_outputs(rng, q_res=0.3, a_res=0.7)
        breakdown = total_loss(outputs, 0, [1, 2, 3])
        assert breakdown.total == pytest.approx(
            breakdown.vqa_loss + breakdown.vqg_loss + breakdown.q_duality + breakdown.a_duality,
            abs=1e-12,
        )
