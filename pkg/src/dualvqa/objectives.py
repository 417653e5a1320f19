"""Training loss terms: answer classification, teacher-forced question
generation, and the two smooth-L1 duality penalties tying each direction's
predicted feature to the encoded one.

These are the plain-array versions used for reporting and as oracles; the
trainer differentiates the same math through the tape ops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import ShapeError


def smooth_l1(x: np.ndarray) -> float:
    """Mean over coordinates of 0.5*x^2 if |x| < 1 else |x| - 0.5."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return float(np.where(ax < 1.0, 0.5 * x * x, ax - 0.5).mean())


def log_softmax(scores: np.ndarray) -> np.ndarray:
    m = scores.max()
    return scores - (m + np.log(np.exp(scores - m).sum()))


def vqa_classification_loss(scores: np.ndarray, target: int) -> float:
    """Negative log softmax probability of the target answer class."""
    if not 0 <= target < scores.shape[0]:
        raise IndexError(f"target {target} out of range for {scores.shape[0]} classes")
    return float(-log_softmax(scores)[target])


def vqg_sequence_loss(step_scores: Sequence[np.ndarray], target_ids: Sequence[int]) -> float:
    """Mean per-token negative log-likelihood under teacher forcing.

    `step_scores[i]` are the vocabulary logits produced with the ground-truth
    prefix `target_ids[:i]`; `target_ids` ends with <end>.
    """
    if len(step_scores) != len(target_ids):
        raise ShapeError(
            f"{len(step_scores)} score steps for {len(target_ids)} target tokens"
        )
    total = 0.0
    for scores, tid in zip(step_scores, target_ids):
        total += -log_softmax(np.asarray(scores, dtype=np.float64))[tid]
    return float(total / len(target_ids))


@dataclass(frozen=True)
class LossWeights:
    vqa: float = 1.0
    vqg: float = 1.0
    q_duality: float = 1.0
    a_duality: float = 1.0


@dataclass
class LossBreakdown:
    vqa_loss: float
    vqg_loss: float
    q_duality: float
    a_duality: float
    weights: LossWeights
    total: float

    def as_dict(self) -> dict:
        return {
            "loss_vqa": self.vqa_loss,
            "loss_vqg": self.vqg_loss,
            "loss_q_duality": self.q_duality,
            "loss_a_duality": self.a_duality,
            "loss_total": self.total,
        }


@dataclass
class ExampleOutputs:
    """Per-example forward results the loss is computed from.

    Feature pairs follow the trained configuration: when the output lift is
    skipped they live in fusion space (projected question feature vs the
    swap-inferred one, answer embedding vs the fused answer feature).
    """

    vqa_scores: np.ndarray
    vqg_step_scores: Sequence[np.ndarray]
    question_feature: np.ndarray
    question_feature_pred: np.ndarray
    answer_feature: np.ndarray
    answer_feature_pred: np.ndarray


def total_loss(
    outputs: ExampleOutputs,
    answer_id: int,
    question_target_ids: Sequence[int],
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Weighted sum of the four loss terms (all weights default to 1)."""
    vqa = vqa_classification_loss(outputs.vqa_scores, answer_id)
    vqg = vqg_sequence_loss(outputs.vqg_step_scores, question_target_ids)
    q_dual = smooth_l1(outputs.question_feature - outputs.question_feature_pred)
    a_dual = smooth_l1(outputs.answer_feature - outputs.answer_feature_pred)
    total = (
        weights.vqa * vqa
        + weights.vqg * vqg
        + weights.q_duality * q_dual
        + weights.a_duality * a_dual
    )
    return LossBreakdown(vqa, vqg, q_dual, a_dual, weights, total)
