"""Evaluation metrics: top-k answer accuracy and smoothed sentence BLEU.

BLEU is the sentence-level geometric mean of modified 1..4-gram precisions
with brevity penalty. Zero-match orders are smoothed with the decaying
pseudo-count scheme: the j-th zero order receives numerator
1 / (2^j * k / ln(hyp_len)) over its original denominator (k = 5), applied
only when the hypothesis has more than one token.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


def acc_at_k(scores, truth: int, k: int) -> int:
    """1 iff `truth` is among the k highest scores; ties rank lower ids first."""
    n = len(scores)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} classes")
    if not 0 <= truth < n:
        raise IndexError(f"truth {truth} out of range for {n} classes")
    s_t = scores[truth]
    rank = sum(
        1 for c in range(n) if scores[c] > s_t or (scores[c] == s_t and c < truth)
    )
    return 1 if rank < k else 0


def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_bleu(
    hypothesis: Sequence, reference: Sequence, max_n: int = 4, smooth_k: float = 5.0
) -> float:
    """Smoothed sentence BLEU of one hypothesis against one reference."""
    if len(reference) == 0:
        raise ValueError("reference must be nonempty")
    hyp_len = len(hypothesis)
    if hyp_len == 0:
        return 0.0

    fractions = []
    for n in range(1, max_n + 1):
        hyp_counts = _ngram_counts(hypothesis, n)
        ref_counts = _ngram_counts(reference, n)
        num = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        den = max(1, sum(hyp_counts.values()))
        fractions.append((num, den))

    if fractions[0][0] == 0:
        return 0.0  # no unigram matches at all

    precisions = []
    j = 0
    for num, den in fractions:
        if num == 0 and hyp_len > 1:
            j += 1
            precisions.append((1.0 / (2**j * smooth_k / math.log(hyp_len))) / den)
        else:
            precisions.append(num / den)
    if any(p == 0.0 for p in precisions):
        return 0.0  # unsmoothable (single-token hypothesis with a zero order)

    brevity = 1.0 if hyp_len > len(reference) else math.exp(1.0 - len(reference) / hyp_len)
    return brevity * math.exp(math.fsum(math.log(p) / max_n for p in precisions))


def mean_sentence_bleu(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    """Unweighted mean of sentence BLEU over (hypothesis, reference) pairs."""
    if not pairs:
        raise ValueError("need at least one pair")
    return sum(sentence_bleu(h, r) for h, r in pairs) / len(pairs)


@dataclass
class EvalReport:
    acc_at_1: float
    acc_at_5: float
    bleu: float
    n_examples: int

    def __post_init__(self):
        if self.n_examples < 1:
            raise ValueError("n_examples must be >= 1")
        for name in ("acc_at_1", "acc_at_5", "bleu"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name}={val} outside [0, 1]")

    def as_dict(self) -> dict:
        return {
            "acc1": self.acc_at_1,
            "acc5": self.acc_at_5,
            "bleu": self.bleu,
            "n_examples": self.n_examples,
        }

    def as_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())
