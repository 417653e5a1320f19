"""Question/answer encoding and decoding.

Two sharing schemes live here:
  * the answer lookup table doubles as the answer classifier (one array,
    read as rows to embed and as a matrix to score), and
  * one gated recurrent cell drives both the question encoder and the
    question decoder.

The recurrent cell is a single-layer update/reset-gated cell with a tanh
candidate. Decoding seeds the hidden state from the predicted question
feature (through a small lift when the feature lives in fusion space) and
runs greedy or beam search over token log-probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .fusion import uniform_init
from .linalg import ShapeError

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")


class Vocabulary:
    """Bijective token <-> id map, optionally with the four reserved tokens
    (<pad>, <start>, <end>, <unk>) pinned to ids 0..3."""

    def __init__(self, tokens: Sequence[str], reserved: bool = True):
        items = list(RESERVED_TOKENS) if reserved else []
        for tok in tokens:
            if tok in items:
                if tok in RESERVED_TOKENS and reserved:
                    continue
                raise ValueError(f"duplicate token {tok!r}")
            items.append(tok)
        self.reserved = reserved
        self._tokens = items
        self._ids = {tok: i for i, tok in enumerate(items)}

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, tok: str):
        return tok in self._ids

    def id_of(self, tok: str) -> int:
        if tok in self._ids:
            return self._ids[tok]
        if self.reserved:
            return UNK
        raise KeyError(f"unknown token {tok!r}")

    def token_of(self, i: int) -> str:
        return self._tokens[i]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self._tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, reserved: bool = True) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if reserved:
            if tuple(lines[:4]) != RESERVED_TOKENS:
                raise ValueError(f"{path}: reserved token header missing or reordered")
            lines = lines[4:]
        return cls(lines, reserved=reserved)


# ---------------------------------------------------------------------------
# Answer table (embedding and classifier are two views of one array)
# ---------------------------------------------------------------------------


@dataclass
class AnswerTable:
    table: np.ndarray  # (n_answers, feat_dim)


def embed_answer(answer_id: int, table: AnswerTable) -> np.ndarray:
    if not 0 <= answer_id < table.table.shape[0]:
        raise IndexError(f"answer id {answer_id} out of range")
    return table.table[answer_id]


def classify_answer(feature: np.ndarray, table: AnswerTable) -> np.ndarray:
    if feature.shape != (table.table.shape[1],):
        raise ShapeError(
            f"classify: feature has shape {feature.shape}, table rows are {table.table.shape[1]}-dim"
        )
    return table.table @ feature


# ---------------------------------------------------------------------------
# Recurrent cell
# ---------------------------------------------------------------------------

CELL_GATES = ("update", "reset", "cand")


@dataclass
class RecurrentParams:
    """Word embeddings plus one gated cell, shared by encoder and decoder.

    `h0_lift` maps a predicted question feature into the initial decoder
    hidden state; None means the feature is used as the hidden state
    directly (it must then already have the hidden dim).
    """

    embed: np.ndarray  # (|W|, d_w)
    w_update: np.ndarray  # (d_h, d_w)
    u_update: np.ndarray  # (d_h, d_h)
    b_update: np.ndarray  # (d_h,)
    w_reset: np.ndarray
    u_reset: np.ndarray
    b_reset: np.ndarray
    w_cand: np.ndarray
    u_cand: np.ndarray
    b_cand: np.ndarray
    out_w: np.ndarray  # (|W|, d_h)
    out_b: np.ndarray  # (|W|,)
    h0_lift: np.ndarray | None = None  # (d_h, feat_dim)

    @property
    def hidden_dim(self) -> int:
        return self.u_update.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]


def init_recurrent_params(
    vocab_size: int,
    embed_dim: int,
    hidden_dim: int,
    rng: np.random.Generator,
    feature_dim: int | None = None,
) -> RecurrentParams:
    def gate():
        return (
            uniform_init(rng, (hidden_dim, embed_dim)),
            uniform_init(rng, (hidden_dim, hidden_dim)),
            np.zeros(hidden_dim),
        )

    wz, uz, bz = gate()
    wr, ur, br = gate()
    wc, uc, bc = gate()
    lift = None
    if feature_dim is not None:
        lift = uniform_init(rng, (hidden_dim, feature_dim))
    return RecurrentParams(
        embed=uniform_init(rng, (vocab_size, embed_dim)),
        w_update=wz, u_update=uz, b_update=bz,
        w_reset=wr, u_reset=ur, b_reset=br,
        w_cand=wc, u_cand=uc, b_cand=bc,
        out_w=uniform_init(rng, (vocab_size, hidden_dim)),
        out_b=np.zeros(vocab_size),
        h0_lift=lift,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def cell_step(params: RecurrentParams, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """One recurrence: h' = (1-z)*c + z*h with update gate z, reset gate r."""
    z = _sigmoid(params.w_update @ x + params.u_update @ h + params.b_update)
    r = _sigmoid(params.w_reset @ x + params.u_reset @ h + params.b_reset)
    c = np.tanh(params.w_cand @ x + params.u_cand @ (r * h) + params.b_cand)
    return (1.0 - z) * c + z * h


def encode_question(token_ids: Sequence[int], params: RecurrentParams) -> np.ndarray:
    """Final hidden state after consuming the embedded tokens left to right."""
    if len(token_ids) == 0:
        raise ValueError("cannot encode an empty token sequence")
    h = np.zeros(params.hidden_dim)
    for tid in token_ids:
        if not 0 <= tid < params.vocab_size:
            raise IndexError(f"token id {tid} out of range")
        h = cell_step(params, params.embed[tid], h)
    return h


def initial_hidden(feature: np.ndarray, params: RecurrentParams) -> np.ndarray:
    if params.h0_lift is not None:
        return params.h0_lift @ feature
    if feature.shape != (params.hidden_dim,):
        raise ShapeError(
            f"feature of shape {feature.shape} cannot seed a {params.hidden_dim}-dim hidden state"
        )
    return np.asarray(feature, dtype=np.float64)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max()
    return logits - (m + np.log(np.exp(logits - m).sum()))


def recurrent_step_fn(params: RecurrentParams) -> Callable:
    """step(prev_token_id, h) -> (log-probs over the vocab, next hidden)."""

    def step(prev_id: int, h: np.ndarray):
        h2 = cell_step(params, params.embed[prev_id], h)
        return _log_softmax(params.out_w @ h2 + params.out_b), h2

    return step


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------
#
# Candidate ordering, used both for beam pruning and for the final pick:
# higher total log-probability first, then earlier completion (fewer content
# tokens), then token-id-lexicographic order. Token lists returned to callers
# never include <start> or <end>.


def _key(score: float, tokens: tuple[int, ...]):
    return (-score, len(tokens), tokens)


def _greedy_from_step(step, h0: np.ndarray, max_len: int) -> tuple[float, tuple[int, ...]]:
    score = 0.0
    tokens: list[int] = []
    h = h0
    prev = START
    for _ in range(max_len):
        logp, h = step(prev, h)
        tok = int(np.argmax(logp))
        score += float(logp[tok])
        if tok == END:
            break
        tokens.append(tok)
        prev = tok
    return score, tuple(tokens)


def decode_greedy(feature: np.ndarray, params: RecurrentParams, max_len: int) -> list[int]:
    """Argmax decoding from <start>, stopping at <end> or max_len."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    step = recurrent_step_fn(params)
    _, tokens = _greedy_from_step(step, initial_hidden(feature, params), max_len)
    return list(tokens)


def beam_from_step(
    step,
    h0,
    beam_width: int,
    max_len: int,
    length_normalize: bool = False,
) -> tuple[float, tuple[int, ...]]:
    """Beam search over cumulative log-probability, driven by a step function.

    Finished hypotheses stay in the beam as frozen entries; hypotheses still
    open at max_len are force-finished at their current score. For widths > 1
    the greedy rollout always joins the final pick, so the result can never
    score below greedy's. Returns (score, content tokens).
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")

    # (score, tokens, state or None when finished)
    beams = [(0.0, (), h0)]
    for _ in range(max_len):
        if all(state is None for _, _, state in beams):
            break
        candidates = []
        for score, tokens, state in beams:
            if state is None:
                candidates.append((score, tokens, None))
                continue
            prev = tokens[-1] if tokens else START
            logp, new_state = step(prev, state)
            for tok in range(logp.shape[0]):
                s = score + float(logp[tok])
                if tok == END:
                    candidates.append((s, tokens, None))
                else:
                    candidates.append((s, tokens + (tok,), new_state))
        candidates.sort(key=lambda c: _key(c[0], c[1]))
        beams = candidates[:beam_width]

    finished = [(score, tokens) for score, tokens, _ in beams]
    if beam_width > 1:
        finished.append(_greedy_from_step(step, h0, max_len))
    if length_normalize:
        finished = [(s / max(1, len(t) + 1), t) for s, t in finished]
    return min(finished, key=lambda c: _key(c[0], c[1]))


def decode_beam(
    feature: np.ndarray,
    params: RecurrentParams,
    beam_width: int,
    max_len: int,
    length_normalize: bool = False,
) -> list[int]:
    """Beam-decoded content tokens for a predicted question feature."""
    step = recurrent_step_fn(params)
    h0 = initial_hidden(feature, params)
    _, tokens = beam_from_step(step, h0, beam_width, max_len, length_normalize)
    return list(tokens)
