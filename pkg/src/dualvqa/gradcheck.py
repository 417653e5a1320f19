"""Finite-difference verification.

Covers every tape operation on random inputs of its supported shapes, plus
the full training loss on a one-example batch under each ablation
configuration (and the optional backend/lift variants). Used by the test
suite and by the `gradcheck` CLI subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .data import DataConfig, generate_dataset, build_answer_vocab, build_word_vocab
from .model import Model, batch_loss, forward_outputs
from .training import prepare_examples

THRESHOLD = 1e-5
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool


class _LazyGrads:
    """Dict-like gradients that run backward only if actually read.

    The checker reads analytic gradients from its first call only; perturbed
    evaluations need just the loss, so their backward sweep never happens.
    """

    def __init__(self, materialize: Callable[[], dict]):
        self._materialize = materialize
        self._grads: dict | None = None

    def __getitem__(self, name):
        if self._grads is None:
            self._grads = self._materialize()
        return self._grads[name]


def _tape_fn(build: Callable) -> Callable:
    """Lift `build(leaves) -> scalar node` into an f(params) for the checker."""

    def f(params):
        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        loss = build(leaves)

        def materialize():
            tape.backward(loss)
            return {k: node.grad for k, node in leaves.items()}

        return float(loss.value), _LazyGrads(materialize)

    return f


def _away_from_knots(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Nudge entries whose |value| sits within `margin` of 1 (smooth-L1 knots)."""
    bad = np.abs(np.abs(x) - 1.0) < margin
    return np.where(bad, x + 0.1, x)


def op_checks(seed: int = 0) -> list[tuple[str, dict, Callable]]:
    """(name, params, f) triples exercising each tape operation."""
    rng = np.random.default_rng(seed)
    v3 = lambda: rng.standard_normal(3)
    checks: list[tuple[str, dict, Callable]] = []

    def case(name, params, build):
        checks.append((name, params, _tape_fn(build)))

    case("add", {"a": v3(), "b": v3()},
         lambda l: ad.sum_all(ad.add(l["a"], l["b"])))
    case("sub", {"a": v3(), "b": v3()},
         lambda l: ad.sum_all(ad.mul(ad.sub(l["a"], l["b"]), ad.sub(l["a"], l["b"]))))
    case("mul", {"a": v3(), "b": v3()},
         lambda l: ad.sum_all(ad.mul(l["a"], l["b"])))
    case("scale", {"a": v3()}, lambda l: ad.sum_all(ad.scale(l["a"], 2.5)))
    case("complement", {"a": v3()},
         lambda l: ad.sum_all(ad.mul(ad.complement(l["a"]), l["a"])))
    case("matvec", {"m": rng.standard_normal((4, 3)), "x": v3()},
         lambda l: ad.sum_all(ad.matvec(l["m"], l["x"])))
    case("vecmat", {"m": rng.standard_normal((3, 4)), "x": v3()},
         lambda l: ad.sum_all(ad.vecmat(l["x"], l["m"])))
    case("matmul_nt", {"a": rng.standard_normal((5, 3)), "b": rng.standard_normal((4, 3))},
         lambda l: ad.mean_all(ad.matmul_nt(l["a"], l["b"])))
    case("dot", {"u": v3(), "v": v3()}, lambda l: ad.dot(l["u"], l["v"]))
    case("scalar_mul", {"s": np.array(0.7), "x": v3()},
         lambda l: ad.sum_all(ad.scalar_mul(l["s"], l["x"])))
    case("sum_all", {"x": rng.standard_normal((3, 2))},
         lambda l: ad.sum_all(ad.mul(l["x"], l["x"])))
    case("mean_all", {"x": rng.standard_normal((3, 2))}, lambda l: ad.mean_all(l["x"]))
    case("stack", {"x": v3(), "y": v3()},
         lambda l: ad.sum_all(ad.stack([ad.dot(l["x"], l["y"]),
                                        ad.mean_all(l["x"]),
                                        ad.sum_all(l["y"])])))
    case("row_lookup", {"m": rng.standard_normal((4, 3))},
         lambda l: ad.sum_all(ad.mul(ad.row_lookup(l["m"], 1), ad.row_lookup(l["m"], 2))))
    case("tanh", {"x": v3()}, lambda l: ad.sum_all(ad.tanh(l["x"])))
    case("sigmoid", {"x": v3()}, lambda l: ad.sum_all(ad.sigmoid(l["x"])))
    case("softmax", {"x": rng.standard_normal(5)},
         lambda l: ad.sum_all(ad.mul(ad.softmax(l["x"]), l["x"])))
    case("cross_entropy_logits", {"x": rng.standard_normal(6)},
         lambda l: ad.cross_entropy_logits(l["x"], 2))
    case("smooth_l1", {"x": _away_from_knots(rng.uniform(-2.0, 2.0, size=6))},
         lambda l: ad.smooth_l1(l["x"]))
    case("full_bilinear3",
         {"t": rng.standard_normal((3, 4, 2)), "q": v3(), "v": rng.standard_normal(4)},
         lambda l: ad.sum_all(ad.full_bilinear3(l["t"], l["q"], l["v"])))
    case("fusion_chain",
         {"m": rng.standard_normal((3, 3)), "n": rng.standard_normal((4, 3)),
          "q": v3(), "v": rng.standard_normal(4)},
         lambda l: ad.sum_all(ad.mul(ad.vecmat(l["q"], l["m"]), ad.vecmat(l["v"], l["n"]))))
    case("linear", {"w": rng.standard_normal((4, 3)), "x": v3(), "b": rng.standard_normal(4)},
         lambda l: ad.sum_all(ad.tanh(ad.linear(l["w"], l["x"], l["b"]))))
    case("affine_pair",
         {"w": rng.standard_normal((4, 3)), "x": v3(),
          "u": rng.standard_normal((4, 4)), "h": rng.standard_normal(4),
          "b": rng.standard_normal(4)},
         lambda l: ad.sum_all(ad.sigmoid(ad.affine_pair(l["w"], l["x"], l["u"], l["h"], l["b"]))))

    # batched (row-per-example) operations
    case("rows_lookup", {"m": rng.standard_normal((5, 3))},
         lambda l: ad.sum_all(ad.mul(ad.rows_lookup(l["m"], [0, 2, 2]),
                                     ad.rows_lookup(l["m"], [1, 3, 4]))))
    case("affine_rows",
         {"w": rng.standard_normal((4, 3)), "x": rng.standard_normal((2, 3)),
          "u": rng.standard_normal((4, 4)), "h": rng.standard_normal((2, 4)),
          "b": rng.standard_normal(4)},
         lambda l: ad.sum_all(ad.tanh(ad.affine_rows(l["w"], l["x"], l["u"], l["h"], l["b"]))))
    case("linear_rows",
         {"w": rng.standard_normal((5, 4)), "x": rng.standard_normal((3, 4)),
          "b": rng.standard_normal(5)},
         lambda l: ad.mean_all(ad.sigmoid(ad.linear_rows(l["w"], l["x"], l["b"]))))
    case("rows_mat", {"x": rng.standard_normal((3, 4)), "m": rng.standard_normal((4, 2))},
         lambda l: ad.sum_all(ad.mul(ad.rows_mat(l["x"], l["m"]), ad.rows_mat(l["x"], l["m"]))))
    case("softmax_rows", {"x": rng.standard_normal((3, 5))},
         lambda l: ad.sum_all(ad.mul(ad.softmax_rows(l["x"]), l["x"])))
    case("cross_entropy_rows_mean", {"x": rng.standard_normal((3, 6))},
         lambda l: ad.cross_entropy_rows_mean(l["x"], [2, 0, 5]))
    case("cells_proj", {"g": rng.standard_normal((2, 4, 3)), "w": rng.standard_normal((5, 3))},
         lambda l: ad.sum_all(ad.tanh(ad.cells_proj(l["g"], l["w"]))))
    case("contract_last", {"p": rng.standard_normal((2, 4, 3)), "w": v3()},
         lambda l: ad.sum_all(ad.mul(ad.contract_last(l["p"], l["w"]),
                                     ad.contract_last(l["p"], l["w"]))))
    case("mul_col", {"s": rng.standard_normal(3), "x": rng.standard_normal((3, 4))},
         lambda l: ad.sum_all(ad.tanh(ad.mul_col(l["s"], l["x"]))))
    case("pool_cells", {"w": rng.standard_normal((2, 4)), "g": rng.standard_normal((2, 4, 3))},
         lambda l: ad.sum_all(ad.mul(ad.pool_cells(l["w"], l["g"]), ad.pool_cells(l["w"], l["g"]))))
    return checks


# ---------------------------------------------------------------------------
# End-to-end loss checks per ablation configuration
# ---------------------------------------------------------------------------

# (Dual fusion kernel, duality penalty, codec sharing) grid plus the baseline
# row with fully disjoint models; attention sharing stays at its default
# except in the fully-shared row which exercises it explicitly.
ABLATION_ROWS: list[tuple[str, dict, bool]] = [
    ("row1_separate_baseline",
     dict(dual_mutan=False, duality_regularizer=False, share_codec=False,
          share_attention=False), True),
    ("row2_dual_fusion",
     dict(dual_mutan=True, duality_regularizer=False, share_codec=False,
          share_attention=True), False),
    ("row3_dual_fusion_shared_codec",
     dict(dual_mutan=True, duality_regularizer=False, share_codec=True,
          share_attention=True), False),
    ("row4_dual_fusion_duality",
     dict(dual_mutan=True, duality_regularizer=True, share_codec=False,
          share_attention=True), False),
    ("row5_full",
     dict(dual_mutan=True, duality_regularizer=True, share_codec=True,
          share_attention=True), False),
]

EXTRA_MODES: list[tuple[str, dict, bool]] = [
    ("mlb_backend", dict(fusion_backend="mlb", t=3, t_v=3), False),
    ("output_lift_active", dict(skip_output_lift=False), False),
    ("projection_tanh", dict(projection_tanh=True), False),
]


def _tiny_config(**overrides) -> TrainConfig:
    base = dict(
        d_q=4, d_v=16, d_a=4, t=3, t_v=3, rank=2, d_w=3,
        batch_size=1, epochs=1, seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _loss_fn(config: TrainConfig, separate: bool, seed: int):
    """f(params) for the full one-example loss, plus the initial params."""
    dc = DataConfig(grid_size=2, min_objects=1, max_objects=2, sigma=0.1)
    word_vocab = build_word_vocab()
    answer_vocab = build_answer_vocab()
    examples, _ = generate_dataset(1, 0, dc, seed=seed)
    item = prepare_examples(examples, word_vocab, answer_vocab, dc)[0]
    rng = np.random.default_rng(seed)
    model = Model.init(config, len(word_vocab), len(answer_vocab), rng, separate=separate)

    def f(params):
        model.params = params
        graph, loss, _ = batch_loss(
            model, [(item.grid, item.question_ids, item.answer_id)]
        )

        def materialize():
            graph.tape.backward(loss)
            grads = graph.grads()
            for name, arr in params.items():
                grads.setdefault(name, np.zeros_like(arr))
            return grads

        return float(loss.value), _LazyGrads(materialize)

    return f, model.params, model, item


def _duality_residuals_clear(model: Model, item, margin: float = 1e-3) -> bool:
    """Smooth-L1 inputs must sit away from the |x| = 1 kinks for FD to apply."""
    outputs, _ = forward_outputs(model, item.grid, item.question_ids, item.answer_id)
    for pair in (
        outputs.question_feature - outputs.question_feature_pred,
        outputs.answer_feature - outputs.answer_feature_pred,
    ):
        if np.any(np.abs(np.abs(pair) - 1.0) < margin):
            return False
    return True


def end_to_end_checks(base_seed: int = 0) -> list[tuple[str, dict, Callable]]:
    checks = []
    for name, overrides, separate in ABLATION_ROWS + EXTRA_MODES:
        config = _tiny_config(**overrides)
        for seed in range(base_seed, base_seed + 25):
            f, params, model, item = _loss_fn(config, separate, seed)
            if not config.duality_regularizer or _duality_residuals_clear(model, item):
                break
        else:
            raise RuntimeError(f"no knot-free seed found for {name}")
        checks.append((f"loss_{name}", params, f))
    return checks


def run_suite(step: float = STEP, threshold: float = THRESHOLD, seed: int = 0) -> list[CheckResult]:
    results = []
    for name, params, f in op_checks(seed) + end_to_end_checks(seed):
        err = ad.finite_difference_check(f, params, step=step)
        results.append(CheckResult(name=name, error=err, passed=err < threshold))
    return results
