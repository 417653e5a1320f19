"""Optimization and experiment regimes.

One training loop covers every regime; regimes differ in which examples they
see and whether the model is the shared (dual) form or two disjoint
single-task models. Per-epoch validation reports drive best-epoch selection.
All randomness (init draws, shuffles) flows from one generator seeded by the
config, so a (config, seed, data) triple pins the run bit-for-bit.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import objectives
from .checkpoint import load_checkpoint, save_checkpoint
from .codec import Vocabulary
from .config import TrainConfig
from .data import DataConfig, QAExample, SplitSpec, render_grid, split_for_augmentation
from .metrics import EvalReport, acc_at_k, sentence_bleu
from .model import Model, batch_loss, forward_outputs, generate_question_ids


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected update, in place on `params`."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# Example preparation and evaluation
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    grid: np.ndarray
    question_ids: list[int]
    answer_id: int
    question_tokens: list[str]


def prepare_examples(
    examples: Sequence[QAExample],
    word_vocab: Vocabulary,
    answer_vocab: Vocabulary,
    data_config: DataConfig,
) -> list[Prepared]:
    prepared = []
    for ex in examples:
        if ex.question is None:
            raise ValueError(f"{ex.image_id}: cannot train/evaluate on an answer-only record")
        prepared.append(
            Prepared(
                grid=render_grid(ex.scene, data_config),
                question_ids=word_vocab.encode(ex.question),
                answer_id=answer_vocab.id_of(ex.answer),
                question_tokens=list(ex.question),
            )
        )
    return prepared


def _eval_one(model: Model, word_vocab: Vocabulary, beam_width: int, item: Prepared) -> dict:
    outputs, targets = forward_outputs(model, item.grid, item.question_ids, item.answer_id)
    breakdown = objectives.total_loss(
        outputs, item.answer_id, targets, model.config.weights
    )
    k5 = min(5, outputs.vqa_scores.shape[0])
    hyp_ids = generate_question_ids(model, item.grid, item.answer_id, beam_width)
    hyp = word_vocab.decode(hyp_ids)
    return {
        "acc1": acc_at_k(outputs.vqa_scores, item.answer_id, 1),
        "acc5": acc_at_k(outputs.vqa_scores, item.answer_id, k5),
        "bleu": sentence_bleu(hyp, item.question_tokens),
        **breakdown.as_dict(),
    }


def evaluate(
    model: Model,
    items: Sequence[Prepared],
    word_vocab: Vocabulary,
    beam_width: int | None = None,
    threads: int = 1,
) -> tuple[EvalReport, dict]:
    """EvalReport plus mean loss terms over the items (read-only, parallelizable)."""
    if not items:
        raise ValueError("cannot evaluate on an empty set")
    width = model.config.beam_width if beam_width is None else beam_width

    def work(item):
        return _eval_one(model, word_vocab, width, item)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(work, items))
    else:
        rows = [work(item) for item in items]

    n = len(rows)
    mean = {k: float(sum(r[k] for r in rows)) / n for k in rows[0]}
    report = EvalReport(
        acc_at_1=mean.pop("acc1"),
        acc_at_5=mean.pop("acc5"),
        bleu=mean.pop("bleu"),
        n_examples=n,
    )
    return report, mean


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model  # holds the best-epoch parameters on return
    best_epoch: int
    best_report: EvalReport
    records: list[dict]
    adam: AdamState
    rng: np.random.Generator


def _record(phase: str, epoch: int, split: str, metrics: dict) -> dict:
    base = {
        "phase": phase,
        "epoch": epoch,
        "split": split,
        "acc1": None,
        "acc5": None,
        "bleu": None,
        "loss_vqa": None,
        "loss_vqg": None,
        "loss_q_duality": None,
        "loss_a_duality": None,
        "loss_total": None,
    }
    base.update(metrics)
    return base


def train(
    config: TrainConfig,
    train_items: Sequence[Prepared],
    val_items: Sequence[Prepared],
    word_vocab: Vocabulary,
    answer_vocab: Vocabulary,
    *,
    model: Model | None = None,
    separate: bool = False,
    epochs: int | None = None,
    rng: np.random.Generator | None = None,
    phase: str = "main",
    record_sink: Callable[[dict], None] | None = None,
    eval_beam_width: int = 1,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run the loop; returns the model restored to its best epoch.

    Validation during training decodes greedily (eval_beam_width=1) to keep
    epochs cheap; final reporting re-evaluates at the configured beam width.
    """
    if not train_items:
        raise ValueError("empty training set")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if model is None:
        model = Model.init(config, len(word_vocab), len(answer_vocab), rng, separate=separate)
    adam = AdamState()
    n_epochs = config.epochs if epochs is None else epochs
    records: list[dict] = []

    def emit(rec: dict):
        records.append(rec)
        if record_sink is not None:
            record_sink(rec)

    best_params = model.copy_params()
    best_epoch = 0
    best_acc = -1.0
    best_report: EvalReport | None = None

    def run_eval(epoch: int):
        nonlocal best_params, best_epoch, best_acc, best_report
        report, losses = evaluate(
            model, val_items, word_vocab,
            beam_width=eval_beam_width, threads=config.eval_threads,
        )
        metrics = {k: v for k, v in report.as_dict().items() if k != "n_examples"}
        emit(_record(phase, epoch, "val", {**metrics, **losses}))
        if report.acc_at_1 > best_acc:
            best_acc = report.acc_at_1
            best_epoch = epoch
            best_report = report
            best_params = model.copy_params()
        return report

    if n_epochs == 0:
        run_eval(0)

    n = len(train_items)
    for epoch in range(1, n_epochs + 1):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        seen = 0
        for start in range(0, n, config.batch_size):
            batch_ids = order[start : start + config.batch_size]
            batch = [
                (train_items[i].grid, train_items[i].question_ids, train_items[i].answer_id)
                for i in batch_ids
            ]
            graph, loss_node, breakdown = batch_loss(model, batch)
            if not np.isfinite(loss_node.value):
                raise TrainingError(
                    f"non-finite loss in epoch {epoch}, batch starting at {start}"
                )
            graph.tape.backward(loss_node)
            adam_step(model.params, graph.grads(), adam, config.lr)
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
            seen += len(batch)
        train_losses = {k: v / seen for k, v in sums.items()}
        emit(_record(phase, epoch, "train", train_losses))
        report = run_eval(epoch)
        if log is not None:
            log(
                f"[{phase}] epoch {epoch}/{n_epochs} "
                f"loss={train_losses['loss_total']:.4f} "
                f"acc1={report.acc_at_1:.3f} bleu={report.bleu:.3f}"
            )

    model.load_params(best_params)
    assert best_report is not None
    return TrainResult(
        model=model,
        best_epoch=best_epoch,
        best_report=best_report,
        records=records,
        adam=adam,
        rng=rng,
    )


# ---------------------------------------------------------------------------
# VQG-driven augmentation
# ---------------------------------------------------------------------------


def augment_with_vqg(
    model: Model,
    answer_only: Sequence[QAExample],
    word_vocab: Vocabulary,
    answer_vocab: Vocabulary,
    data_config: DataConfig,
    beam_width: int | None = None,
) -> tuple[list[QAExample], int]:
    """Generate a question for every answers-only record.

    Returns the synthesized examples (marked synthetic) and the count of
    records dropped because decoding produced an empty question.
    """
    out: list[QAExample] = []
    dropped = 0
    for ex in answer_only:
        grid = render_grid(ex.scene, data_config)
        ids = generate_question_ids(model, grid, answer_vocab.id_of(ex.answer), beam_width)
        tokens = word_vocab.decode(ids)
        if not tokens:
            dropped += 1
            continue
        out.append(
            QAExample(
                image_id=ex.image_id,
                scene=ex.scene,
                question=tokens,
                answer=ex.answer,
                qtype=ex.qtype,
                synthetic=True,
            )
        )
    return out, dropped


# ---------------------------------------------------------------------------
# Regimes
# ---------------------------------------------------------------------------


@dataclass
class RegimeResult:
    report: EvalReport  # best-epoch validation report of the final model
    model: Model
    records: list[dict]
    synthesized: int = 0
    dropped: int = 0


def run_regime(
    config: TrainConfig,
    train_examples: Sequence[QAExample],
    val_examples: Sequence[QAExample],
    word_vocab: Vocabulary,
    answer_vocab: Vocabulary,
    data_config: DataConfig,
    record_sink: Callable[[dict], None] | None = None,
    log: Callable[[str], None] | None = None,
) -> RegimeResult:
    """Execute one of the five regimes end to end.

    `set1_fraction` of the pool keeps its question/answer pairs (Set 1); the
    rest is answers-only (Set 2, empty at fraction 1.0).

    baseline      two disjoint models, unary losses, Set 1 only
    dt            shared model under the joint loss, Set 1 only
    vqg_baseline  augment Set 2 with a dual-trained generator, then train
                  disjoint models on Set 1 + synthesized Set 2
    vqg_dt        same augmentation, shared model on the union
    vqg_dt_ft     vqg_dt, then finetune on Set 1
    """
    val_items = prepare_examples(val_examples, word_vocab, answer_vocab, data_config)
    records: list[dict] = []

    def collect(rec):
        records.append(rec)
        if record_sink is not None:
            record_sink(rec)

    def fit(examples, separate, phase, model=None, epochs=None, rng=None):
        items = prepare_examples(examples, word_vocab, answer_vocab, data_config)
        return train(
            config, items, val_items, word_vocab, answer_vocab,
            model=model, separate=separate, epochs=epochs, rng=rng,
            phase=phase, record_sink=collect, log=log,
        )

    synthesized = dropped = 0
    set1, set2 = split_for_augmentation(
        train_examples, SplitSpec(fraction_pairs=config.set1_fraction, seed=config.seed)
    )
    if config.regime in ("baseline", "dt"):
        # fully-labeled set only; the answers-only remainder is unused
        result = fit(set1, separate=(config.regime == "baseline"), phase="main")
    else:
        augmenter = fit(set1, separate=False, phase="augmenter")
        synth, dropped = augment_with_vqg(
            augmenter.model, set2, word_vocab, answer_vocab, data_config
        )
        synthesized = len(synth)
        union = list(set1) + synth
        if config.regime == "vqg_baseline":
            result = fit(union, separate=True, phase="main")
        elif config.regime == "vqg_dt":
            result = fit(union, separate=False, phase="main")
        else:  # vqg_dt_ft
            pre = fit(union, separate=False, phase="pretrain")
            ft_epochs = max(1, round(config.finetune_fraction * config.epochs))
            result = fit(
                set1, separate=False, phase="finetune",
                model=pre.model, epochs=ft_epochs, rng=pre.rng,
            )

    # final report at the configured beam width
    final_report, _ = evaluate(
        result.model, val_items, word_vocab,
        beam_width=config.beam_width, threads=config.eval_threads,
    )
    return RegimeResult(
        report=final_report,
        model=result.model,
        records=records,
        synthesized=synthesized,
        dropped=dropped,
    )


# ---------------------------------------------------------------------------
# Model checkpoints
# ---------------------------------------------------------------------------


def save_model(
    path: str | Path,
    model: Model,
    adam: AdamState | None = None,
    rng: np.random.Generator | None = None,
    epoch: int = 0,
) -> None:
    arrays = dict(model.params)
    if adam is not None:
        for name, arr in adam.m.items():
            arrays[f"adam.m.{name}"] = arr
        for name, arr in adam.v.items():
            arrays[f"adam.v.{name}"] = arr
    meta = {
        "config": model.config.as_dict(),
        "separate": model.separate,
        "n_words": model.n_words,
        "n_answers": model.n_answers,
        "epoch": epoch,
        "adam_t": adam.t if adam is not None else 0,
        "rng_state": _jsonable_rng_state(rng) if rng is not None else None,
    }
    save_checkpoint(path, arrays, meta)


def load_model(path: str | Path) -> tuple[Model, dict, AdamState, np.random.Generator | None]:
    arrays, meta = load_checkpoint(path)
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    adam = AdamState(t=meta.get("adam_t", 0))
    for k, v in arrays.items():
        if k.startswith("adam.m."):
            adam.m[k[len("adam.m."):]] = v
        elif k.startswith("adam.v."):
            adam.v[k[len("adam.v."):]] = v
    config = TrainConfig.from_dict(meta["config"])
    model = Model(
        config=config,
        n_words=meta["n_words"],
        n_answers=meta["n_answers"],
        separate=meta["separate"],
        params=params,
    )
    rng = None
    if meta.get("rng_state") is not None:
        rng = np.random.default_rng(0)
        rng.bit_generator.state = _rng_state_from_json(meta["rng_state"])
    return model, meta, adam, rng


def _jsonable_rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def _rng_state_from_json(state: dict) -> dict:
    return state


def records_to_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in records)
