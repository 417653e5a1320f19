"""Operator entry point.

Subcommands: gen-data, train, eval, answer, generate, augment, gradcheck.
Settings come from an INI-style config file (sections per module) with CLI
flags overriding file values; the full effective configuration is echoed
before any work starts. Every error path exits nonzero after printing a
single `error: ...` line to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import REGIMES, TrainConfig
from .data import (
    DataConfig,
    FilterRules,
    build_answer_vocab,
    build_word_vocab,
    filter_examples,
    generate_dataset,
    read_jsonl,
    render_grid,
    write_jsonl,
    write_manifest,
)
from .gradcheck import run_suite
from .model import answer_scores, generate_question_ids
from .objectives import LossWeights
from .training import (
    augment_with_vqg,
    evaluate,
    load_model,
    prepare_examples,
    run_regime,
    save_model,
)


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------

# (section, key) -> TrainConfig field
TRAIN_KEYS = {
    ("model", "d_q"): ("d_q", int),
    ("model", "d_v"): ("d_v", int),
    ("model", "d_a"): ("d_a", int),
    ("model", "t"): ("t", int),
    ("model", "t_v"): ("t_v", int),
    ("model", "rank"): ("rank", int),
    ("model", "d_w"): ("d_w", int),
    ("model", "dual_mutan"): ("dual_mutan", bool),
    ("model", "duality_regularizer"): ("duality_regularizer", bool),
    ("model", "share_codec"): ("share_codec", bool),
    ("model", "share_attention"): ("share_attention", bool),
    ("model", "skip_output_lift"): ("skip_output_lift", bool),
    ("model", "fusion_backend"): ("fusion_backend", str),
    ("model", "projection_tanh"): ("projection_tanh", bool),
    ("train", "lr"): ("lr", float),
    ("train", "batch_size"): ("batch_size", int),
    ("train", "epochs"): ("epochs", int),
    ("train", "seed"): ("seed", int),
    ("train", "regime"): ("regime", str),
    ("train", "set1_fraction"): ("set1_fraction", float),
    ("train", "finetune_fraction"): ("finetune_fraction", float),
    ("decode", "beam_width"): ("beam_width", int),
    ("decode", "max_question_len"): ("max_question_len", int),
    ("decode", "length_normalize"): ("length_normalize", bool),
    ("eval", "eval_threads"): ("eval_threads", int),
}
LOSS_KEYS = {"w_vqa": "vqa", "w_vqg": "vqg", "w_q_duality": "q_duality", "w_a_duality": "a_duality"}
DATA_KEYS = {
    "grid_size": int, "sigma": float, "min_objects": int, "max_objects": int,
    "noise_seed": int, "n_train": int, "n_val": int,
}


def read_config_file(path: Path) -> tuple[dict, dict, dict]:
    """Returns (train overrides, loss weights, data settings) from an INI file."""
    parser = configparser.ConfigParser()
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    parser.read(path)
    train: dict = {}
    for (section, key), (field_name, typ) in TRAIN_KEYS.items():
        if parser.has_option(section, key):
            if typ is bool:
                train[field_name] = parser.getboolean(section, key)
            else:
                train[field_name] = typ(parser.get(section, key))
    loss: dict = {}
    if parser.has_section("loss"):
        for key, field_name in LOSS_KEYS.items():
            if parser.has_option("loss", key):
                loss[field_name] = parser.getfloat("loss", key)
    data: dict = {}
    if parser.has_section("data"):
        for key, typ in DATA_KEYS.items():
            if parser.has_option("data", key):
                data[key] = typ(parser.get("data", key))
    known = {s for s, _ in TRAIN_KEYS} | {"loss", "data"}
    for section in parser.sections():
        if section not in known:
            raise CliError(f"unknown config section [{section}] in {path}")
    return train, loss, data


def resolve_config(args) -> tuple[TrainConfig, DataConfig, int, int]:
    train_kw: dict = {}
    loss_kw: dict = {}
    data_kw: dict = {}
    if getattr(args, "config", None):
        train_kw, loss_kw, data_kw = read_config_file(Path(args.config))
    # CLI flags override file values
    for flag, field_name in (
        ("seed", "seed"), ("regime", "regime"), ("set1_fraction", "set1_fraction"),
        ("beam", "beam_width"), ("eval_threads", "eval_threads"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            train_kw[field_name] = value
    if loss_kw:
        train_kw["weights"] = LossWeights(**loss_kw)
    n_train = data_kw.pop("n_train", 2000)
    n_val = data_kw.pop("n_val", 500)
    try:
        config = TrainConfig(**train_kw)
        data_config = DataConfig(**data_kw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    return config, data_config, n_train, n_val


def echo_config(config: TrainConfig, data_config: DataConfig, extra: dict | None = None):
    print("effective config:")
    d = config.as_dict()
    weights = d.pop("weights")
    for key in sorted(d):
        print(f"  train.{key} = {d[key]}")
    for key in sorted(weights):
        print(f"  loss.{key} = {weights[key]}")
    for key, value in sorted(asdict(data_config).items()):
        print(f"  data.{key} = {value}")
    for key, value in sorted((extra or {}).items()):
        print(f"  run.{key} = {value}")


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def load_examples(data_path: Path, split: str):
    if data_path.is_dir():
        path = data_path / f"{split}.jsonl"
    else:
        path = data_path
    if not path.exists():
        raise CliError(f"missing data file: {path}")
    try:
        return read_jsonl(path)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def find_record(data_path: Path, image_id: str):
    candidates = []
    if data_path.is_dir():
        candidates = [data_path / "train.jsonl", data_path / "val.jsonl"]
    else:
        candidates = [data_path]
    for path in candidates:
        if not path.exists():
            continue
        try:
            for ex in read_jsonl(path):
                if ex.image_id == image_id:
                    return ex
        except ValueError as exc:
            raise CliError(str(exc)) from exc
    raise CliError(f"image_id {image_id!r} not found under {data_path}")


def load_ckpt(path: str):
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing checkpoint: {p}")
    try:
        return load_model(p)
    except ValueError as exc:
        raise CliError(f"bad checkpoint: {exc}") from exc


def require(args, name: str):
    value = getattr(args, name, None)
    if value is None:
        raise CliError(f"--{name.replace('_', '-')} is required for this subcommand")
    return value


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config, data_config, n_train, n_val = resolve_config(args)
    out = Path(require(args, "out"))
    echo_config(config, data_config, {"n_train": n_train, "n_val": n_val})
    out.mkdir(parents=True, exist_ok=True)
    train, val = generate_dataset(n_train, n_val, data_config, seed=config.seed)
    rules = FilterRules(question_prefixes=("what",))
    train = filter_examples(train, rules)
    val = filter_examples(val, rules)
    write_jsonl(train, out / "train.jsonl")
    write_jsonl(val, out / "val.jsonl")
    write_manifest(out / "manifest.json", data_config, config.seed, len(train), len(val))
    build_word_vocab().save(out / "words.vocab")
    build_answer_vocab().save(out / "answers.vocab")
    print(f"wrote {len(train)} train / {len(val)} val examples to {out}")
    return 0


def cmd_train(args) -> int:
    config, data_config, _, _ = resolve_config(args)
    data_path = Path(require(args, "data"))
    out = Path(require(args, "out"))
    echo_config(config, data_config, {"data": str(data_path), "out": str(out)})
    out.mkdir(parents=True, exist_ok=True)
    train_examples = load_examples(data_path, "train")
    val_examples = load_examples(data_path, "val")
    word_vocab = build_word_vocab()
    answer_vocab = build_answer_vocab()

    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        result = run_regime(
            config, train_examples, val_examples, word_vocab, answer_vocab, data_config,
            record_sink=lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"),
            log=print,
        )
    save_model(out / "best.ckpt", result.model)
    print(f"best validation report ({config.regime}):")
    print(result.report.as_text(), end="")
    if result.synthesized or result.dropped:
        print(f"synthesized={result.synthesized} dropped={result.dropped}")
    print(f"artifacts written to {out}")
    return 0


def cmd_eval(args) -> int:
    model, meta, _, _ = load_ckpt(args.ckpt)
    config, data_config, _, _ = resolve_config(args)
    model.config.beam_width = config.beam_width
    model.config.eval_threads = config.eval_threads
    echo_config(model.config, data_config, {"ckpt": args.ckpt})
    examples = load_examples(Path(require(args, "data")), "val")
    items = prepare_examples(examples, build_word_vocab(), build_answer_vocab(), data_config)
    report, losses = evaluate(
        model, items, build_word_vocab(),
        beam_width=model.config.beam_width, threads=model.config.eval_threads,
    )
    print(report.as_text(), end="")
    for key in sorted(losses):
        print(f"{key}={losses[key]}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.as_text(), encoding="utf-8")
        (out / "report.json").write_text(
            json.dumps({**report.as_dict(), **losses}, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return 0


def cmd_answer(args) -> int:
    model, _, _, _ = load_ckpt(args.ckpt)
    _, data_config, _, _ = resolve_config(args)
    echo_config(model.config, data_config, {"ckpt": args.ckpt, "image_id": args.image_id})
    record = find_record(Path(require(args, "data")), args.image_id)
    word_vocab = build_word_vocab()
    answer_vocab = build_answer_vocab()
    grid = render_grid(record.scene, data_config)
    tokens = args.question.split()
    scores = answer_scores(model, grid, word_vocab.encode(tokens))
    top = np.argsort(-scores, kind="stable")[:5]
    for rank, idx in enumerate(top, start=1):
        print(f"{rank}. {answer_vocab.token_of(int(idx))} {scores[idx]:.4f}")
    return 0


def cmd_generate(args) -> int:
    model, _, _, _ = load_ckpt(args.ckpt)
    config, data_config, _, _ = resolve_config(args)
    if args.beam is not None:
        model.config.beam_width = args.beam
    echo_config(model.config, data_config, {"ckpt": args.ckpt, "image_id": args.image_id})
    record = find_record(Path(require(args, "data")), args.image_id)
    word_vocab = build_word_vocab()
    answer_vocab = build_answer_vocab()
    if args.answer not in answer_vocab:
        raise CliError(f"unknown answer token {args.answer!r}")
    grid = render_grid(record.scene, data_config)
    ids = generate_question_ids(model, grid, answer_vocab.id_of(args.answer))
    print(" ".join(word_vocab.decode(ids)))
    return 0


def cmd_augment(args) -> int:
    model, _, _, _ = load_ckpt(args.ckpt)
    config, data_config, _, _ = resolve_config(args)
    if args.beam is not None:
        model.config.beam_width = args.beam
    out = Path(require(args, "out"))
    echo_config(model.config, data_config, {"ckpt": args.ckpt, "out": str(out)})
    examples = load_examples(Path(require(args, "data")), "train")
    answer_only = [
        ex if ex.question is None else type(ex)(
            image_id=ex.image_id, scene=ex.scene, question=None,
            answer=ex.answer, qtype=ex.qtype,
        )
        for ex in examples
    ]
    synth, dropped = augment_with_vqg(
        model, answer_only, build_word_vocab(), build_answer_vocab(), data_config,
    )
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(synth, out / "synthetic.jsonl")
    print(f"synthesized={len(synth)} dropped={dropped}")
    return 0


def cmd_gradcheck(args) -> int:
    config, data_config, _, _ = resolve_config(args)
    echo_config(config, data_config)
    results = run_suite(seed=config.seed)
    failures = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.name} max_rel_err={res.error:.3e}")
        failures += 0 if res.passed else 1
    if failures:
        raise CliError(f"{failures} gradient checks failed")
    print(f"all {len(results)} gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualvqa",
        description="Joint question answering/generation on the synthetic micro-world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", type=str, default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--data", type=str, default=None, help="dataset file or directory")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--regime", type=str, choices=REGIMES, default=None)
        p.add_argument("--set1-fraction", dest="set1_fraction", type=float, default=None)
        p.add_argument("--beam", type=int, default=None)
        p.add_argument("--eval-threads", dest="eval_threads", type=int, default=None)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.set_defaults(run=cmd_gen_data)

    p = sub.add_parser("train", help="train under the configured regime")
    common(p)
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("ckpt")
    common(p)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("answer", help="answer a question about an image")
    p.add_argument("ckpt")
    p.add_argument("image_id")
    p.add_argument("question", help="space-separated question tokens")
    common(p)
    p.set_defaults(run=cmd_answer)

    p = sub.add_parser("generate", help="generate a question for an answer")
    p.add_argument("ckpt")
    p.add_argument("image_id")
    p.add_argument("answer")
    common(p)
    p.set_defaults(run=cmd_generate)

    p = sub.add_parser("augment", help="synthesize questions for answer-only records")
    p.add_argument("ckpt")
    common(p)
    p.set_defaults(run=cmd_augment)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    common(p)
    p.set_defaults(run=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
