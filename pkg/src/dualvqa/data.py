"""Deterministic synthetic scenes with templated attribute questions.

A scene is a small grid of objects, each carrying four attributes (shape,
color, size, material). Questions ask for one attribute of the object picked
out by the other three; the generator only keeps scenes where that reference
is unambiguous, so a symbolic lookup answers every generated question
exactly. Feature grids are re-derived from the scene record (attribute
one-hots plus seeded noise), never stored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codec import Vocabulary

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")
SIZES = ("small", "large")
MATERIALS = ("rubber", "metal")

ATTRIBUTES = {"shape": SHAPES, "color": COLORS, "size": SIZES, "material": MATERIALS}
QUESTION_TYPES = ("size", "material", "shape", "color")
ANSWER_VALUES = SHAPES + COLORS + SIZES + MATERIALS  # 15 classes

# One template per question type; the reference names the other three
# attributes, which the generator guarantees to be unambiguous in the scene.
TEMPLATES = {
    "color": "what color is the {size} {material} {shape}",
    "material": "what material is the {size} {color} {shape}",
    "size": "what size is the {color} {material} {shape}",
    "shape": "what shape is the {size} {color} {material} object",
}

STRUCTURE_WORDS = ("what", "is", "the", "object", "color", "material", "size", "shape")

# cell feature layout: [occupied, shape one-hot (3), color (8), size (2), material (2)]
FEATURE_DIM = 1 + len(SHAPES) + len(COLORS) + len(SIZES) + len(MATERIALS)


@dataclass(frozen=True)
class SceneObject:
    row: int
    col: int
    shape: str
    color: str
    size: str
    material: str

    def attribute(self, name: str) -> str:
        return getattr(self, name)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]

    def signature(self) -> tuple:
        return tuple(
            sorted((o.row, o.col, o.shape, o.color, o.size, o.material) for o in self.objects)
        )


@dataclass
class QAExample:
    image_id: str
    scene: SceneSpec
    question: list[str] | None  # None for answer-only records
    answer: str
    qtype: str
    synthetic: bool = False


@dataclass(frozen=True)
class DataConfig:
    grid_size: int = 4
    sigma: float = 0.1
    min_objects: int = 2
    max_objects: int = 4
    noise_seed: int = 0


def build_word_vocab() -> Vocabulary:
    return Vocabulary(STRUCTURE_WORDS + ANSWER_VALUES, reserved=True)


def build_answer_vocab() -> Vocabulary:
    return Vocabulary(ANSWER_VALUES, reserved=False)


def answer_category(value: str) -> str:
    for name, values in ATTRIBUTES.items():
        if value in values:
            return name
    raise KeyError(f"unknown answer value {value!r}")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _one_hot_offsets() -> dict[str, int]:
    offsets = {}
    offset = 1
    for name in ("shape", "color", "size", "material"):
        offsets[name] = offset
        offset += len(ATTRIBUTES[name])
    return offsets


_OFFSETS = _one_hot_offsets()


def render_grid(scene: SceneSpec, config: DataConfig = DataConfig()) -> np.ndarray:
    """(grid, grid, FEATURE_DIM) array; empty cells are zero.

    The per-cell noise is a deterministic function of (noise seed, position,
    attributes), so a stored scene always re-renders to the same grid.
    """
    n = config.grid_size
    grid = np.zeros((n, n, FEATURE_DIM))
    for obj in scene.objects:
        if not (0 <= obj.row < n and 0 <= obj.col < n):
            raise ValueError(f"object at ({obj.row}, {obj.col}) outside {n}x{n} grid")
        vec = np.zeros(FEATURE_DIM)
        vec[0] = 1.0
        for name, values in ATTRIBUTES.items():
            vec[_OFFSETS[name] + values.index(obj.attribute(name))] = 1.0
        if config.sigma > 0.0:
            entropy = [
                config.noise_seed,
                obj.row,
                obj.col,
                SHAPES.index(obj.shape),
                COLORS.index(obj.color),
                SIZES.index(obj.size),
                MATERIALS.index(obj.material),
            ]
            noise_rng = np.random.default_rng(np.random.SeedSequence(entropy))
            vec = vec + noise_rng.uniform(-config.sigma, config.sigma, FEATURE_DIM)
        grid[obj.row, obj.col] = vec
    return grid


# ---------------------------------------------------------------------------
# Question construction and the symbolic answerer
# ---------------------------------------------------------------------------


def _reference_attrs(obj: SceneObject, qtype: str) -> dict[str, str]:
    return {name: obj.attribute(name) for name in ATTRIBUTES if name != qtype}


def make_question(obj: SceneObject, qtype: str) -> list[str]:
    fields = {name: obj.attribute(name) for name in ATTRIBUTES}
    return TEMPLATES[qtype].format(**fields).split()


def _matches(obj: SceneObject, ref: dict[str, str]) -> bool:
    return all(obj.attribute(name) == value for name, value in ref.items())


def parse_question(tokens: Sequence[str]) -> tuple[str, dict[str, str]]:
    """Recover (question type, reference attributes) from a templated question."""
    if len(tokens) < 4 or tokens[0] != "what" or tokens[1] not in QUESTION_TYPES:
        raise ValueError(f"unparseable question: {' '.join(tokens)}")
    qtype = tokens[1]
    ref: dict[str, str] = {}
    for tok in tokens[3:]:
        for name, values in ATTRIBUTES.items():
            if tok in values:
                ref[name] = tok
    return qtype, ref


def symbolic_answer(scene: SceneSpec, tokens: Sequence[str]) -> str | None:
    """Exact attribute lookup; None when the reference is not unique."""
    try:
        qtype, ref = parse_question(tokens)
    except ValueError:
        return None
    hits = [o for o in scene.objects if _matches(o, ref)]
    if len(hits) != 1:
        return None
    return hits[0].attribute(qtype)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _sample_scene(rng: np.random.Generator, config: DataConfig) -> SceneSpec:
    n_cells = config.grid_size * config.grid_size
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(n_cells, size=count, replace=False)
    objects = []
    for cell in cells:
        objects.append(
            SceneObject(
                row=int(cell) // config.grid_size,
                col=int(cell) % config.grid_size,
                shape=SHAPES[rng.integers(len(SHAPES))],
                color=COLORS[rng.integers(len(COLORS))],
                size=SIZES[rng.integers(len(SIZES))],
                material=MATERIALS[rng.integers(len(MATERIALS))],
            )
        )
    return SceneSpec(tuple(objects))


def _sample_example(
    rng: np.random.Generator, config: DataConfig, qtype: str, image_id: str,
    excluded_scenes: set | None,
) -> QAExample:
    for _ in range(1000):
        scene = _sample_scene(rng, config)
        if excluded_scenes is not None and scene.signature() in excluded_scenes:
            continue
        target = scene.objects[rng.integers(len(scene.objects))]
        ref = _reference_attrs(target, qtype)
        if sum(1 for o in scene.objects if _matches(o, ref)) != 1:
            continue  # ambiguous reference, resample
        return QAExample(
            image_id=image_id,
            scene=scene,
            question=make_question(target, qtype),
            answer=target.attribute(qtype),
            qtype=qtype,
        )
    raise RuntimeError("could not sample an unambiguous scene; config too tight")


def generate_dataset(
    n_train: int, n_val: int, config: DataConfig, seed: int
) -> tuple[list[QAExample], list[QAExample]]:
    """Deterministic train/val example lists with disjoint scenes.

    Question types cycle round-robin, so their frequencies are uniform to
    within one example.
    """
    if n_train < 1 or n_val < 0:
        raise ValueError("need n_train >= 1 and n_val >= 0")
    if config.max_objects < config.min_objects or config.min_objects < 1:
        raise ValueError("invalid object count range")
    if config.max_objects > config.grid_size * config.grid_size:
        raise ValueError("more objects than grid cells")
    rng = np.random.default_rng(seed)
    train: list[QAExample] = []
    seen: set = set()
    for i in range(n_train):
        ex = _sample_example(rng, config, QUESTION_TYPES[i % 4], f"train-{i:06d}", None)
        seen.add(ex.scene.signature())
        train.append(ex)
    val: list[QAExample] = []
    for i in range(n_val):
        ex = _sample_example(rng, config, QUESTION_TYPES[i % 4], f"val-{i:06d}", seen)
        val.append(ex)
    return train, val


# ---------------------------------------------------------------------------
# Filtering and splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterRules:
    question_prefixes: tuple[str, ...] | None = ("what",)
    top_k_answers: int | None = None


def filter_examples(examples: Sequence[QAExample], rules: FilterRules) -> list[QAExample]:
    """Keep examples passing every enabled predicate, preserving order."""
    kept = list(examples)
    if rules.question_prefixes is not None:
        kept = [
            ex
            for ex in kept
            if ex.question is not None and ex.question[0] in rules.question_prefixes
        ]
    if rules.top_k_answers is not None:
        counts: dict[str, int] = {}
        for ex in kept:
            counts[ex.answer] = counts.get(ex.answer, 0) + 1
        ranked = sorted(counts, key=lambda a: (-counts[a], a))
        allowed = set(ranked[: rules.top_k_answers])
        kept = [ex for ex in kept if ex.answer in allowed]
    return kept


@dataclass(frozen=True)
class SplitSpec:
    fraction_pairs: float
    seed: int


def split_for_augmentation(
    train: Sequence[QAExample], spec: SplitSpec
) -> tuple[list[QAExample], list[QAExample]]:
    """Partition into a fully-labeled set and an answers-only set.

    Membership is a seeded permutation; both outputs preserve the original
    order. Answers-only records keep the scene and answer but drop the
    question.
    """
    if not 0.0 < spec.fraction_pairs <= 1.0:
        raise ValueError(f"fraction_pairs must be in (0, 1], got {spec.fraction_pairs}")
    n = len(train)
    k = int(round(spec.fraction_pairs * n))
    perm = np.random.default_rng(spec.seed).permutation(n)
    chosen = set(int(i) for i in perm[:k])
    set1 = [train[i] for i in range(n) if i in chosen]
    set2 = [
        replace(train[i], question=None) for i in range(n) if i not in chosen
    ]
    return set1, set2


# ---------------------------------------------------------------------------
# JSONL + manifest IO
# ---------------------------------------------------------------------------


def example_to_record(ex: QAExample) -> dict:
    record = {
        "image_id": ex.image_id,
        "scene": [
            {
                "row": o.row,
                "col": o.col,
                "shape": o.shape,
                "color": o.color,
                "size": o.size,
                "material": o.material,
            }
            for o in ex.scene.objects
        ],
        "answer": ex.answer,
        "qtype": ex.qtype,
    }
    if ex.question is not None:
        record["question"] = " ".join(ex.question)
    if ex.synthetic:
        record["synthetic"] = True
    return record


def record_to_example(record: dict) -> QAExample:
    objects = tuple(
        SceneObject(
            row=int(o["row"]),
            col=int(o["col"]),
            shape=o["shape"],
            color=o["color"],
            size=o["size"],
            material=o["material"],
        )
        for o in record["scene"]
    )
    question = record.get("question")
    return QAExample(
        image_id=record["image_id"],
        scene=SceneSpec(objects),
        question=question.split() if question is not None else None,
        answer=record["answer"],
        qtype=record["qtype"],
        synthetic=bool(record.get("synthetic", False)),
    )


def write_jsonl(examples: Iterable[QAExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[QAExample]:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                examples.append(record_to_example(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ValueError(f"{path}: malformed record on line {lineno}: {exc}") from exc
    return examples


def write_manifest(path: str | Path, config: DataConfig, seed: int, n_train: int, n_val: int) -> None:
    manifest = {
        "seed": seed,
        "sigma": config.sigma,
        "grid_size": config.grid_size,
        "noise_seed": config.noise_seed,
        "min_objects": config.min_objects,
        "max_objects": config.max_objects,
        "n_train": n_train,
        "n_val": n_val,
        "templates": TEMPLATES,
        "feature_dim": FEATURE_DIM,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
