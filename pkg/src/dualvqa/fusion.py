"""Low-rank bilinear fusion of a text feature and a visual feature.

The dense form is a 3-way tensor contracted against the two inputs. The
trained form factors that tensor into three projections plus a compact core,
and the core itself into R rank-one slice pairs, so fusing costs a handful of
small mat-vecs:

    fused = sum_r (x^T @ slices[r].text) * (v^T @ slices[r].visual)

The same slice set serves both fusion directions: feeding the projected
question infers an answer feature, feeding the answer embedding (the mode-1
swap) infers a question feature. `DualFusionParams.dense_symmetric` exists
only as a test oracle for that swap; training always uses the low-rank path.

Axis order of every composed core is (text, visual, output).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .linalg import ShapeError, mode_product

BACKENDS = ("mutan", "mlb")


@dataclass(frozen=True)
class FusionConfig:
    """Dimensions of one fusion kernel.

    d_q/d_v/d_a are the raw input dims, t the shared projected text/output
    dim, t_v the projected visual dim, rank the number of slice pairs. The
    mlb backend pins the core to the identity gate (t_v == t, rank 1,
    untrainable identity slices).
    """

    d_q: int
    d_v: int
    d_a: int
    t: int
    t_v: int
    rank: int
    backend: str = "mutan"

    def __post_init__(self):
        for name in ("d_q", "d_v", "d_a", "t", "t_v", "rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "mlb" and self.t_v != self.t:
            raise ValueError("mlb backend needs t_v == t")


@dataclass
class SlicePair:
    """One rank-one slab of the core: `text` is (t, t_out), `visual` is (t_v, t_out)."""

    text: np.ndarray
    visual: np.ndarray


@dataclass
class FusionParams:
    question_proj: np.ndarray  # (t, d_q)
    visual_proj: np.ndarray  # (t_v, d_v)
    answer_proj: np.ndarray  # (t, d_a); only used when the output lift is active
    slices: list[SlicePair] = field(default_factory=list)

    @property
    def t(self) -> int:
        return self.question_proj.shape[0]

    @property
    def t_v(self) -> int:
        return self.visual_proj.shape[0]


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], fan_in = last axis."""
    bound = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


def identity_slices(t: int) -> list[SlicePair]:
    """The single slice pair that makes fusing an elementwise gate."""
    eye = np.eye(t)
    return [SlicePair(text=eye.copy(), visual=eye.copy())]


def init_fusion_params(config: FusionConfig, rng: np.random.Generator) -> FusionParams:
    if config.backend == "mlb":
        slices = identity_slices(config.t)
    else:
        slices = [
            SlicePair(
                text=uniform_init(rng, (config.t, config.t)),
                visual=uniform_init(rng, (config.t_v, config.t)),
            )
            for _ in range(config.rank)
        ]
    return FusionParams(
        question_proj=uniform_init(rng, (config.t, config.d_q)),
        visual_proj=uniform_init(rng, (config.t_v, config.d_v)),
        answer_proj=uniform_init(rng, (config.t, config.d_a)),
        slices=slices,
    )


def project(q: np.ndarray, v: np.ndarray, params: FusionParams) -> tuple[np.ndarray, np.ndarray]:
    """Project the raw question and visual vectors into fusion space."""
    return linalg.matvec(params.question_proj, q), linalg.matvec(params.visual_proj, v)


def lowrank_fuse(x: np.ndarray, v: np.ndarray, slices: list[SlicePair]) -> np.ndarray:
    """sum_r (x^T slices[r].text) * (v^T slices[r].visual)."""
    if not slices:
        raise ValueError("need at least one slice pair")
    out = None
    for s in slices:
        term = linalg.elementwise_product(linalg.matvec(s.text.T, x), linalg.matvec(s.visual.T, v))
        out = term if out is None else out + term
    return out


def compose_core(slices: list[SlicePair]) -> np.ndarray:
    """Densify the slice pairs into the (t, t_v, t_out) core tensor.

    core[:, :, k] = sum_r outer(slices[r].text[:, k], slices[r].visual[:, k]),
    which makes fuse_via_core(core, x, v) == lowrank_fuse(x, v, slices).
    """
    if not slices:
        raise ValueError("need at least one slice pair")
    core = np.zeros((slices[0].text.shape[0], slices[0].visual.shape[0], slices[0].text.shape[1]))
    for s in slices:
        core += np.einsum("ak,bk->abk", s.text, s.visual)
    return core


def fuse_via_core(core: np.ndarray, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dense fusion: contract the core's text axis with x and visual axis with v."""
    out = mode_product(core, x.reshape(-1, 1), axis=1)
    out = mode_product(out, v.reshape(-1, 1), axis=2)
    return out.reshape(-1)


def compose_full_tensor(params: FusionParams) -> np.ndarray:
    """Expand the factored operator back to the dense (d_q, d_v, d_a) tensor."""
    core = compose_core(params.slices)
    full = mode_product(core, params.question_proj, axis=1)
    full = mode_product(full, params.visual_proj, axis=2)
    full = mode_product(full, params.answer_proj, axis=3)
    return full


def apply_output_lift(feature: np.ndarray, proj: np.ndarray, skip: bool) -> np.ndarray:
    """Lift a fused t-feature back to decoder space, or pass it through.

    With `skip` (the trained default) the fused feature goes straight to the
    decoder; otherwise it is lifted by the transpose of the given projection.
    """
    if skip:
        return np.asarray(feature, dtype=np.float64)
    return linalg.matvec(proj.T, feature)


# ---------------------------------------------------------------------------
# Dual (bidirectional) form
# ---------------------------------------------------------------------------


@dataclass
class DualFusionParams:
    """One shared parameter set serving both fusion directions.

    mode 'lowrank_shared' (the trained form) runs the slice sum with the
    mode-1 input swapped between directions. mode 'dense_symmetric' densifies
    the core, symmetrizes every visual-indexed slice and contracts dense;
    it exists to make the swap's correctness checkable and is never trained.
    """

    params: FusionParams
    mode: str = "lowrank_shared"
    _core: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("lowrank_shared", "dense_symmetric"):
            raise ValueError(f"unknown dual fusion mode {self.mode!r}")
        if self.params.slices[0].text.shape != (self.params.t, self.params.t):
            raise ShapeError("dual fusion needs square text slices (t_out == t)")
        if self.mode == "dense_symmetric":
            self._core = symmetrize_core(compose_core(self.params.slices))

    @property
    def core(self) -> np.ndarray:
        if self._core is None:
            raise ValueError("dense core only exists in dense_symmetric mode")
        return self._core


def symmetrize_core(core: np.ndarray) -> np.ndarray:
    """Replace every visual-indexed slice core[:, i, :] by its symmetric part."""
    if core.ndim != 3 or core.shape[0] != core.shape[2]:
        raise ShapeError(f"symmetrize needs square visual-indexed slices, got {core.shape}")
    return 0.5 * (core + core.transpose(2, 1, 0))


def transpose_slices(core: np.ndarray) -> np.ndarray:
    """The conjugate core: every visual-indexed slice transposed."""
    if core.ndim != 3 or core.shape[0] != core.shape[2]:
        raise ShapeError(f"slice transpose needs square slices, got {core.shape}")
    return np.ascontiguousarray(core.transpose(2, 1, 0))


def infer_answer_feature(q_proj: np.ndarray, v_proj: np.ndarray, dual: DualFusionParams) -> np.ndarray:
    """Answer feature from (projected question, projected visual)."""
    if dual.mode == "dense_symmetric":
        return fuse_via_core(dual.core, q_proj, v_proj)
    return lowrank_fuse(q_proj, v_proj, dual.params.slices)


def infer_question_feature(a_feat: np.ndarray, v_proj: np.ndarray, dual: DualFusionParams) -> np.ndarray:
    """Question feature from (answer feature, projected visual): the mode-1 swap."""
    if dual.mode == "dense_symmetric":
        return fuse_via_core(dual.core, a_feat, v_proj)
    return lowrank_fuse(a_feat, v_proj, dual.params.slices)
