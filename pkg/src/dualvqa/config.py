"""Run configuration: dimensions, sharing flags, loss weights, optimization
settings and the training regime."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .fusion import BACKENDS
from .objectives import LossWeights

REGIMES = ("baseline", "dt", "vqg_baseline", "vqg_dt", "vqg_dt_ft")


@dataclass
class TrainConfig:
    # feature dimensions
    d_q: int = 24  # question encoder hidden dim
    d_v: int = 16  # visual cell dim (matches the rendered grid)
    d_a: int = 24  # answer embedding dim when the output lift is active
    t: int = 20  # shared projected text/answer dim
    t_v: int = 24  # projected visual dim
    rank: int = 3  # slice pairs in the fusion core
    d_w: int = 16  # word embedding dim

    # architecture flags
    dual_mutan: bool = True  # one fusion parameter set for both directions
    duality_regularizer: bool = True
    share_codec: bool = True  # tied answer table + one recurrent cell
    share_attention: bool = True
    skip_output_lift: bool = True  # feed fused features to decoders directly
    fusion_backend: str = "mutan"  # "mlb" pins the core to an identity gate
    projection_tanh: bool = False  # optional tanh after the fusion projections

    # loss weights
    weights: LossWeights = field(default_factory=LossWeights)

    # optimization (lr follows the full-scale recipe; desk-scale runs
    # typically raise it, see README)
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0

    # regime
    regime: str = "dt"
    set1_fraction: float = 1.0
    finetune_fraction: float = 0.2  # finetune epochs as a fraction of epochs

    # decoding / evaluation
    beam_width: int = 2
    max_question_len: int = 12
    length_normalize: bool = False
    eval_threads: int = 1

    def __post_init__(self):
        for name in ("d_q", "d_v", "d_a", "t", "t_v", "rank", "d_w", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if not 0.0 < self.set1_fraction <= 1.0:
            raise ValueError("set1_fraction must be in (0, 1]")
        if self.fusion_backend not in BACKENDS:
            raise ValueError(f"unknown fusion backend {self.fusion_backend!r}")
        if self.fusion_backend == "mlb" and self.t_v != self.t:
            raise ValueError("mlb backend needs t_v == t")
        if self.beam_width < 1 or self.max_question_len < 1:
            raise ValueError("beam_width and max_question_len must be >= 1")
        if self.eval_threads < 1:
            raise ValueError("eval_threads must be >= 1")

    @property
    def answer_feature_dim(self) -> int:
        """Width of the answer table: fusion space under the skip, d_a otherwise."""
        return self.t if self.skip_output_lift else self.d_a

    def as_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)
