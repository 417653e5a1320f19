"""Soft attention over a grid of visual cells, scored by the fusion kernel.

Each cell gets a scalar score from fusing the (already projected) guide
feature with the projected cell feature; softmax over the scores gives the
pooling weights. Single glimpse, one attention map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import SlicePair, uniform_init
from .linalg import ShapeError


@dataclass
class AttentionParams:
    guide_proj: np.ndarray  # (t_g, guide_dim)
    visual_proj: np.ndarray  # (t_av, d_v)
    slices: list[SlicePair]  # text (t_g, 1), visual (t_av, 1): scalar score head


def init_attention_params(
    guide_dim: int, d_v: int, t_g: int, t_v: int, rank: int, rng: np.random.Generator
) -> AttentionParams:
    return AttentionParams(
        guide_proj=uniform_init(rng, (t_g, guide_dim)),
        visual_proj=uniform_init(rng, (t_v, d_v)),
        slices=[
            SlicePair(text=uniform_init(rng, (t_g, 1)), visual=uniform_init(rng, (t_v, 1)))
            for _ in range(rank)
        ],
    )


def _flatten_cells(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 3:
        grid = grid.reshape(-1, grid.shape[-1])
    if grid.ndim != 2 or grid.shape[0] == 0:
        raise ShapeError(f"attention needs a nonempty (cells, d_v) grid, got {grid.shape}")
    return grid


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.exp(scores - scores.max())
    return z / z.sum()


def attention_scores(grid: np.ndarray, guide: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Pre-softmax scalar score per cell."""
    cells = _flatten_cells(grid)
    if guide.shape != (params.guide_proj.shape[1],):
        raise ShapeError(
            f"guide has shape {guide.shape}, expected ({params.guide_proj.shape[1]},)"
        )
    g = params.guide_proj @ guide
    projected = cells @ params.visual_proj.T  # (cells, t_av)
    scores = np.zeros(cells.shape[0])
    for s in params.slices:
        scores += float(g @ s.text[:, 0]) * (projected @ s.visual[:, 0])
    return scores


def attend(grid: np.ndarray, guide: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Softmax-weighted pooling of the cells, conditioned on the guide."""
    cells = _flatten_cells(grid)
    weights = softmax(attention_scores(cells, guide, params))
    return cells.T @ weights
