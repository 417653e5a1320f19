"""The assembled model: a named parameter store plus two synchronized
forward implementations.

`Graph` builds the training loss on an autodiff tape. The module-level
`forward_outputs` / `answer_scores` / `generate_question_ids` functions run
the identical math on plain arrays for evaluation and decoding (no gradient
bookkeeping); a test pins the two paths to bit-equal outputs.

Parameter sharing is arranged purely through the key layout of the store:
a shared component exists as one array under one key, and every use site
reads that key. `separate=True` (the ablation baseline) splits the store
into disjoint ``vqa``/``vqg`` parameter sets with nothing shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, attend, attention_scores
from .codec import (
    END,
    START,
    AnswerTable,
    RecurrentParams,
    cell_step,
    classify_answer,
    decode_beam,
    decode_greedy,
    embed_answer,
    encode_question,
    init_recurrent_params,
    initial_hidden,
)
from .config import TrainConfig
from .fusion import (
    FusionConfig,
    FusionParams,
    SlicePair,
    identity_slices,
    init_fusion_params,
    lowrank_fuse,
    uniform_init,
)

CELL_KEYS = (
    "w_update", "u_update", "b_update",
    "w_reset", "u_reset", "b_reset",
    "w_cand", "u_cand", "b_cand",
)


@dataclass
class Model:
    config: TrainConfig
    n_words: int
    n_answers: int
    separate: bool  # disjoint vqa/vqg parameter sets (the ablation baseline)
    params: dict[str, np.ndarray]

    # -- construction --------------------------------------------------

    @classmethod
    def init(cls, config: TrainConfig, n_words: int, n_answers: int,
             rng: np.random.Generator, separate: bool = False) -> "Model":
        """Allocate exactly the arrays the configuration uses.

        Draw order is fixed (fusion, attention, codec, answer table, decode
        head; vqa side before vqg side when separate) so a seed pins every
        array.
        """
        c = config
        params: dict[str, np.ndarray] = {}

        def add_fusion(prefix: str):
            fp = init_fusion_params(
                FusionConfig(d_q=c.d_q, d_v=c.d_v, d_a=c.d_a, t=c.t, t_v=c.t_v,
                             rank=c.rank, backend=c.fusion_backend), rng)
            params[f"{prefix}.question_proj"] = fp.question_proj
            params[f"{prefix}.visual_proj"] = fp.visual_proj
            if not c.skip_output_lift:
                params[f"{prefix}.answer_proj"] = fp.answer_proj
            if c.fusion_backend != "mlb":  # mlb slices are untrainable constants
                for r, s in enumerate(fp.slices):
                    params[f"{prefix}.slice{r}.text"] = s.text
                    params[f"{prefix}.slice{r}.visual"] = s.visual

        def add_attention(prefix: str):
            params[f"{prefix}.guide_proj"] = uniform_init(rng, (c.t, c.t))
            params[f"{prefix}.visual_proj"] = uniform_init(rng, (c.t_v, c.d_v))
            for r in range(c.rank):
                # scalar score head: slice columns stored flat, fan_in = their length
                params[f"{prefix}.slice{r}.text"] = uniform_init(rng, (c.t,))
                params[f"{prefix}.slice{r}.visual"] = uniform_init(rng, (c.t_v,))

        def add_cell(prefix: str):
            rp = init_recurrent_params(n_words, c.d_w, c.d_q, rng)
            params[f"{prefix}.embed"] = rp.embed
            for key in CELL_KEYS:
                params[f"{prefix}.{key}"] = getattr(rp, key)

        def add_table(prefix: str):
            params[f"{prefix}.table"] = uniform_init(rng, (n_answers, c.answer_feature_dim))

        def add_decode_head():
            params["decode.out_w"] = uniform_init(rng, (n_words, c.d_q))
            params["decode.out_b"] = np.zeros(n_words)
            if c.skip_output_lift:
                params["decode.h0_lift"] = uniform_init(rng, (c.d_q, c.t))

        shared_fusion = c.dual_mutan and not separate
        shared_attention = c.share_attention and not separate
        shared_codec = c.share_codec and not separate

        for prefix in (("fusion",) if shared_fusion else ("fusion_vqa", "fusion_vqg")):
            add_fusion(prefix)
        for prefix in (("attn",) if shared_attention else ("attn_vqa", "attn_vqg")):
            add_attention(prefix)
        for prefix in (("codec",) if shared_codec else ("encoder", "decoder")):
            add_cell(prefix)
        for prefix in (("answers",) if shared_codec else ("answers_cls", "answers_emb")):
            add_table(prefix)
        add_decode_head()
        return cls(config=c, n_words=n_words, n_answers=n_answers,
                   separate=separate, params=params)

    # -- flag resolution -----------------------------------------------

    @property
    def uses_duality(self) -> bool:
        return self.config.duality_regularizer and not self.separate

    def fusion_prefix(self, direction: str) -> str:
        if self.config.dual_mutan and not self.separate:
            return "fusion"
        return f"fusion_{direction}"

    def attention_prefix(self, direction: str) -> str:
        if self.config.share_attention and not self.separate:
            return "attn"
        return f"attn_{direction}"

    def cell_prefix(self, role: str) -> str:  # role: "encoder" | "decoder"
        if self.config.share_codec and not self.separate:
            return "codec"
        return role

    def table_prefix(self, role: str) -> str:  # role: "classify" | "embed"
        if self.config.share_codec and not self.separate:
            return "answers"
        return "answers_cls" if role == "classify" else "answers_emb"

    # -- dataclass views over the store (arrays are not copied) ---------

    def fusion_slices(self, direction: str) -> list[SlicePair]:
        if self.config.fusion_backend == "mlb":
            return identity_slices(self.config.t)
        p = self.fusion_prefix(direction)
        return [
            SlicePair(text=self.params[f"{p}.slice{r}.text"],
                      visual=self.params[f"{p}.slice{r}.visual"])
            for r in range(self.config.rank)
        ]

    def fusion_view(self, direction: str) -> FusionParams:
        p = self.fusion_prefix(direction)
        lift = (
            np.zeros((self.config.t, self.config.d_a))
            if self.config.skip_output_lift
            else self.params[f"{p}.answer_proj"]
        )
        return FusionParams(
            question_proj=self.params[f"{p}.question_proj"],
            visual_proj=self.params[f"{p}.visual_proj"],
            answer_proj=lift,
            slices=self.fusion_slices(direction),
        )

    def attention_view(self, direction: str) -> AttentionParams:
        p = self.attention_prefix(direction)
        return AttentionParams(
            guide_proj=self.params[f"{p}.guide_proj"],
            visual_proj=self.params[f"{p}.visual_proj"],
            slices=[
                SlicePair(text=self.params[f"{p}.slice{r}.text"].reshape(-1, 1),
                          visual=self.params[f"{p}.slice{r}.visual"].reshape(-1, 1))
                for r in range(self.config.rank)
            ],
        )

    def recurrent_view(self, role: str) -> RecurrentParams:
        p = self.cell_prefix(role)
        kw = {key: self.params[f"{p}.{key}"] for key in CELL_KEYS}
        return RecurrentParams(
            embed=self.params[f"{p}.embed"],
            out_w=self.params["decode.out_w"],
            out_b=self.params["decode.out_b"],
            h0_lift=self.params.get("decode.h0_lift"),
            **kw,
        )

    def answer_table_view(self, role: str) -> AnswerTable:
        return AnswerTable(table=self.params[f"{self.table_prefix(role)}.table"])

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, new: dict[str, np.ndarray]) -> None:
        if set(new) != set(self.params):
            raise ValueError("parameter name sets differ")
        for k, v in new.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}")
            self.params[k][...] = v


# ---------------------------------------------------------------------------
# Raw (inference) forward path
# ---------------------------------------------------------------------------


def _maybe_tanh(x: np.ndarray, enabled: bool) -> np.ndarray:
    return np.tanh(x) if enabled else x


def _vqa_features(model: Model, grid: np.ndarray, question_ids: list[int]):
    c = model.config
    q = encode_question(question_ids, model.recurrent_view("encoder"))
    fused = model.fusion_view("vqa")
    q_proj = _maybe_tanh(fused.question_proj @ q, c.projection_tanh)
    pooled = attend(grid, q_proj, model.attention_view("vqa"))
    v_proj = _maybe_tanh(fused.visual_proj @ pooled, c.projection_tanh)
    a_pred = lowrank_fuse(q_proj, v_proj, fused.slices)
    return q, q_proj, a_pred


def _vqg_features(model: Model, grid: np.ndarray, answer_id: int):
    c = model.config
    a_raw = embed_answer(answer_id, model.answer_table_view("embed"))
    fused = model.fusion_view("vqg")
    a_in = a_raw if c.skip_output_lift else fused.answer_proj @ a_raw
    pooled = attend(grid, a_in, model.attention_view("vqg"))
    v_proj = _maybe_tanh(fused.visual_proj @ pooled, c.projection_tanh)
    q_pred = lowrank_fuse(a_in, v_proj, fused.slices)
    return a_raw, a_in, q_pred


def answer_scores(model: Model, grid: np.ndarray, question_ids: list[int]) -> np.ndarray:
    """VQA direction: per-class answer scores."""
    c = model.config
    _, _, a_pred = _vqa_features(model, grid, question_ids)
    feature = a_pred if c.skip_output_lift else model.fusion_view("vqa").answer_proj.T @ a_pred
    return classify_answer(feature, model.answer_table_view("classify"))


def question_feature(model: Model, grid: np.ndarray, answer_id: int) -> np.ndarray:
    """VQG direction: the decoder input feature."""
    c = model.config
    _, _, q_pred = _vqg_features(model, grid, answer_id)
    return q_pred if c.skip_output_lift else model.fusion_view("vqg").question_proj.T @ q_pred


def generate_question_ids(
    model: Model, grid: np.ndarray, answer_id: int, beam_width: int | None = None
) -> list[int]:
    """Beam-decoded question token ids (beam width 1 = greedy)."""
    c = model.config
    width = c.beam_width if beam_width is None else beam_width
    feat = question_feature(model, grid, answer_id)
    dec = model.recurrent_view("decoder")
    if width == 1:
        return decode_greedy(feat, dec, c.max_question_len)
    return decode_beam(feat, dec, width, c.max_question_len, c.length_normalize)


def forward_outputs(model: Model, grid: np.ndarray, question_ids: list[int], answer_id: int):
    """Both directions on plain arrays; returns objectives.ExampleOutputs."""
    from .objectives import ExampleOutputs

    c = model.config
    q, q_proj, a_pred = _vqa_features(model, grid, question_ids)
    a_raw, a_in, q_pred = _vqg_features(model, grid, answer_id)

    vqa_fused = model.fusion_view("vqa")
    vqg_fused = model.fusion_view("vqg")
    if c.skip_output_lift:
        cls_feature = a_pred
        q_pair = (q_proj, q_pred)
        a_pair = (a_in, a_pred)
    else:
        cls_feature = vqa_fused.answer_proj.T @ a_pred
        q_pair = (q, vqg_fused.question_proj.T @ q_pred)
        a_pair = (a_raw, cls_feature)
    scores = classify_answer(cls_feature, model.answer_table_view("classify"))

    dec = model.recurrent_view("decoder")
    q_feat = q_pred if c.skip_output_lift else vqg_fused.question_proj.T @ q_pred
    h = initial_hidden(q_feat, dec)
    targets = list(question_ids) + [END]
    prevs = [START] + list(question_ids)
    step_scores = []
    for prev in prevs:
        h = cell_step(dec, dec.embed[prev], h)
        step_scores.append(dec.out_w @ h + dec.out_b)

    return ExampleOutputs(
        vqa_scores=scores,
        vqg_step_scores=step_scores,
        question_feature=q_pair[0],
        question_feature_pred=q_pair[1],
        answer_feature=a_pair[0],
        answer_feature_pred=a_pair[1],
    ), targets


def raw_attention_scores(model: Model, grid: np.ndarray, guide: np.ndarray, direction: str):
    return attention_scores(grid, guide, model.attention_view(direction))


# ---------------------------------------------------------------------------
# Tape forward path (training)
# ---------------------------------------------------------------------------


class Graph:
    """One training tape over the model's parameter store."""

    def __init__(self, model: Model):
        self.model = model
        self.tape = ad.Tape()
        self._leaves: dict[str, ad.Node] = {}
        self._consts: dict[int, ad.Node] = {}
        self._mlb_eye: ad.Node | None = None

    def p(self, name: str) -> ad.Node:
        node = self._leaves.get(name)
        if node is None:
            node = self.tape.leaf(self.model.params[name])
            self._leaves[name] = node
        return node

    def const(self, arr: np.ndarray) -> ad.Node:
        key = id(arr)
        node = self._consts.get(key)
        if node is None:
            node = self.tape.leaf(np.asarray(arr, dtype=np.float64))
            self._consts[key] = node
        return node

    def grads(self) -> dict[str, np.ndarray]:
        return {name: node.grad for name, node in self._leaves.items()}

    # -- building blocks -------------------------------------------------

    def _maybe_tanh(self, x: ad.Node) -> ad.Node:
        return ad.tanh(x) if self.model.config.projection_tanh else x

    def _cell_step(self, prefix: str, x: ad.Node, h: ad.Node) -> ad.Node:
        def gate(name, act, hin):
            return act(ad.affine_pair(
                self.p(f"{prefix}.w_{name}"), x,
                self.p(f"{prefix}.u_{name}"), hin,
                self.p(f"{prefix}.b_{name}"),
            ))

        z = gate("update", ad.sigmoid, h)
        r = gate("reset", ad.sigmoid, h)
        c = gate("cand", ad.tanh, ad.mul(r, h))
        return ad.add(ad.mul(ad.complement(z), c), ad.mul(z, h))

    def encode_question(self, question_ids: list[int]) -> ad.Node:
        prefix = self.model.cell_prefix("encoder")
        h = self.tape.leaf(np.zeros(self.model.config.d_q))
        for tid in question_ids:
            x = ad.row_lookup(self.p(f"{prefix}.embed"), tid)
            h = self._cell_step(prefix, x, h)
        return h

    def _fusion_slices(self, direction: str) -> list[tuple[ad.Node, ad.Node]]:
        cfg = self.model.config
        if cfg.fusion_backend == "mlb":
            if self._mlb_eye is None:
                self._mlb_eye = self.tape.leaf(np.eye(cfg.t))
            return [(self._mlb_eye, self._mlb_eye)]
        p = self.model.fusion_prefix(direction)
        return [
            (self.p(f"{p}.slice{r}.text"), self.p(f"{p}.slice{r}.visual"))
            for r in range(cfg.rank)
        ]

    def fuse(self, direction: str, x: ad.Node, v_proj: ad.Node) -> ad.Node:
        terms = [
            ad.mul(ad.vecmat(x, text), ad.vecmat(v_proj, visual))
            for text, visual in self._fusion_slices(direction)
        ]
        return ad.accumulate(terms)

    def attend(self, direction: str, cells: ad.Node, guide: ad.Node) -> ad.Node:
        p = self.model.attention_prefix(direction)
        g = ad.matvec(self.p(f"{p}.guide_proj"), guide)
        projected = ad.matmul_nt(cells, self.p(f"{p}.visual_proj"))
        parts = [
            ad.scalar_mul(ad.dot(g, self.p(f"{p}.slice{r}.text")),
                          ad.matvec(projected, self.p(f"{p}.slice{r}.visual")))
            for r in range(self.model.config.rank)
        ]
        weights = ad.softmax(ad.accumulate(parts))
        return ad.vecmat(weights, cells)  # cells^T @ weights

    # -- per-example loss -------------------------------------------------

    def example_terms(self, grid: np.ndarray, question_ids: list[int], answer_id: int):
        """The four scalar loss nodes for one (grid, question, answer) item."""
        c = self.model.config
        cells = self.const(grid.reshape(-1, grid.shape[-1]))

        # VQA direction
        fp_vqa = self.model.fusion_prefix("vqa")
        q = self.encode_question(question_ids)
        q_proj = self._maybe_tanh(ad.matvec(self.p(f"{fp_vqa}.question_proj"), q))
        pooled_q = self.attend("vqa", cells, q_proj)
        v_proj_q = self._maybe_tanh(ad.matvec(self.p(f"{fp_vqa}.visual_proj"), pooled_q))
        a_pred = self.fuse("vqa", q_proj, v_proj_q)

        # VQG direction
        fp_vqg = self.model.fusion_prefix("vqg")
        a_raw = ad.row_lookup(self.p(f"{self.model.table_prefix('embed')}.table"), answer_id)
        a_in = a_raw if c.skip_output_lift else ad.matvec(self.p(f"{fp_vqg}.answer_proj"), a_raw)
        pooled_a = self.attend("vqg", cells, a_in)
        v_proj_a = self._maybe_tanh(ad.matvec(self.p(f"{fp_vqg}.visual_proj"), pooled_a))
        q_pred = self.fuse("vqg", a_in, v_proj_a)

        # classification
        if c.skip_output_lift:
            cls_feature = a_pred
        else:
            cls_feature = ad.vecmat(a_pred, self.p(f"{fp_vqa}.answer_proj"))
        scores = ad.matvec(self.p(f"{self.model.table_prefix('classify')}.table"), cls_feature)
        vqa_loss = ad.cross_entropy_logits(scores, answer_id)

        # teacher-forced generation
        q_feat = q_pred if c.skip_output_lift else ad.vecmat(q_pred, self.p(f"{fp_vqg}.question_proj"))
        dec_prefix = self.model.cell_prefix("decoder")
        if c.skip_output_lift:
            h = ad.matvec(self.p("decode.h0_lift"), q_feat)
        else:
            h = q_feat
        targets = list(question_ids) + [END]
        prevs = [START] + list(question_ids)
        step_losses = []
        for prev, target in zip(prevs, targets):
            x = ad.row_lookup(self.p(f"{dec_prefix}.embed"), prev)
            h = self._cell_step(dec_prefix, x, h)
            logits = ad.linear(self.p("decode.out_w"), h, self.p("decode.out_b"))
            step_losses.append(ad.cross_entropy_logits(logits, target))
        vqg_loss = ad.mean_of(step_losses)

        # duality penalties
        if self.model.uses_duality:
            if c.skip_output_lift:
                q_dual = ad.smooth_l1(ad.sub(q_proj, q_pred))
                a_dual = ad.smooth_l1(ad.sub(a_in, a_pred))
            else:
                q_hat = ad.vecmat(q_pred, self.p(f"{fp_vqg}.question_proj"))
                q_dual = ad.smooth_l1(ad.sub(q, q_hat))
                a_dual = ad.smooth_l1(ad.sub(a_raw, cls_feature))
        else:
            q_dual = a_dual = None
        return vqa_loss, vqg_loss, q_dual, a_dual

    def example_loss(self, grid, question_ids, answer_id) -> tuple[ad.Node, dict]:
        """Weighted total for one example plus its float breakdown."""
        w = self.model.config.weights
        vqa, vqg, q_dual, a_dual = self.example_terms(grid, question_ids, answer_id)
        parts = [ad.scale(vqa, w.vqa), ad.scale(vqg, w.vqg)]
        if q_dual is not None:
            parts.append(ad.scale(q_dual, w.q_duality))
            parts.append(ad.scale(a_dual, w.a_duality))
        total = ad.accumulate(parts)
        breakdown = {
            "loss_vqa": float(vqa.value),
            "loss_vqg": float(vqg.value),
            "loss_q_duality": float(q_dual.value) if q_dual is not None else 0.0,
            "loss_a_duality": float(a_dual.value) if a_dual is not None else 0.0,
            "loss_total": float(total.value),
        }
        return total, breakdown


class BatchGraph(Graph):
    """Row-per-example variant of the training graph.

    Examples are grouped by question length so sequences batch without
    padding; each group contributes its per-example-mean terms weighted by
    its share of the batch. Semantically identical to building example_loss
    per item and averaging (a test pins the equivalence)."""

    def _cell_step_rows(self, prefix: str, x: ad.Node, h: ad.Node) -> ad.Node:
        def gate(name, act, hin):
            return act(ad.affine_rows(
                self.p(f"{prefix}.w_{name}"), x,
                self.p(f"{prefix}.u_{name}"), hin,
                self.p(f"{prefix}.b_{name}"),
            ))

        z = gate("update", ad.sigmoid, h)
        r = gate("reset", ad.sigmoid, h)
        c = gate("cand", ad.tanh, ad.mul(r, h))
        return ad.add(ad.mul(ad.complement(z), c), ad.mul(z, h))

    def encode_rows(self, id_matrix: np.ndarray) -> ad.Node:
        prefix = self.model.cell_prefix("encoder")
        h = self.tape.leaf(np.zeros((id_matrix.shape[0], self.model.config.d_q)))
        for t in range(id_matrix.shape[1]):
            x = ad.rows_lookup(self.p(f"{prefix}.embed"), id_matrix[:, t])
            h = self._cell_step_rows(prefix, x, h)
        return h

    def fuse_rows(self, direction: str, x: ad.Node, v_proj: ad.Node) -> ad.Node:
        terms = [
            ad.mul(ad.rows_mat(x, text), ad.rows_mat(v_proj, visual))
            for text, visual in self._fusion_slices(direction)
        ]
        return ad.accumulate(terms)

    def attend_rows(self, direction: str, grids: ad.Node, guide: ad.Node) -> ad.Node:
        p = self.model.attention_prefix(direction)
        g = ad.matmul_nt(guide, self.p(f"{p}.guide_proj"))
        projected = ad.cells_proj(grids, self.p(f"{p}.visual_proj"))
        parts = [
            ad.mul_col(ad.matvec(g, self.p(f"{p}.slice{r}.text")),
                       ad.contract_last(projected, self.p(f"{p}.slice{r}.visual")))
            for r in range(self.model.config.rank)
        ]
        weights = ad.softmax_rows(ad.accumulate(parts))
        return ad.pool_cells(weights, grids)

    def group_terms(self, grids: np.ndarray, id_matrix: np.ndarray, answer_ids: np.ndarray):
        """The four per-example-mean loss nodes for one same-length group."""
        c = self.model.config
        cells = self.tape.leaf(grids.reshape(grids.shape[0], -1, grids.shape[-1]))

        fp_vqa = self.model.fusion_prefix("vqa")
        q = self.encode_rows(id_matrix)
        q_proj = self._maybe_tanh(ad.matmul_nt(q, self.p(f"{fp_vqa}.question_proj")))
        pooled_q = self.attend_rows("vqa", cells, q_proj)
        v_proj_q = self._maybe_tanh(ad.matmul_nt(pooled_q, self.p(f"{fp_vqa}.visual_proj")))
        a_pred = self.fuse_rows("vqa", q_proj, v_proj_q)

        fp_vqg = self.model.fusion_prefix("vqg")
        a_raw = ad.rows_lookup(self.p(f"{self.model.table_prefix('embed')}.table"), answer_ids)
        a_in = a_raw if c.skip_output_lift else ad.matmul_nt(a_raw, self.p(f"{fp_vqg}.answer_proj"))
        pooled_a = self.attend_rows("vqg", cells, a_in)
        v_proj_a = self._maybe_tanh(ad.matmul_nt(pooled_a, self.p(f"{fp_vqg}.visual_proj")))
        q_pred = self.fuse_rows("vqg", a_in, v_proj_a)

        if c.skip_output_lift:
            cls_feature = a_pred
        else:
            cls_feature = ad.rows_mat(a_pred, self.p(f"{fp_vqa}.answer_proj"))
        scores = ad.matmul_nt(cls_feature, self.p(f"{self.model.table_prefix('classify')}.table"))
        vqa_loss = ad.cross_entropy_rows_mean(scores, answer_ids)

        q_feat = q_pred if c.skip_output_lift else ad.rows_mat(q_pred, self.p(f"{fp_vqg}.question_proj"))
        dec_prefix = self.model.cell_prefix("decoder")
        if c.skip_output_lift:
            h = ad.matmul_nt(q_feat, self.p("decode.h0_lift"))
        else:
            h = q_feat
        n, length = id_matrix.shape
        targets = np.concatenate([id_matrix, np.full((n, 1), END, dtype=id_matrix.dtype)], axis=1)
        prevs = np.concatenate([np.full((n, 1), START, dtype=id_matrix.dtype), id_matrix], axis=1)
        step_losses = []
        for t in range(length + 1):
            x = ad.rows_lookup(self.p(f"{dec_prefix}.embed"), prevs[:, t])
            h = self._cell_step_rows(dec_prefix, x, h)
            logits = ad.linear_rows(self.p("decode.out_w"), h, self.p("decode.out_b"))
            step_losses.append(ad.cross_entropy_rows_mean(logits, targets[:, t]))
        vqg_loss = ad.mean_of(step_losses)

        if self.model.uses_duality:
            if c.skip_output_lift:
                q_dual = ad.smooth_l1(ad.sub(q_proj, q_pred))
                a_dual = ad.smooth_l1(ad.sub(a_in, a_pred))
            else:
                q_hat = ad.rows_mat(q_pred, self.p(f"{fp_vqg}.question_proj"))
                q_dual = ad.smooth_l1(ad.sub(q, q_hat))
                a_dual = ad.smooth_l1(ad.sub(a_raw, cls_feature))
        else:
            q_dual = a_dual = None
        return vqa_loss, vqg_loss, q_dual, a_dual


def batch_loss(model: Model, batch) -> tuple[Graph, ad.Node, dict]:
    """Mean loss node over a batch of (grid, question_ids, answer_id).

    Questions batch by length; group terms are combined weighted by group
    size, which equals the mean of per-example losses."""
    graph = BatchGraph(model)
    w = model.config.weights
    by_length: dict[int, list[int]] = {}
    for i, (_, question_ids, _) in enumerate(batch):
        by_length.setdefault(len(question_ids), []).append(i)

    total_parts: list[ad.Node] = []
    sums: dict[str, float] = {}
    n = len(batch)
    for length in sorted(by_length):
        idx = by_length[length]
        share = len(idx) / n
        grids = np.stack([np.asarray(batch[i][0]) for i in idx])
        id_matrix = np.array([batch[i][1] for i in idx], dtype=np.intp)
        answer_ids = np.array([batch[i][2] for i in idx], dtype=np.intp)
        vqa, vqg, q_dual, a_dual = graph.group_terms(grids, id_matrix, answer_ids)
        parts = [ad.scale(vqa, share * w.vqa), ad.scale(vqg, share * w.vqg)]
        contrib = {
            "loss_vqa": float(vqa.value),
            "loss_vqg": float(vqg.value),
            "loss_q_duality": 0.0,
            "loss_a_duality": 0.0,
        }
        if q_dual is not None:
            parts.append(ad.scale(q_dual, share * w.q_duality))
            parts.append(ad.scale(a_dual, share * w.a_duality))
            contrib["loss_q_duality"] = float(q_dual.value)
            contrib["loss_a_duality"] = float(a_dual.value)
        group_total = ad.accumulate(parts)
        total_parts.append(group_total)
        contrib["loss_total"] = float(group_total.value) / share
        for key, val in contrib.items():
            sums[key] = sums.get(key, 0.0) + val * share
    total = ad.accumulate(total_parts)
    return graph, total, sums
