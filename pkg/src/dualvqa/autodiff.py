"""Reverse-mode differentiation on a define-by-run tape.

A Tape records Nodes in creation order; creation order is topological order,
so backward is a single reverse sweep. Values are float64 numpy arrays
(0-d arrays for scalars). Gradient accumulators start at zero and are summed
into, which makes shared parameters (one leaf feeding many use sites) work
with no extra bookkeeping.

Graphs are rebuilt per batch: wrap the current parameter arrays as leaves,
build the loss, call backward, read ``leaf.grad``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .linalg import ShapeError

__all__ = ["Node", "Tape", "backward", "zero_grads", "finite_difference_check"]


class Node:
    __slots__ = ("value", "grad", "parents", "rule", "tape", "index")

    def __init__(self, value: np.ndarray, parents: tuple, rule, tape: "Tape"):
        self.value = value
        self.grad = np.zeros_like(value)
        self.parents = parents
        self.rule = rule  # rule(out_grad) accumulates into parents' .grad
        self.tape = tape
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, index={self.index})"


class Tape:
    __slots__ = ("nodes", "_swept")

    def __init__(self):
        self.nodes: list[Node] = []
        self._swept = False

    def leaf(self, value) -> Node:
        """Wrap an array as an input node. The array is not copied: in-place
        updates between tapes (the optimizer) are the intended usage."""
        arr = np.asarray(value, dtype=np.float64)
        return Node(arr, (), None, self)

    def backward(self, loss: Node) -> None:
        """Add this loss's gradient into every node's accumulator.

        Leaf gradients accumulate across backward calls; interior adjoints
        are sweep-local (cleared at the start of each sweep), so repeated
        backward calls sum leaf contributions rather than compounding.
        """
        if loss.value.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if loss.tape is not self:
            raise ValueError("loss node does not belong to this tape")
        nodes = self.nodes[: loss.index + 1]
        if self._swept:
            for node in nodes:
                if node.rule is not None:
                    node.grad.fill(0.0)
        self._swept = True
        if loss.rule is None:
            loss.grad += 1.0
        else:
            loss.grad[...] = 1.0
        for node in reversed(nodes):
            if node.rule is not None:
                node.rule(node.grad)

    def zero_grads(self) -> None:
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)
        self._swept = False


def backward(tape: Tape, loss: Node) -> None:
    tape.backward(loss)


def zero_grads(tape: Tape) -> None:
    tape.zero_grads()


# ---------------------------------------------------------------------------
# Operations. Each returns a new Node on the tape of its first Node argument.
# ---------------------------------------------------------------------------


def _node(value, parents, rule) -> Node:
    return Node(np.asarray(value, dtype=np.float64), parents, rule, parents[0].tape)


def _same_shape(a: Node, b: Node, op: str):
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")

    def rule(g):
        a.grad += g
        b.grad += g

    return _node(a.value + b.value, (a, b), rule)


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")

    def rule(g):
        a.grad += g
        b.grad -= g

    return _node(a.value - b.value, (a, b), rule)


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")

    def rule(g):
        a.grad += g * b.value
        b.grad += g * a.value

    return _node(a.value * b.value, (a, b), rule)


def scale(a: Node, c: float) -> Node:
    """Multiply by a plain (non-differentiated) scalar constant."""
    c = float(c)

    def rule(g):
        a.grad += c * g

    return _node(c * a.value, (a,), rule)


def complement(a: Node) -> Node:
    """1 - a, elementwise."""

    def rule(g):
        a.grad -= g

    return _node(1.0 - a.value, (a,), rule)


def matvec(m: Node, x: Node) -> Node:
    if m.value.ndim != 2 or x.value.ndim != 1 or m.value.shape[1] != x.value.shape[0]:
        raise ShapeError(f"matvec: {m.value.shape} @ {x.value.shape}")

    def rule(g):
        m.grad += g[:, None] * x.value
        x.grad += m.value.T @ g

    return _node(m.value @ x.value, (m, x), rule)


def vecmat(x: Node, m: Node) -> Node:
    """x^T M as a vector, i.e. M^T @ x."""
    if m.value.ndim != 2 or x.value.ndim != 1 or m.value.shape[0] != x.value.shape[0]:
        raise ShapeError(f"vecmat: {x.value.shape} @ {m.value.shape}")

    def rule(g):
        x.grad += m.value @ g
        m.grad += x.value[:, None] * g

    return _node(m.value.T @ x.value, (x, m), rule)


def matmul_nt(a: Node, b: Node) -> Node:
    """a @ b^T for two matrices (rows of `a` pushed through the map `b`)."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[1]:
        raise ShapeError(f"matmul_nt: {a.value.shape} @ {b.value.shape}^T")

    def rule(g):
        a.grad += g @ b.value
        b.grad += g.T @ a.value

    return _node(a.value @ b.value.T, (a, b), rule)


def linear(w: Node, x: Node, b: Node) -> Node:
    """w @ x + b in one node."""
    if w.value.ndim != 2 or w.value.shape[1] != x.value.shape[0] or b.value.shape != (w.value.shape[0],):
        raise ShapeError(f"linear: {w.value.shape} @ {x.value.shape} + {b.value.shape}")

    def rule(g):
        w.grad += g[:, None] * x.value
        x.grad += w.value.T @ g
        b.grad += g

    return _node(w.value @ x.value + b.value, (w, x, b), rule)


def affine_pair(w: Node, x: Node, u: Node, h: Node, b: Node) -> Node:
    """w @ x + u @ h + b in one node (the recurrent-gate preactivation)."""
    if (
        w.value.shape[1] != x.value.shape[0]
        or u.value.shape[1] != h.value.shape[0]
        or w.value.shape[0] != u.value.shape[0]
        or b.value.shape != (w.value.shape[0],)
    ):
        raise ShapeError(
            f"affine_pair: {w.value.shape}@{x.value.shape} + {u.value.shape}@{h.value.shape} + {b.value.shape}"
        )

    def rule(g):
        w.grad += g[:, None] * x.value
        x.grad += w.value.T @ g
        u.grad += g[:, None] * h.value
        h.grad += u.value.T @ g
        b.grad += g

    return _node(w.value @ x.value + u.value @ h.value + b.value, (w, x, u, h, b), rule)


def dot(u: Node, v: Node) -> Node:
    _same_shape(u, v, "dot")

    def rule(g):
        u.grad += g * v.value
        v.grad += g * u.value

    return _node(u.value @ v.value, (u, v), rule)


def scalar_mul(s: Node, x: Node) -> Node:
    """Scalar node times array node."""
    if s.value.shape != ():
        raise ShapeError("scalar_mul: first argument must be a scalar node")

    def rule(g):
        s.grad += np.sum(g * x.value)
        x.grad += float(s.value) * g

    return _node(float(s.value) * x.value, (s, x), rule)


def sum_all(x: Node) -> Node:
    def rule(g):
        x.grad += g  # broadcasts the 0-d gradient

    return _node(x.value.sum(), (x,), rule)


def mean_all(x: Node) -> Node:
    n = x.value.size

    def rule(g):
        x.grad += g / n

    return _node(x.value.mean(), (x,), rule)


def stack(parts: Sequence[Node]) -> Node:
    """Stack scalar nodes into a vector."""
    parts = tuple(parts)

    def rule(g):
        for i, p in enumerate(parts):
            p.grad += g[i]

    return _node(np.array([float(p.value) for p in parts]), parts, rule)


def row_lookup(m: Node, i: int) -> Node:
    if not 0 <= i < m.value.shape[0]:
        raise IndexError(f"row {i} out of range for {m.value.shape[0]} rows")

    def rule(g):
        m.grad[i] += g

    return _node(m.value[i].copy(), (m,), rule)


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)

    def rule(g):
        x.grad += g * (1.0 - y * y)

    return _node(y, (x,), rule)


def sigmoid(x: Node) -> Node:
    y = 1.0 / (1.0 + np.exp(-x.value))

    def rule(g):
        x.grad += g * y * (1.0 - y)

    return _node(y, (x,), rule)


def softmax(x: Node) -> Node:
    """Softmax over a vector, computed with max subtraction."""
    z = np.exp(x.value - x.value.max())
    y = z / z.sum()

    def rule(g):
        x.grad += y * (g - np.dot(y, g))

    return _node(y, (x,), rule)


def cross_entropy_logits(scores: Node, target: int) -> Node:
    """Negative log softmax probability of `target` under `scores`."""
    s = scores.value
    if not 0 <= target < s.shape[0]:
        raise IndexError(f"target {target} out of range for {s.shape[0]} classes")
    m = s.max()
    lse = m + np.log(np.exp(s - m).sum())
    probs = np.exp(s - lse)

    def rule(g):
        delta = probs.copy()
        delta[target] -= 1.0
        scores.grad += float(g) * delta

    return _node(lse - s[target], (scores,), rule)


def smooth_l1(x: Node) -> Node:
    """Mean over coordinates of the Huber-style penalty
    0.5*x^2 for |x| < 1, |x| - 0.5 otherwise."""
    v = x.value
    ax = np.abs(v)
    per = np.where(ax < 1.0, 0.5 * v * v, ax - 0.5)
    n = v.size

    def rule(g):
        x.grad += float(g) * np.clip(v, -1.0, 1.0) / n

    return _node(per.mean(), (x,), rule)


def full_bilinear3(t: Node, q: Node, v: Node) -> Node:
    """out[k] = sum_{i,j} t[i,j,k] * q[i] * v[j]."""
    tv, qv, vv = t.value, q.value, v.value
    if tv.ndim != 3 or tv.shape[0] != qv.shape[0] or tv.shape[1] != vv.shape[0]:
        raise ShapeError(f"full_bilinear3: {tv.shape} with {qv.shape}, {vv.shape}")

    def rule(g):
        t.grad += np.einsum("i,j,k->ijk", qv, vv, g)
        q.grad += np.einsum("ijk,j,k->i", tv, vv, g)
        v.grad += np.einsum("ijk,i,k->j", tv, qv, g)

    return _node(np.einsum("ijk,i,j->k", tv, qv, vv), (t, q, v), rule)


# ---------------------------------------------------------------------------
# Batched (row-per-example) operations
# ---------------------------------------------------------------------------


def rows_lookup(m: Node, ids) -> Node:
    """Gather rows m[ids]; duplicate ids accumulate gradient into one row."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1 or np.any(ids < 0) or np.any(ids >= m.value.shape[0]):
        raise IndexError("row ids out of range")

    def rule(g):
        np.add.at(m.grad, ids, g)

    return _node(m.value[ids], (m,), rule)


def affine_rows(w: Node, x: Node, u: Node, h: Node, b: Node) -> Node:
    """Row-wise W @ x_i + U @ h_i + b, i.e. X W^T + H U^T + b."""
    if (
        x.value.shape[1] != w.value.shape[1]
        or h.value.shape[1] != u.value.shape[1]
        or w.value.shape[0] != u.value.shape[0]
        or b.value.shape != (w.value.shape[0],)
    ):
        raise ShapeError(
            f"affine_rows: {x.value.shape}x{w.value.shape} + {h.value.shape}x{u.value.shape} + {b.value.shape}"
        )

    def rule(g):
        w.grad += g.T @ x.value
        x.grad += g @ w.value
        u.grad += g.T @ h.value
        h.grad += g @ u.value
        b.grad += g.sum(axis=0)

    return _node(x.value @ w.value.T + h.value @ u.value.T + b.value, (w, x, u, h, b), rule)


def linear_rows(w: Node, x: Node, b: Node) -> Node:
    """Row-wise W @ x_i + b."""
    if x.value.shape[1] != w.value.shape[1] or b.value.shape != (w.value.shape[0],):
        raise ShapeError(f"linear_rows: {x.value.shape}x{w.value.shape} + {b.value.shape}")

    def rule(g):
        w.grad += g.T @ x.value
        x.grad += g @ w.value
        b.grad += g.sum(axis=0)

    return _node(x.value @ w.value.T + b.value, (w, x, b), rule)


def rows_mat(x: Node, m: Node) -> Node:
    """X @ M (each row of X pushed through M's columns)."""
    if x.value.ndim != 2 or x.value.shape[1] != m.value.shape[0]:
        raise ShapeError(f"rows_mat: {x.value.shape} @ {m.value.shape}")

    def rule(g):
        x.grad += g @ m.value.T
        m.grad += x.value.T @ g

    return _node(x.value @ m.value, (x, m), rule)


def softmax_rows(x: Node) -> Node:
    z = np.exp(x.value - x.value.max(axis=1, keepdims=True))
    y = z / z.sum(axis=1, keepdims=True)

    def rule(g):
        x.grad += y * (g - (y * g).sum(axis=1, keepdims=True))

    return _node(y, (x,), rule)


def cross_entropy_rows_mean(scores: Node, targets) -> Node:
    """Mean over rows of the negative log softmax probability of each target."""
    targets = np.asarray(targets, dtype=np.intp)
    s = scores.value
    if targets.shape != (s.shape[0],) or np.any(targets < 0) or np.any(targets >= s.shape[1]):
        raise IndexError("targets out of range")
    m = s.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(s - m).sum(axis=1))
    probs = np.exp(s - lse[:, None])
    n = s.shape[0]
    rows = np.arange(n)

    def rule(g):
        delta = probs.copy()
        delta[rows, targets] -= 1.0
        scores.grad += (float(g) / n) * delta

    return _node((lse - s[rows, targets]).mean(), (scores,), rule)


def cells_proj(grids: Node, w: Node) -> Node:
    """Project every cell of every example: (B, C, d) x (t, d) -> (B, C, t)."""
    gv, wv = grids.value, w.value
    if gv.ndim != 3 or gv.shape[2] != wv.shape[1]:
        raise ShapeError(f"cells_proj: {gv.shape} with {wv.shape}")
    b, c, d = gv.shape
    flat = gv.reshape(b * c, d)

    def rule(g):
        gf = g.reshape(b * c, -1)
        w.grad += gf.T @ flat
        grids.grad += (gf @ wv).reshape(b, c, d)

    return _node((flat @ wv.T).reshape(b, c, wv.shape[0]), (grids, w), rule)


def contract_last(p: Node, w: Node) -> Node:
    """(B, C, t) x (t,) -> (B, C)."""
    if p.value.ndim != 3 or w.value.shape != (p.value.shape[2],):
        raise ShapeError(f"contract_last: {p.value.shape} with {w.value.shape}")

    def rule(g):
        p.grad += g[:, :, None] * w.value
        w.grad += np.einsum("bc,bct->t", g, p.value)

    return _node(p.value @ w.value, (p, w), rule)


def mul_col(s: Node, x: Node) -> Node:
    """Scale each row of X by the matching entry of s: s[:, None] * X."""
    if s.value.shape != (x.value.shape[0],):
        raise ShapeError(f"mul_col: {s.value.shape} with {x.value.shape}")

    def rule(g):
        s.grad += (g * x.value).sum(axis=1)
        x.grad += s.value[:, None] * g

    return _node(s.value[:, None] * x.value, (s, x), rule)


def pool_cells(weights: Node, grids: Node) -> Node:
    """Weighted sum of cells per example: (B, C) x (B, C, d) -> (B, d)."""
    if grids.value.ndim != 3 or weights.value.shape != grids.value.shape[:2]:
        raise ShapeError(f"pool_cells: {weights.value.shape} with {grids.value.shape}")

    def rule(g):
        weights.grad += np.einsum("bd,bcd->bc", g, grids.value)
        grids.grad += weights.value[:, :, None] * g[:, None, :]

    return _node(np.einsum("bc,bcd->bd", weights.value, grids.value), (weights, grids), rule)


def accumulate(parts: Sequence[Node]) -> Node:
    """Sum of same-shaped nodes."""
    out = parts[0]
    for p in parts[1:]:
        out = add(out, p)
    return out


def mean_of(parts: Sequence[Node]) -> Node:
    return scale(accumulate(parts), 1.0 / len(parts))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

LossAndGrads = Callable[[dict], tuple]


def finite_difference_check(f: LossAndGrads, params: dict, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f(params)` must return ``(loss, grads)`` where `loss` is a finite float
    and `grads` maps every key of `params` to an array of matching shape.
    The error metric per coordinate is |analytic - numeric| / max(1, |analytic|).
    Perturbation happens in place; arrays are restored before returning.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    loss0, grads = f(params)
    if not np.isfinite(loss0):
        raise ValueError(f"loss is not finite: {loss0}")
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        gflat = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up, _ = f(params)
            flat[i] = saved - step
            down, _ = f(params)
            flat[i] = saved
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError(f"loss not finite when perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
