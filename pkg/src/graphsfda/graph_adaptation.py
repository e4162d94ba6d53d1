"""Graph-side adaptation: learned feature offsets and a budgeted edge mask.

Features move by plain gradient descent on an additive offset. Structure
moves by projected gradient descent on a relaxed per-edge deletion mask
delta in [0,1]^e whose total mass stays under a budget; the projection
clips into the box and, when the budget binds, shifts by a bisection-found
multiplier. An edge with mask delta carries weight 1 - delta through the
normalized adjacency, so delta = 1 reproduces deletion exactly, and the
final discrete graph is drawn once, edge e kept with probability 1 - delta_e.

The training signal is a self-training loss: cross-entropy on
high-confidence nodes plus a neighborhood contrast that pulls each node
toward its nearest bank entries and pushes it from differently-labelled
ones. Bank rows are frozen constants; gradients flow only through the live
forward pass.
"""

from __future__ import annotations

import numpy as np

from .banks import MemoryBanks
from .errors import ContractError, ShapeError
from .graph_store import AdjacencyLayout, TargetGraph
from .numerics import (
    DenseMatrix,
    Tape,
    Tensor,
    add,
    add_scalar,
    concat_rows,
    gather_rows,
    l2_normalize_rows,
    log_clamped,
    matmul,
    mean_all,
    mul,
    mul_scalar,
    neg,
    pow_scalar,
    segment_sum,
    select_cols,
    sum_all,
)

__all__ = [
    "AdaptationDeltas",
    "ConfidentSet",
    "ContrastSets",
    "apply_feature_delta",
    "apply_structure_delta",
    "masked_adjacency_on_tape",
    "select_confident",
    "knn_positives",
    "label_negatives",
    "loss_graph",
    "project_budget",
    "pgd_step_structure",
    "feature_gd_step",
    "finalize_structure",
]


class AdaptationDeltas:
    """Feature offset plus relaxed per-edge deletion mask under a budget."""

    __slots__ = ("delta_x", "delta_a", "budget")

    def __init__(self, delta_x: np.ndarray, delta_a: np.ndarray, budget: float):
        delta_x = np.asarray(delta_x, dtype=np.float64)
        delta_a = np.asarray(delta_a, dtype=np.float64).ravel()
        if not np.isfinite(delta_x).all():
            raise ContractError("feature delta must be finite")
        if delta_a.size and (delta_a.min() < 0.0 or delta_a.max() > 1.0):
            raise ContractError("edge mask entries must lie in [0,1]")
        if delta_a.sum() > budget + 1e-6:
            raise ContractError(
                f"edge mask mass {delta_a.sum():.6g} exceeds budget {budget:.6g}"
            )
        self.delta_x = delta_x
        self.delta_a = delta_a
        self.budget = float(budget)

    @classmethod
    def zeros(cls, n: int, d: int, num_edges: int, budget: float) -> "AdaptationDeltas":
        return cls(np.zeros((n, d)), np.zeros(num_edges), budget)

    def copy(self) -> "AdaptationDeltas":
        return AdaptationDeltas(self.delta_x.copy(), self.delta_a.copy(), self.budget)


class ConfidentSet:
    """Nodes whose own max predicted probability clears the threshold."""

    __slots__ = ("node_ids", "labels", "threshold")

    def __init__(self, node_ids: np.ndarray, labels: np.ndarray, threshold: float):
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.threshold = threshold

    def __len__(self):
        return self.node_ids.size


class ContrastSets:
    """Per-node positive (top-K bank) and negative (label-mismatch) indices."""

    __slots__ = ("positives", "negatives")

    def __init__(self, positives: np.ndarray, negatives: list):
        self.positives = positives
        self.negatives = negatives


def apply_feature_delta(x, deltas):
    """X plus the learned offset; recorded when either side is live."""
    dx = deltas.delta_x if isinstance(deltas, AdaptationDeltas) else deltas
    if isinstance(x, Tensor) or isinstance(dx, Tensor):
        return add(x, dx)
    xv = x.a if isinstance(x, DenseMatrix) else np.asarray(x, dtype=np.float64)
    if xv.shape != dx.shape:
        raise ShapeError(f"feature delta {dx.shape} does not match features {xv.shape}")
    return DenseMatrix.from_array(xv + dx)


def apply_structure_delta(g: TargetGraph, deltas):
    """Per-edge weights 1 - delta for the normalized adjacency."""
    da = deltas.delta_a if isinstance(deltas, AdaptationDeltas) else deltas
    if isinstance(da, Tensor):
        return add_scalar(neg(da), 1.0)
    da = np.asarray(da, dtype=np.float64).ravel()
    if da.shape != (g.num_edges,):
        raise ContractError(
            f"edge mask has {da.shape[0]} entries for {g.num_edges} edges"
        )
    return 1.0 - da


def masked_adjacency_on_tape(layout: AdjacencyLayout, edge_weights: Tensor):
    """Normalized adjacency entries as a live function of edge weights.

    Returns `(vals, rows, cols, n)` for the COO product inside a recorded
    forward pass. One value per undirected edge feeds both mirror slots, so
    the matrix stays exactly symmetric.
    """
    e = layout.edge_u.size
    dup = gather_rows(edge_weights, np.concatenate([np.arange(e), np.arange(e)]))
    seg = np.concatenate([layout.edge_u, layout.edge_v])
    deg = add_scalar(segment_sum(dup, seg, layout.n), 1.0)
    s = pow_scalar(deg, -0.5)
    per_edge = mul(
        mul(edge_weights, gather_rows(s, layout.edge_u)), gather_rows(s, layout.edge_v)
    )
    per_diag = mul(s, s)
    vals = gather_rows(concat_rows(per_edge, per_diag), layout.entry_source)
    return vals, layout.rows_expanded(), layout.col_indices, layout.n


def select_confident(p, threshold: float) -> ConfidentSet:
    """Nodes with max class probability strictly above the threshold."""
    if not (0.0 < threshold < 1.0):
        raise ContractError(f"threshold must lie in (0,1), got {threshold}")
    pv = p.a if isinstance(p, DenseMatrix) else np.asarray(p, dtype=np.float64)
    best = pv.max(axis=1)
    ids = np.nonzero(best > threshold)[0]
    return ConfidentSet(ids, np.argmax(pv[ids], axis=1), threshold)


def knn_positives(z, banks: MemoryBanks, k: int) -> np.ndarray:
    """Top-k cosine-similar bank rows per node, self excluded, ties to the
    lower index."""
    zv = z.a if isinstance(z, DenseMatrix) else np.asarray(z, dtype=np.float64)
    n = banks.n
    if not (1 <= k < n):
        raise ContractError(f"k must lie in [1, {n}), got {k}")
    sims = _cosine_matrix(zv, banks.repr_bank)
    np.fill_diagonal(sims, -np.inf)
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


def _cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = _safe_normalize(a)
    bn = _safe_normalize(b)
    return an @ bn.T


def _safe_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms < 1e-12, 1.0, norms)


def label_negatives(p, banks: MemoryBanks, positives: np.ndarray) -> list:
    """Bank indices whose banked argmax disagrees with the node's own live
    argmax, minus that node's positives."""
    pv = p.a if isinstance(p, DenseMatrix) else np.asarray(p, dtype=np.float64)
    own = np.argmax(pv, axis=1)
    banked = np.argmax(banks.pred_bank, axis=1)
    out = []
    for i in range(pv.shape[0]):
        mism = np.nonzero(banked != own[i])[0]
        out.append(np.setdiff1d(mism, positives[i], assume_unique=False))
    return out


def _pair_mask(shape: tuple, per_node_indices) -> np.ndarray:
    mask = np.zeros(shape)
    for i, idx in enumerate(per_node_indices):
        mask[i, np.asarray(idx, dtype=np.int64)] = 1.0
    return mask


def loss_graph(
    p,
    z,
    banks: MemoryBanks,
    conf: ConfidentSet,
    sets: ContrastSets,
    alpha: float,
    beta: float,
):
    """Confident-node cross-entropy plus neighborhood contrast.

    The contrast terms are raw cosine sums against frozen bank rows: the
    positive sum is subtracted (weight alpha), the negative sum added
    (weight beta). An empty confident set contributes zero cross-entropy.
    """
    if alpha < 0 or beta < 0:
        raise ContractError(f"alpha and beta must be nonnegative, got {alpha}, {beta}")
    if isinstance(p, Tensor) or isinstance(z, Tensor):
        return _loss_graph_t(p, z, banks, conf, sets, alpha, beta)
    tape = Tape()
    out = _loss_graph_t(
        tape.leaf(p.a if isinstance(p, DenseMatrix) else p),
        tape.leaf(z.a if isinstance(z, DenseMatrix) else z),
        banks,
        conf,
        sets,
        alpha,
        beta,
    )
    return float(out.value[0, 0])


def _loss_graph_t(p, z, banks, conf, sets, alpha, beta) -> Tensor:
    shape = (z.value.shape[0], banks.n)
    zn = l2_normalize_rows(z)
    bank_sims = matmul(zn, _safe_normalize(banks.repr_bank).T.copy())
    pos_sum = sum_all(mul(bank_sims, _pair_mask(shape, sets.positives)))
    neg_sum = sum_all(mul(bank_sims, _pair_mask(shape, sets.negatives)))
    total = add(mul_scalar(pos_sum, -alpha), mul_scalar(neg_sum, beta))
    if len(conf):
        picked = select_cols(gather_rows(p, conf.node_ids), conf.labels)
        ce = neg(mean_all(log_clamped(picked)))
        total = add(ce, total)
    return total


def project_budget(v, budget: float) -> np.ndarray:
    """Euclidean-style projection into { x in [0,1]^e : sum(x) <= budget }.

    Clipping into the box suffices when the budget has slack; otherwise a
    bisection on the shift multiplier drives the clipped sum onto the budget
    to within 1e-9. Projecting a feasible point returns it unchanged.
    """
    if budget < 0:
        raise ContractError(f"budget must be nonnegative, got {budget}")
    v = np.asarray(v, dtype=np.float64).ravel()
    clipped = np.clip(v, 0.0, 1.0)
    if clipped.sum() <= budget:
        return clipped
    # accept only the feasible side of the |residual| <= 1e-9 band, so the
    # output sum never exceeds the budget and re-projection is a no-op
    lo, hi = 0.0, float(v.max())
    gamma = hi
    for _ in range(500):
        mid = 0.5 * (lo + hi)
        residual = np.clip(v - mid, 0.0, 1.0).sum() - budget
        if -1e-9 <= residual <= 0.0:
            gamma = mid
            break
        if residual > 0:
            lo = mid
        else:
            hi = mid
    else:
        gamma = hi  # residual(hi) <= 0, so the budget holds
    return np.clip(v - gamma, 0.0, 1.0)


def pgd_step_structure(
    deltas: AdaptationDeltas, grad: np.ndarray, step: float, budget: float
) -> AdaptationDeltas:
    """Gradient step on the edge mask followed by the budget projection.

    A zero step size degenerates to re-projecting the current (feasible)
    mask, which leaves it unchanged."""
    if step < 0:
        raise ContractError(f"step size must be nonnegative, got {step}")
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != deltas.delta_a.shape:
        raise ShapeError(f"mask grad {grad.shape} vs mask {deltas.delta_a.shape}")
    new_a = project_budget(deltas.delta_a - step * grad, budget)
    return AdaptationDeltas(deltas.delta_x, new_a, budget)


def feature_gd_step(
    deltas: AdaptationDeltas, grad: np.ndarray, step: float
) -> AdaptationDeltas:
    """Unconstrained gradient step on the feature offset."""
    if step < 0:
        raise ContractError(f"step size must be nonnegative, got {step}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != deltas.delta_x.shape:
        raise ShapeError(f"feature grad {grad.shape} vs delta {deltas.delta_x.shape}")
    return AdaptationDeltas(deltas.delta_x - step * grad, deltas.delta_a, deltas.budget)


def finalize_structure(g: TargetGraph, deltas: AdaptationDeltas, seed: int) -> TargetGraph:
    """Draw the discrete graph: edge e survives with probability 1 - delta_e."""
    if deltas.delta_a.shape != (g.num_edges,):
        raise ContractError(
            f"mask has {deltas.delta_a.shape[0]} entries for {g.num_edges} edges"
        )
    rng = np.random.default_rng(seed)
    keep = rng.random(g.num_edges) < (1.0 - deltas.delta_a)
    edges = [edge for edge, kept in zip(g.edges, keep) if kept]
    return TargetGraph(g.n, edges, g.features, g.labels, g.num_classes)
