"""End-to-end adaptation loop.

Each epoch alternates: several model updates against the adaptation loss
(deltas frozen, banks refreshed after every step), then feature-offset
steps and budget-projected structure steps against the graph loss (model
frozen). After the last epoch the continuous edge mask is sampled once into
a discrete refined graph and predictions are read off a final forward pass.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .banks import init_banks, momentum_update
from .errors import ContractError, NumericalError
from .gnn import AdamState, ForwardOutput, GnnModel, forward, forward_on_tape
from .graph_adaptation import (
    AdaptationDeltas,
    ContrastSets,
    apply_feature_delta,
    apply_structure_delta,
    feature_gd_step,
    finalize_structure,
    knn_positives,
    label_negatives,
    loss_graph as _loss_graph,
    masked_adjacency_on_tape,
    pgd_step_structure,
    select_confident,
)
from .graph_store import (
    AdjacencyLayout,
    TargetGraph,
    neighbor_lists,
    normalize_adjacency,
)
from .model_adaptation import (
    compute_prototypes,
    confidence_weights,
    loss_instance_prototype,
    loss_model,
    loss_weighted_ce,
    neighborhood_pseudo_labels,
)
from .numerics import DenseMatrix, SparseAdjacency, Tape, backward

__all__ = ["AdaptConfig", "AdaptReport", "adapt", "evaluate_accuracy", "export_embeddings"]

CONVERGENCE_TOL = 1e-6
CONVERGENCE_PATIENCE = 10


@dataclass
class AdaptConfig:
    """All adaptation hyperparameters, with the documented defaults."""

    contrast_mix: float = 0.2  # weight of the instance-prototype term in the model loss
    positive_weight: float = 0.5
    negative_weight: float = 0.5
    temperature: float = 0.2
    confidence_threshold: float = 0.9
    k_neighbors: int = 5
    bank_momentum: float = 0.9
    budget_fraction: float = 0.2
    model_lr: float = 1e-3
    delta_lr: float = 0.01
    model_steps: int = 1
    feature_steps: int = 1
    structure_steps: int = 1
    epochs: int = 200
    num_layers: int = 2
    hidden_dim: int = 128
    seed: int = 0
    batch_size: int = 0  # 0 = contrast against the full graph
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if not (0.0 <= self.contrast_mix <= 1.0):
            raise ContractError("contrast_mix must lie in [0,1]")
        if self.positive_weight < 0 or self.negative_weight < 0:
            raise ContractError("contrast weights must be nonnegative")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if not (0.0 < self.confidence_threshold < 1.0):
            raise ContractError("confidence_threshold must lie in (0,1)")
        if self.k_neighbors < 1:
            raise ContractError("k_neighbors must be at least 1")
        if not (0.0 <= self.bank_momentum <= 1.0):
            raise ContractError("bank_momentum must lie in [0,1]")
        if not (0.0 <= self.budget_fraction <= 1.0):
            raise ContractError("budget_fraction must lie in [0,1]")
        if min(self.model_steps, self.feature_steps, self.structure_steps) < 0:
            raise ContractError("loop counts must be nonnegative")
        if self.epochs < 0:
            raise ContractError("epochs must be nonnegative")


@dataclass
class AdaptReport:
    """Per-epoch traces plus the final outcome. Entries are None for phases
    that ran zero steps in that epoch. `deltas` carries the learned feature
    offset and edge mask for export; it stays out of the JSON document."""

    loss_model_trace: list = field(default_factory=list)
    loss_graph_trace: list = field(default_factory=list)
    accuracy_trace: list = field(default_factory=list)
    final_accuracy: float | None = None
    edges_deleted: int = 0
    seconds: float = 0.0
    deltas: AdaptationDeltas | None = None

    def to_json_dict(self) -> dict:
        return {
            "loss_m": self.loss_model_trace,
            "loss_g": self.loss_graph_trace,
            "acc": self.accuracy_trace,
            "final_acc": self.final_accuracy,
            "edges_deleted": self.edges_deleted,
            "seconds": self.seconds,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2), encoding="utf-8")


def evaluate_accuracy(predictions, labels) -> float:
    """Fraction of exact matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError(
            f"{predictions.shape[0]} predictions vs {labels.shape[0]} labels"
        )
    if predictions.size == 0:
        return 0.0
    return float(np.mean(predictions == labels))


def _check_finite(value: float, term: str) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"{term} became non-finite ({value})")
    return value


def _frozen_adjacency(layout: AdjacencyLayout, weights: np.ndarray) -> SparseAdjacency:
    return SparseAdjacency(
        layout.n, layout.row_offsets, layout.col_indices, layout.entry_values(weights)
    )


def adapt(model: GnnModel, g: TargetGraph, cfg: AdaptConfig):
    """Run the full adaptation and return

    (adapted model, refined target graph, argmax predictions, report).

    Deterministic for fixed (model, graph, config). With all loop counts or
    epochs at zero the predictions coincide bit-for-bit with the unadapted
    model on the unmodified graph.
    """
    if model.input_dim != g.feature_dim:
        raise ContractError(
            f"model expects {model.input_dim}-dim features, graph has {g.feature_dim}"
        )
    if g.num_classes and model.num_classes != g.num_classes:
        raise ContractError(
            f"model has {model.num_classes} classes, graph meta says {g.num_classes}"
        )
    started = time.perf_counter()
    model = model.copy()
    n, e = g.n, g.num_edges
    budget = cfg.budget_fraction * e
    deltas = AdaptationDeltas.zeros(n, g.feature_dim, e, budget)
    layout = AdjacencyLayout(n, g.edges)
    x_base = g.features.a

    banks = init_banks(forward(model, normalize_adjacency(g), g.features), cfg.bank_momentum)
    opt = AdamState([p.shape for p in model.parameters()], cfg.model_lr)

    seed_seq = np.random.SeedSequence(cfg.seed)
    batch_ss, final_ss = seed_seq.spawn(2)
    batch_rng = np.random.default_rng(batch_ss)
    finalize_seed = int(final_ss.generate_state(1)[0])

    report = AdaptReport()
    quiet_epochs = 0
    prev = (None, None)
    for _ in range(cfg.epochs):
        weights = apply_structure_delta(g, deltas)
        adj = _frozen_adjacency(layout, weights)
        x_prime = x_base + deltas.delta_x
        neighbors = neighbor_lists(g, edge_keep=weights > 0.0)

        loss_m = None
        for _ in range(cfg.model_steps):
            pl = neighborhood_pseudo_labels(neighbors, banks)
            protos = compute_prototypes(pl, banks)
            tape = Tape()
            params = [tape.leaf(p) for p in model.parameters()]
            z, p = forward_on_tape(tape, params, adj, x_prime)
            w = confidence_weights(z, protos, pl)
            l_ce = loss_weighted_ce(p, pl, w)
            batch = None
            if cfg.batch_size:
                batch = batch_rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            l_co = loss_instance_prototype(
                z,
                protos,
                pl,
                cfg.temperature,
                batch_indices=batch,
                include_positive_in_denominator=cfg.include_positive_in_denominator,
            )
            _check_finite(float(l_ce.value[0, 0]), "weighted cross-entropy (model loss)")
            _check_finite(float(l_co.value[0, 0]), "instance-prototype contrast (model loss)")
            l_m = loss_model(l_ce, l_co, cfg.contrast_mix)
            backward(tape, l_m)
            opt.step(model.parameters(), [t.grad for t in params])
            banks = momentum_update(banks, ForwardOutput(z.matrix(), p.matrix()))
            loss_m = float(l_m.value[0, 0])

        loss_g = None
        model_params = model.parameters()
        for _ in range(cfg.feature_steps):
            tape = Tape()
            dx = tape.leaf(deltas.delta_x)
            z, p = forward_on_tape(tape, model_params, adj, apply_feature_delta(x_base, dx))
            l_g = _graph_loss_on_tape(p, z, banks, cfg)
            loss_g = _check_finite(float(l_g.value[0, 0]), "graph adaptation loss")
            backward(tape, l_g)
            deltas = feature_gd_step(deltas, dx.grad, cfg.delta_lr)

        for _ in range(cfg.structure_steps):
            tape = Tape()
            da = tape.leaf(deltas.delta_a.reshape(-1, 1))
            adj_live = masked_adjacency_on_tape(layout, apply_structure_delta(g, da))
            z, p = forward_on_tape(tape, model_params, adj_live, x_base + deltas.delta_x)
            l_g = _graph_loss_on_tape(p, z, banks, cfg)
            loss_g = _check_finite(float(l_g.value[0, 0]), "graph adaptation loss")
            backward(tape, l_g)
            deltas = pgd_step_structure(deltas, da.grad.ravel(), cfg.delta_lr, budget)

        report.loss_model_trace.append(loss_m)
        report.loss_graph_trace.append(loss_g)
        if g.labels is not None:
            adj_now = _frozen_adjacency(layout, apply_structure_delta(g, deltas))
            fo = forward(model, adj_now, DenseMatrix.from_array(x_base + deltas.delta_x))
            pred = np.argmax(fo.predictions.a, axis=1)
            report.accuracy_trace.append(evaluate_accuracy(pred, g.labels))

        assert deltas.delta_a.sum() <= budget + 1e-6

        delta_m = _trace_delta(prev[0], loss_m)
        delta_g = _trace_delta(prev[1], loss_g)
        prev = (loss_m, loss_g)
        if delta_m < CONVERGENCE_TOL and delta_g < CONVERGENCE_TOL:
            quiet_epochs += 1
            if quiet_epochs >= CONVERGENCE_PATIENCE:
                break
        else:
            quiet_epochs = 0

    sampled = finalize_structure(g, deltas, finalize_seed)
    refined = TargetGraph(
        n,
        sampled.edges,
        DenseMatrix.from_array(x_base + deltas.delta_x),
        g.labels,
        g.num_classes,
    )
    fo = forward(model, normalize_adjacency(refined), refined.features)
    predictions = np.argmax(fo.predictions.a, axis=1)
    report.edges_deleted = e - refined.num_edges
    if g.labels is not None:
        report.final_accuracy = evaluate_accuracy(predictions, g.labels)
    report.deltas = deltas
    report.seconds = time.perf_counter() - started
    return model, refined, predictions, report


def _trace_delta(before, after) -> float:
    if before is None and after is None:
        return 0.0
    if before is None or after is None:
        return float("inf")
    return abs(after - before)


def _graph_loss_on_tape(p, z, banks, cfg: AdaptConfig):
    conf = select_confident(p.value, cfg.confidence_threshold)
    positives = knn_positives(z.value, banks, cfg.k_neighbors)
    negatives = label_negatives(p.value, banks, positives)
    return _loss_graph(
        p,
        z,
        banks,
        conf,
        ContrastSets(positives, negatives),
        cfg.positive_weight,
        cfg.negative_weight,
    )


def export_embeddings(model: GnnModel, g: TargetGraph, deltas, path) -> None:
    """Write the node representations under the current deltas, one node per
    line, space-separated with round-trip precision."""
    if deltas is None:
        weights = None
        x = g.features
    else:
        weights = apply_structure_delta(g, deltas)
        x = apply_feature_delta(g.features, deltas)
    fo = forward(model, normalize_adjacency(g, weights), x)
    z = fo.representations.a
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in z:
            fh.write(" ".join("%.17g" % v for v in row) + "\n")


def config_to_dict(cfg: AdaptConfig) -> dict:
    return asdict(cfg)
