"""End-to-end training: gradient computation, ADAM updates, the outer
graph-update loop, ablation control, checkpointing, and forecasting.

One outer iteration trains the parameters for a fixed number of epochs on
the current per-step graphs, then rebuilds those graphs from the learned
embeddings. The rebuilt graphs are plain data for the next iteration;
gradients reach the reconstruction only through the structure losses of the
iteration that produced it.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import model as M
from .autodiff import Tensor
from .data import SensorDataset
from .errors import DataError, DimensionError, DivergenceError, NumericError
from .graph import (
    TemporalGraph,
    build_initial_graph,
    reconstruct_adjacency,
    reconstruct_sequence,
    suggest_threshold,
)
from .losses import LossBreakdown

ABLATIONS = ("full", "shared", "no_sl", "no_sm")

LOG_HEADER = ("epoch", "stsm", "gc", "fs", "ts", "total")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run besides the dataset."""

    embedding_dim: int = 10
    window: int = 1
    learning_rate: float = 1e-4
    epochs_per_outer_iter: int = 1000
    outer_iters: int = 2
    alpha: tuple[float, float, float, float] | None = None  # None: balance at epoch 0
    threshold_km: float | None = None  # None: pick for mean degree ~4
    cutoff_multiplier: float | None = 3.0  # None: no distance cutoff on reconstruction
    seed: int = 0
    ablation: str = "full"
    activation: str = "elu"
    rebalance_each_iter: bool = False
    holdout_fraction: float = 0.0  # >0 holds out trailing train steps for epoch selection
    checkpoint_every: int = 100

    def validate(self) -> None:
        if self.window < 1:
            raise DataError("window must be >= 1")
        if self.outer_iters < 1 or self.epochs_per_outer_iter < 1:
            raise DataError("outer_iters and epochs_per_outer_iter must be >= 1")
        if not (self.learning_rate > 0):
            raise DataError("learning_rate must be positive")
        if self.embedding_dim < 1:
            raise DataError("embedding_dim must be >= 1")
        if self.ablation not in ABLATIONS:
            raise DataError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.activation not in M.ACTIVATIONS:
            raise DataError(f"activation must be one of {tuple(M.ACTIVATIONS)}")
        if self.alpha is not None:
            if len(self.alpha) != 4 or any(a < 0 for a in self.alpha):
                raise DataError("alpha must be four nonnegative weights")
        if not (0.0 <= self.holdout_fraction < 0.5):
            raise DataError("holdout_fraction must be in [0, 0.5)")

    def active_terms(self) -> tuple[bool, bool, bool, bool]:
        if self.ablation == "no_sl":
            return (True, False, False, False)
        if self.ablation == "no_sm":
            return (True, True, False, False)
        return (True, True, True, True)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["alpha"] = list(self.alpha) if self.alpha is not None else None
        return d


class Adam:
    """ADAM with bias correction; moments live per parameter tensor."""

    def __init__(self, params, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        for name, t in self.params:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** self.step_count)
            v_hat = v / (1.0 - b2 ** self.step_count)
            t.data = t.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class _Problem:
    """Per-run constants shared by every epoch of an outer iteration."""

    features: np.ndarray       # (t, n, d), training steps only
    labels: np.ndarray
    mask: np.ndarray           # training mask (holdout already removed)
    val_mask: np.ndarray | None
    initial_adjacency: np.ndarray
    cutoff_mask: np.ndarray
    feature_dists: np.ndarray | None
    label_diffs: np.ndarray | None
    window: int
    active: tuple[bool, bool, bool, bool]


def _build_problem(dataset: SensorDataset, graph: TemporalGraph, config: TrainConfig,
                   val_mask: np.ndarray | None = None, train_mask: np.ndarray | None = None) -> _Problem:
    t = dataset.train_end
    feats = dataset.features[:t]
    labels = dataset.labels[:t]
    mask = train_mask if train_mask is not None else dataset.label_mask[:t]
    active = config.active_terms()
    needs_structure = active[1] or active[2] or active[3]
    return _Problem(
        features=feats,
        labels=labels,
        mask=mask,
        val_mask=val_mask,
        initial_adjacency=graph.initial_adjacency,
        cutoff_mask=graph.cutoff_mask,
        feature_dists=L.pairwise_feature_dists(feats) if needs_structure else None,
        label_diffs=L.labeled_pair_label_diffs(labels, mask) if needs_structure else None,
        window=config.window,
        active=active,
    )


def _loss_terms(params: M.ModelParams, stack: np.ndarray, problem: _Problem):
    """Forward pass plus all active loss terms as taped tensors."""
    fwd = M.forward_all(params, stack, problem.features)
    stsm = L.loss_stsm(fwd.predictions, problem.labels, problem.mask, problem.window)
    terms: list[Tensor | None] = [stsm, None, None, None]
    if problem.active[1] or problem.active[2] or problem.active[3]:
        recon = reconstruct_sequence(fwd.embeddings, problem.cutoff_mask)
        if problem.active[1]:
            terms[1] = L.loss_graph_closeness(problem.initial_adjacency, recon)
        if problem.active[2]:
            terms[2] = L.loss_feature_smoothness(recon, problem.features)
        if problem.active[3]:
            terms[3] = L.loss_target_smoothness(recon, problem.labels, problem.mask)
    return fwd, terms


def _epoch_pass(params, stack, problem, config, weights):
    """One forward/backward pass. Returns (breakdown, weights, val_sse).

    When ``weights`` is None they are fixed here from the raw term values,
    honoring the ablation's active-term set and any manual override.
    """
    fwd, terms = _loss_terms(params, stack, problem)
    values = [float(t.data) if t is not None else 0.0 for t in terms]
    if weights is None:
        if config.alpha is not None:
            weights = tuple(
                a if act else 0.0 for a, act in zip(config.alpha, problem.active)
            )
        else:
            weights = L.auto_balance_weights(values, active=problem.active)
    total: Tensor | None = None
    for w, term in zip(weights, terms):
        if term is None or w == 0.0:
            continue
        piece = term * w
        total = piece if total is None else total + piece
    breakdown = LossBreakdown.from_terms(values, weights)
    if total is not None and np.isfinite(breakdown.total):
        total.backward()
    val_sse = None
    if problem.val_mask is not None:
        vm = problem.val_mask[problem.window:]
        err = np.where(vm, fwd.predictions.data - np.where(vm, problem.labels[problem.window:], 0.0), 0.0)
        val_sse = float((err ** 2).sum())
    return breakdown, weights, val_sse


def compute_loss(params, graph, dataset, config, weights=None) -> LossBreakdown:
    """Objective value at the current parameters, without gradients."""
    problem = _build_problem(dataset, graph, config)
    _, terms = _loss_terms(params, graph.stacked(dataset.train_end), problem)
    values = [float(t.data) if t is not None else 0.0 for t in terms]
    if weights is None:
        weights = (
            tuple(a if act else 0.0 for a, act in zip(config.alpha, problem.active))
            if config.alpha is not None
            else L.auto_balance_weights(values, active=problem.active)
        )
    return LossBreakdown.from_terms(values, weights)


def compute_gradients(params, graph, dataset, config, weights=None):
    """Reverse-mode gradients of the weighted objective for every parameter.

    Returns ``(grads, breakdown)`` where ``grads`` maps parameter names to
    arrays shaped like the parameters and ``breakdown`` records the term
    values and the weights actually applied.
    """
    config.validate()
    for _, t in params.parameters():
        t.grad = None
    problem = _build_problem(dataset, graph, config)
    breakdown, _, _ = _epoch_pass(params, graph.stacked(dataset.train_end), problem, config, weights)
    grads = {}
    for name, t in params.parameters():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        grads[name] = np.array(g)
    return grads, breakdown


@dataclass
class TrainResult:
    params: M.ModelParams
    graph: TemporalGraph
    log: list[LossBreakdown]
    weights: tuple[float, float, float, float]
    config: TrainConfig
    threshold_km: float
    iteration_graphs: list[TemporalGraph] = field(default_factory=list)
    best_epoch: int | None = None


def _holdout_masks(dataset: SensorDataset, config: TrainConfig):
    """Split the training mask into fit/validation parts when requested."""
    mask = np.array(dataset.label_mask[: dataset.train_end])
    if config.holdout_fraction <= 0:
        return mask, None
    t = dataset.train_end
    n_hold = max(1, int(np.ceil(config.holdout_fraction * t)))
    if t - n_hold < config.window + 1:
        raise DataError("holdout leaves fewer than window + 1 training steps")
    val_mask = np.zeros_like(mask)
    val_mask[t - n_hold :] = mask[t - n_hold :]
    fit_mask = mask.copy()
    fit_mask[t - n_hold :] = False
    return fit_mask, val_mask


def train(dataset: SensorDataset, config: TrainConfig, *, run_dir=None,
          checkpoint_extra: dict | None = None) -> TrainResult:
    """Run the full outer loop and return the trained model plus final graphs.

    Deterministic for a given config and seed. Raises DivergenceError with
    the last finite-loss parameter snapshot if the loss leaves the finite
    range or an activation blows up.
    """
    config.validate()
    t_train = dataset.train_end
    labeled_steps = int(dataset.label_mask[:t_train].any(axis=1).sum())
    if labeled_steps < config.window + 1:
        raise DataError(
            f"need labeled cells in at least window + 1 = {config.window + 1} "
            f"training steps, found {labeled_steps}"
        )

    rng = np.random.default_rng(config.seed)
    threshold = (
        config.threshold_km
        if config.threshold_km is not None
        else suggest_threshold(dataset.distances)
    )
    graph = build_initial_graph(
        dataset.distances, threshold, cutoff_multiplier=config.cutoff_multiplier
    )
    graph.validate()
    params = M.init_params(
        dataset.num_locations,
        dataset.num_features,
        config.embedding_dim,
        config.window,
        rng=rng,
        shared_gru=config.ablation == "shared",
        activation=config.activation,
    )
    optimizer = Adam(params.parameters(), config.learning_rate)
    fit_mask, val_mask = _holdout_masks(dataset, config)

    weights = None
    log: list[LossBreakdown] = []
    iteration_graphs: list[TemporalGraph] = []
    last_good = params.copy_data()
    best = None  # (val_sse, epoch, snapshot)
    epoch = 0
    run_dir = Path(run_dir) if run_dir is not None else None

    for outer in range(config.outer_iters):
        if outer > 0 and config.rebalance_each_iter and config.alpha is None:
            weights = None
        problem = _build_problem(dataset, graph, config, val_mask=val_mask, train_mask=fit_mask)
        stack = graph.stacked(t_train)
        for _ in range(config.epochs_per_outer_iter):
            optimizer.zero_grad()
            try:
                breakdown, weights, val_sse = _epoch_pass(params, stack, problem, config, weights)
            except NumericError as err:
                raise DivergenceError(str(err), last_good=last_good, epoch=epoch, log=log) from err
            if not np.isfinite(breakdown.total):
                raise DivergenceError(
                    f"loss became non-finite at epoch {epoch}",
                    last_good=last_good,
                    epoch=epoch,
                    log=log,
                )
            # snapshots reflect the parameters the loss was evaluated at
            last_good = params.copy_data()
            if val_sse is not None and (best is None or val_sse < best[0]):
                best = (val_sse, epoch, last_good)
            optimizer.step()
            log.append(breakdown)
            epoch += 1
            if run_dir is not None and epoch % config.checkpoint_every == 0:
                M.save_checkpoint(
                    run_dir / f"checkpoint_{epoch:06d}.json",
                    params,
                    seed=config.seed,
                    extra=checkpoint_extra,
                )
        if config.ablation != "no_sl":
            fwd = M.forward_all(params, stack, problem.features)
            sequence = np.stack(
                [
                    reconstruct_adjacency(fwd.embeddings.data[t], graph.cutoff_mask)
                    for t in range(t_train)
                ]
            )
            graph = graph.with_current(sequence)
            graph.validate()
        iteration_graphs.append(graph)

    best_epoch = None
    if best is not None:
        best_epoch = best[1]
        params.load_data(best[2])

    return TrainResult(
        params=params,
        graph=graph,
        log=log,
        weights=weights,
        config=config,
        threshold_km=float(threshold),
        iteration_graphs=iteration_graphs,
        best_epoch=best_epoch,
    )


def forecast(params: M.ModelParams, graph: TemporalGraph, dataset: SensorDataset,
             horizon: int) -> np.ndarray:
    """Predictions for the ``horizon`` steps after the training interval.

    The forward pass covers the whole history plus the horizon; steps beyond
    the training interval reuse the last training-step graph. Labels are
    never read, only features, which must cover the horizon.
    """
    if horizon < 0:
        raise DataError("horizon must be nonnegative")
    n = dataset.num_locations
    if n != params.num_nodes:
        raise DimensionError(
            f"dataset has {n} locations, checkpoint expects {params.num_nodes}"
        )
    if dataset.num_features != params.num_features:
        raise DimensionError(
            f"dataset has {dataset.num_features} features, checkpoint expects "
            f"{params.num_features}"
        )
    if horizon == 0:
        return np.zeros((0, n))
    t_train = dataset.train_end
    if t_train + horizon > dataset.num_time_steps:
        raise DataError(
            f"features cover {dataset.num_time_steps} steps; cannot forecast "
            f"{horizon} steps past {t_train}"
        )
    stack = np.asarray(graph.stacked(t_train))
    extended = np.concatenate([stack, np.repeat(stack[-1:], horizon, axis=0)], axis=0)
    fwd = M.forward_all(params, extended, dataset.features[: t_train + horizon])
    start = t_train - params.window
    return np.array(fwd.predictions.data[start : start + horizon])


# -- run artifacts -------------------------------------------------------------


def write_training_log(path, log: list[LossBreakdown]) -> None:
    """One CSV row per epoch: epoch,stsm,gc,fs,ts,total."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for epoch, row in enumerate(log):
            writer.writerow(
                [epoch]
                + [repr(v) for v in (row.stsm, row.gc, row.fs, row.ts, row.total)]
            )
