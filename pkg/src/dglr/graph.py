"""Graph construction and reconstruction.

The initial graph is a distance-threshold graph with self-loops, row
normalized so every row is a probability vector. During training the
adjacency is periodically rebuilt from node embeddings as the row-normalized
positive part of the embedding Gram matrix, optionally restricted to pairs
within a physical-distance cutoff.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NumericError

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class TemporalGraph:
    """Static initial adjacency plus the per-step adjacencies currently in use.

    ``current_adjacency`` is None until the first structure update, meaning
    the initial matrix is shared by every time step. All stored matrices are
    row-stochastic and nonnegative. Instances are immutable; updates return
    a new graph.
    """

    initial_adjacency: np.ndarray        # (n, n)
    cutoff_mask: np.ndarray              # (n, n) bool, pairs allowed to carry an edge
    current_adjacency: np.ndarray | None = None  # (t, n, n)

    @property
    def num_nodes(self) -> int:
        return self.initial_adjacency.shape[0]

    def stacked(self, num_steps: int) -> np.ndarray:
        """Per-step adjacency tensor of shape (num_steps, n, n)."""
        n = self.num_nodes
        if self.current_adjacency is None:
            return np.broadcast_to(self.initial_adjacency, (num_steps, n, n))
        if self.current_adjacency.shape[0] != num_steps:
            raise DataError(
                f"graph holds {self.current_adjacency.shape[0]} step matrices, "
                f"requested {num_steps}"
            )
        return self.current_adjacency

    def with_current(self, sequence: np.ndarray) -> "TemporalGraph":
        return replace(self, current_adjacency=np.asarray(sequence, dtype=np.float64))

    def validate(self) -> None:
        mats = [self.initial_adjacency]
        if self.current_adjacency is not None:
            mats.extend(self.current_adjacency)
        for m in mats:
            if (m < 0).any():
                raise DataError("adjacency has negative entries")
            if np.abs(m.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
                raise DataError("adjacency rows must sum to 1")
        if (np.diagonal(self.initial_adjacency) <= 0).any():
            raise DataError("initial adjacency must have self-loops")


def suggest_threshold(distances: np.ndarray, target_mean_degree: float = 4.0) -> float:
    """Distance cutoff giving the binary graph a mean degree of about
    ``target_mean_degree`` (self-loops excluded)."""
    n = distances.shape[0]
    pairs = np.sort(distances[np.triu_indices(n, k=1)])
    if pairs.size == 0:
        return 1.0
    k = int(round(target_mean_degree * n / 2.0))
    k = min(max(k, 1), pairs.size)
    # edges use a strict `<` comparison, so step just past the k-th distance
    return float(np.nextafter(pairs[k - 1], np.inf))


def row_normalize(matrix: np.ndarray) -> np.ndarray:
    sums = matrix.sum(axis=-1, keepdims=True)
    return matrix / sums


def build_initial_graph(
    distances: np.ndarray,
    threshold_km: float,
    *,
    cutoff_multiplier: float | None = 3.0,
) -> TemporalGraph:
    """Distance-threshold graph: edge (i, j) iff d_ij < threshold, plus
    self-loops on every node, then each row divided by its degree.

    An all-singleton graph is fine: self-loops keep every row valid.
    ``cutoff_multiplier`` bounds which pairs the reconstructed graph may
    connect (None disables the restriction).
    """
    if threshold_km <= 0:
        raise DataError(f"threshold_km must be positive, got {threshold_km}")
    d = np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    adj = (d < threshold_km).astype(np.float64)
    np.fill_diagonal(adj, 1.0)
    if cutoff_multiplier is None:
        cutoff = np.ones((n, n), dtype=bool)
    else:
        cutoff = d <= cutoff_multiplier * threshold_km
        np.fill_diagonal(cutoff, True)
    return TemporalGraph(initial_adjacency=row_normalize(adj), cutoff_mask=cutoff)


def reconstruct_adjacency(embeddings: np.ndarray, cutoff_mask: np.ndarray | None = None) -> np.ndarray:
    """Row-normalized positive part of the embedding Gram matrix.

    Entries outside the cutoff mask are zeroed before normalization; a row
    left all-zero (every allowed dot product nonpositive) gets a unit
    diagonal so the node still sees itself.
    """
    h = np.asarray(embeddings, dtype=np.float64)
    if not np.isfinite(h).all():
        raise NumericError("non-finite embeddings passed to adjacency reconstruction")
    pre = np.maximum(h @ h.T, 0.0)
    if cutoff_mask is not None:
        pre = pre * cutoff_mask
    zero_rows = pre.sum(axis=1) == 0.0
    if zero_rows.any():
        pre = pre + np.diag(zero_rows.astype(np.float64))
    return row_normalize(pre)


def reconstruct_sequence(embeddings: Tensor, cutoff_mask: np.ndarray | None = None) -> Tensor:
    """Differentiable per-step reconstruction from a (t, n, k) embedding tensor.

    Same arithmetic as :func:`reconstruct_adjacency`, but on the tape:
    gradients of losses built on the result flow back into the embeddings.
    The zero-row rescue is a locally constant correction, added as data.
    """
    emb = ad.as_tensor(embeddings)
    if not np.isfinite(emb.data).all():
        raise NumericError("non-finite embeddings passed to adjacency reconstruction")
    t, n, _ = emb.shape
    pre = ad.relu(ad.matmul(emb, ad.transpose_last2(emb)))
    if cutoff_mask is not None:
        pre = ad.mul(pre, cutoff_mask.astype(np.float64))
    zero_rows = pre.data.sum(axis=-1) == 0.0  # (t, n)
    if zero_rows.any():
        rescue = np.zeros((t, n, n))
        steps, nodes = np.nonzero(zero_rows)
        rescue[steps, nodes, nodes] = 1.0
        pre = ad.add(pre, rescue)
    return ad.div(pre, ad.reduce_sum(pre, axis=-1, keepdims=True))


def graph_to_dict(graph: TemporalGraph) -> dict:
    return {
        "initial_adjacency": graph.initial_adjacency.tolist(),
        "cutoff_mask": graph.cutoff_mask.astype(int).tolist(),
        "current_adjacency": (
            graph.current_adjacency.tolist()
            if graph.current_adjacency is not None
            else None
        ),
    }


def graph_from_dict(payload: dict) -> TemporalGraph:
    current = payload.get("current_adjacency")
    return TemporalGraph(
        initial_adjacency=np.asarray(payload["initial_adjacency"], dtype=np.float64),
        cutoff_mask=np.asarray(payload["cutoff_mask"], dtype=bool),
        current_adjacency=np.asarray(current, dtype=np.float64) if current is not None else None,
    )


def save_graph_csvs(graph: TemporalGraph, num_steps: int, out_dir) -> list:
    """Dump each per-step adjacency as a dense CSV for inspection."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stacked = graph.stacked(num_steps)
    written = []
    for t in range(num_steps):
        path = out / f"adjacency_t{t:04d}.csv"
        with open(path, "w") as fh:
            for row in stacked[t]:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        written.append(path)
    return written
