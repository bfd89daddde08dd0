"""The four training objective terms and their weighted combination.

All terms are plain sums over steps and node pairs, exactly as combined in
the total objective; the weight auto-balancing absorbs scale differences.
Each function accepts either taped tensors (gradients flow) or plain arrays.
The sparse-label contract is enforced here: a label whose mask is False is
never read.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError

BCE_EPS = 1e-7

TERM_NAMES = ("stsm", "gc", "fs", "ts")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term raw values, the weights applied, and the weighted total."""

    stsm: float
    gc: float
    fs: float
    ts: float
    weights: tuple[float, float, float, float]
    total: float

    @classmethod
    def from_terms(cls, values, weights) -> "LossBreakdown":
        values = tuple(float(v) for v in values)
        weights = tuple(float(w) for w in weights)
        total = sum(w * v for w, v in zip(weights, values))
        return cls(*values, weights=weights, total=total)

    def term_values(self) -> tuple[float, float, float, float]:
        return (self.stsm, self.gc, self.fs, self.ts)

    def validate(self) -> None:
        expected = sum(w * v for w, v in zip(self.weights, self.term_values()))
        if abs(self.total - expected) > 1e-9 * max(1.0, abs(expected)):
            raise ValueError("total does not match the weighted term sum")


def _sequence(recon) -> Tensor:
    """Promote a single (n, n) matrix to a length-1 sequence."""
    t = ad.as_tensor(recon)
    if t.ndim == 2:
        return t.reshape((1,) + t.shape)
    if t.ndim != 3:
        raise ValueError("expected an (n, n) matrix or a (t, n, n) sequence")
    return t


def loss_stsm(predictions, labels, mask, window: int) -> Tensor:
    """Sum of squared prediction errors over labeled cells.

    ``predictions[m]`` targets step ``window + m``; labels and mask cover all
    steps of the evaluated range. Masked cells contribute exactly zero and
    their stored values are never read.
    """
    preds = ad.as_tensor(predictions)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    lab = labels[window:]
    msk = mask[window:]
    if lab.shape != preds.shape:
        raise ValueError(
            f"predictions {preds.shape} do not align with labels[{window}:] {lab.shape}"
        )
    if not msk.any():
        raise DataError("no labeled cells in the prediction range; nothing to fit")
    safe = np.where(msk, lab, 0.0)
    diff = ad.mul(ad.sub(preds, safe), msk.astype(np.float64))
    return ad.reduce_sum(ad.mul(diff, diff))


def loss_graph_closeness(initial_adjacency, reconstructed) -> Tensor:
    """Binary cross entropy pulling each reconstructed adjacency toward the
    initial one, summed over steps and all entries.

    Both matrices are row-normalized, so entries live in [0, 1]; the
    reconstruction is clamped away from {0, 1} before the logs.
    """
    recon = _sequence(reconstructed)
    a = np.asarray(initial_adjacency, dtype=np.float64)
    if a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("initial adjacency entries must lie in [0, 1]")
    if recon.data.min() < 0.0 or recon.data.max() > 1.0:
        raise ValueError("reconstructed adjacency entries must lie in [0, 1]")
    target = np.broadcast_to(a, recon.shape)
    clamped = ad.clip(recon, BCE_EPS, 1.0 - BCE_EPS)
    pos = ad.mul(target, ad.log(clamped))
    negt = ad.mul(1.0 - target, ad.log(ad.sub(1.0, clamped)))
    return ad.neg(ad.reduce_sum(ad.add(pos, negt)))


def pairwise_feature_dists(features) -> np.ndarray:
    """Squared feature distances per step, (t, n, n) with a zero diagonal."""
    x = np.asarray(features, dtype=np.float64)
    diff = x[:, :, None, :] - x[:, None, :, :]
    return (diff ** 2).sum(axis=-1)


def loss_feature_smoothness(reconstructed, features) -> Tensor:
    """Edge weight times squared feature distance, summed over i != j pairs:
    similar inputs are encouraged to share an edge."""
    recon = _sequence(reconstructed)
    dists = pairwise_feature_dists(features)
    if dists.shape != recon.shape:
        raise ValueError("features do not align with the adjacency sequence")
    return ad.reduce_sum(ad.mul(recon, dists))


def labeled_pair_label_diffs(labels, mask) -> np.ndarray:
    """Squared label differences per step, zero unless both endpoints are
    labeled; diagonal is zero."""
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    safe = np.where(mask, labels, 0.0)
    diff = (safe[:, :, None] - safe[:, None, :]) ** 2
    pair = mask[:, :, None] & mask[:, None, :]
    return diff * pair


def loss_target_smoothness(reconstructed, labels, mask) -> Tensor:
    """Edge weight times squared label difference over pairs where both
    nodes are labeled at that step; unlabeled steps contribute zero."""
    recon = _sequence(reconstructed)
    diffs = labeled_pair_label_diffs(labels, mask)
    if diffs.shape != recon.shape:
        raise ValueError("labels do not align with the adjacency sequence")
    return ad.reduce_sum(ad.mul(recon, diffs))


def auto_balance_weights(initial, active=(True, True, True, True)) -> tuple[float, float, float, float]:
    """Weights inversely proportional to the initial raw term values, so each
    weighted term starts out equal and the weights sum to 1.

    Inactive terms get weight 0. A raw value of exactly 0 is degenerate: that
    term's weight is pinned to 1 and the remaining terms are balanced among
    themselves. Weights are computed once and then frozen.
    """
    if isinstance(initial, LossBreakdown):
        values = initial.term_values()
    else:
        values = tuple(float(v) for v in initial)
    if len(values) != 4 or len(active) != 4:
        raise ValueError("expected four loss terms")
    weights = [0.0] * 4
    zero_terms = [i for i in range(4) if active[i] and values[i] == 0.0]
    balance = [i for i in range(4) if active[i] and values[i] != 0.0]
    for i in zero_terms:
        weights[i] = 1.0
    if balance:
        inv = [1.0 / values[i] for i in balance]
        denom = sum(inv)
        for i, v in zip(balance, inv):
            weights[i] = v / denom
    return tuple(weights)
