"""Dataset model and ingestion.

Owns the immutable sensor dataset (coordinates, pairwise distances, feature
tensor, partially observed labels), long-format CSV I/O, feature
standardization, random label hiding, and a clustered synthetic generator
used as a ground-truth oracle in tests and demos.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

EARTH_RADIUS_KM = 6371.0

LOCATION_HEADERS = {
    ("location_id", "lat", "lon"): False,
    ("location_id", "x", "y"): True,
}


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class SensorDataset:
    """Locations, features, and partially observed per-location labels.

    Arrays are copied and marked read-only at construction, so instances are
    safe to share across threads. ``train_end`` splits time: steps
    ``0..train_end-1`` are trainable, the remainder is the forecast interval.
    Label cells whose mask is False must never be read by training code;
    their stored values are arbitrary (often NaN).
    """

    coords: np.ndarray       # (n, 2)
    planar: bool
    distances: np.ndarray    # (n, n) km
    features: np.ndarray     # (t_total, n, d)
    labels: np.ndarray       # (t_total, n)
    label_mask: np.ndarray   # (t_total, n) bool
    train_end: int

    def __post_init__(self):
        coords = _frozen(np.asarray(self.coords, dtype=np.float64))
        distances = _frozen(np.asarray(self.distances, dtype=np.float64))
        features = _frozen(np.asarray(self.features, dtype=np.float64))
        labels = _frozen(np.asarray(self.labels, dtype=np.float64))
        mask = _frozen(np.asarray(self.label_mask, dtype=bool))
        for name, value in [
            ("coords", coords),
            ("distances", distances),
            ("features", features),
            ("labels", labels),
            ("label_mask", mask),
        ]:
            object.__setattr__(self, name, value)

        n = coords.shape[0]
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise DataError("coords must be (n, 2)")
        if distances.shape != (n, n):
            raise DataError("distances must be (n, n)")
        if features.ndim != 3 or features.shape[1] != n:
            raise DataError("features must be (t_total, n, d)")
        t_total = features.shape[0]
        if labels.shape != (t_total, n) or mask.shape != (t_total, n):
            raise DataError("labels and label_mask must be (t_total, n)")
        if not np.isfinite(features).all():
            raise DataError("features must be complete and finite")
        if not np.isfinite(distances).all() or (distances < 0).any():
            raise DataError("distances must be finite and nonnegative")
        if not np.allclose(distances, distances.T, atol=0.0, rtol=0.0):
            raise DataError("distances must be symmetric")
        if np.abs(np.diagonal(distances)).max(initial=0.0) != 0.0:
            raise DataError("distances must have a zero diagonal")
        if (mask & ~np.isfinite(labels)).any():
            raise DataError("label_mask is True on a non-finite label")
        if not (1 <= self.train_end < t_total):
            raise DataError(
                f"train_end must satisfy 1 <= train_end < {t_total}, got {self.train_end}"
            )

    @property
    def num_locations(self) -> int:
        return self.coords.shape[0]

    @property
    def num_time_steps(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[2]

    @property
    def horizon(self) -> int:
        return self.num_time_steps - self.train_end


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature mean/std computed over training steps only."""

    mean: np.ndarray  # (d,)
    std: np.ndarray   # (d,), strictly positive

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and difficulty of a generated dataset.

    When ``misspecified`` is set, cluster membership is drawn independently
    of position, so a distance-threshold graph connects the wrong sites and
    recovering useful edges requires structure learning.

    Feature noise is a slow AR(1) process per site and channel: it cannot be
    removed by smoothing a single site's history, but it is independent
    across sites, so aggregating same-cluster neighbors genuinely denoises.
    """

    num_locations: int
    num_steps: int
    num_clusters: int
    num_features: int = 6
    noise: float = 0.02          # stationary std of the per-site AR(1) label noise
    feature_noise: float = 0.12  # stationary std of the per-site AR(1) feature noise
    misspecified: bool = False
    train_end: int | None = None
    side_km: float = 100.0

    def __post_init__(self):
        if self.num_locations < 1 or self.num_steps < 2 or self.num_features < 1:
            raise DataError("synthetic spec needs n >= 1, t >= 2, d >= 1")
        if not (1 <= self.num_clusters <= self.num_locations):
            raise DataError(
                f"cluster count must be in [1, {self.num_locations}], "
                f"got {self.num_clusters}"
            )
        if self.noise < 0 or self.feature_noise < 0:
            raise DataError("noise levels must be nonnegative")


def default_train_end(t_total: int) -> int:
    """First ~80% of the steps train; at least one step is kept for testing."""
    return min(max(int(round(0.8 * t_total)), 1), t_total - 1)


# -- distances -------------------------------------------------------------


def haversine_km(coords: np.ndarray) -> np.ndarray:
    """Great-circle distances in km between (lat, lon) degree pairs."""
    lat = np.radians(coords[:, 0])
    lon = np.radians(coords[:, 1])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def euclidean_km(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def compute_distances(coords: np.ndarray, planar: bool) -> np.ndarray:
    d = euclidean_km(coords) if planar else haversine_km(coords)
    np.fill_diagonal(d, 0.0)
    return d


# -- CSV I/O ----------------------------------------------------------------


def _parse_float(text: str, path, line_no: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{line_no}: malformed value for '{col}': {text!r}") from None


def _parse_int(text: str, path, line_no: int, col: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(f"{path}:{line_no}: malformed value for '{col}': {text!r}") from None


def load_csv(
    locations_path,
    observations_path,
    *,
    train_end: int | None = None,
    planar: bool | None = None,
) -> SensorDataset:
    """Assemble a dataset from a locations table and a long-format observations table.

    ``locations.csv`` has header ``location_id,lat,lon`` (geodetic, haversine
    distances) or ``location_id,x,y`` (planar, Euclidean distances in km).
    ``observations.csv`` has header ``time,location_id,f1,...,fD,label`` with
    a 0-based contiguous integer ``time``; an empty label marks a cell with
    no ground truth. Every (time, location) pair must appear exactly once.
    """
    with open(locations_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{locations_path}: empty file")
    header = tuple(h.strip() for h in rows[0])
    if header not in LOCATION_HEADERS:
        raise DataError(f"{locations_path}:1: unrecognized header {header}")
    file_planar = LOCATION_HEADERS[header]
    if planar is not None and planar != file_planar:
        raise DataError(
            f"{locations_path}: header implies planar={file_planar}, caller requested planar={planar}"
        )

    ids: dict[int, tuple[float, float]] = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise DataError(f"{locations_path}:{line_no}: expected 3 columns, got {len(row)}")
        loc = _parse_int(row[0], locations_path, line_no, "location_id")
        if loc in ids:
            raise DataError(f"{locations_path}:{line_no}: duplicate location_id {loc}")
        ids[loc] = (
            _parse_float(row[1], locations_path, line_no, header[1]),
            _parse_float(row[2], locations_path, line_no, header[2]),
        )
    n = len(ids)
    if n == 0:
        raise DataError(f"{locations_path}: no locations")
    if sorted(ids) != list(range(n)):
        raise DataError(f"{locations_path}: location ids must be contiguous integers from 0")
    coords = np.array([ids[i] for i in range(n)], dtype=np.float64)

    with open(observations_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{observations_path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 4 or header[0] != "time" or header[1] != "location_id" or header[-1] != "label":
        raise DataError(
            f"{observations_path}:1: expected header time,location_id,f1,...,fD,label"
        )
    d = len(header) - 3

    records = []
    max_time = -1
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != d + 3:
            raise DataError(
                f"{observations_path}:{line_no}: expected {d + 3} columns, got {len(row)}"
            )
        t = _parse_int(row[0], observations_path, line_no, "time")
        loc = _parse_int(row[1], observations_path, line_no, "location_id")
        if t < 0:
            raise DataError(f"{observations_path}:{line_no}: negative time index {t}")
        if not (0 <= loc < n):
            raise DataError(f"{observations_path}:{line_no}: unknown location_id {loc}")
        feats = [
            _parse_float(row[2 + j], observations_path, line_no, header[2 + j])
            for j in range(d)
        ]
        label_text = row[-1].strip()
        label = (
            _parse_float(label_text, observations_path, line_no, "label")
            if label_text
            else None
        )
        records.append((t, loc, feats, label, line_no))
        max_time = max(max_time, t)

    if max_time < 0:
        raise DataError(f"{observations_path}: no observation rows")
    t_total = max_time + 1

    features = np.full((t_total, n, d), np.nan)
    labels = np.full((t_total, n), np.nan)
    mask = np.zeros((t_total, n), dtype=bool)
    seen = np.zeros((t_total, n), dtype=bool)
    for t, loc, feats, label, line_no in records:
        if seen[t, loc]:
            raise DataError(
                f"{observations_path}:{line_no}: duplicate (time, location) = ({t}, {loc})"
            )
        seen[t, loc] = True
        features[t, loc] = feats
        if label is not None:
            labels[t, loc] = label
            mask[t, loc] = True

    missing_times = np.flatnonzero(~seen.any(axis=1))
    if missing_times.size:
        raise DataError(
            f"{observations_path}: non-contiguous time indices (no rows for step {missing_times[0]})"
        )
    if not seen.all():
        t, loc = np.argwhere(~seen)[0]
        raise DataError(
            f"{observations_path}: missing observation row for (time={t}, location={loc})"
        )

    if train_end is None:
        train_end = default_train_end(t_total)
    return SensorDataset(
        coords=coords,
        planar=file_planar,
        distances=compute_distances(coords, file_planar),
        features=features,
        labels=labels,
        label_mask=mask,
        train_end=train_end,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def save_csv(dataset: SensorDataset, locations_path, observations_path) -> None:
    """Write the two-file CSV form; masked label cells become empty strings."""
    with open(locations_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location_id", "x", "y"] if dataset.planar else ["location_id", "lat", "lon"])
        for i in range(dataset.num_locations):
            writer.writerow([i, _fmt(dataset.coords[i, 0]), _fmt(dataset.coords[i, 1])])

    with open(observations_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["time", "location_id"]
            + [f"f{j + 1}" for j in range(dataset.num_features)]
            + ["label"]
        )
        for t in range(dataset.num_time_steps):
            for i in range(dataset.num_locations):
                label = _fmt(dataset.labels[t, i]) if dataset.label_mask[t, i] else ""
                writer.writerow(
                    [t, i] + [_fmt(v) for v in dataset.features[t, i]] + [label]
                )


# -- transforms --------------------------------------------------------------


def normalize_features(dataset: SensorDataset) -> tuple[SensorDataset, NormalizationStats]:
    """Standardize each feature channel using training-interval statistics.

    Channels with exactly zero variance over the training steps are only
    mean-shifted (std recorded as 1), which avoids dividing by zero without
    dropping columns. Labels are never touched.
    """
    train = dataset.features[: dataset.train_end].reshape(-1, dataset.num_features)
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    stats = NormalizationStats(mean=mean, std=std)
    return apply_normalization(dataset, stats), stats


def apply_normalization(dataset: SensorDataset, stats: NormalizationStats) -> SensorDataset:
    feats = (dataset.features - stats.mean) / stats.std
    return replace(dataset, features=feats)


def mask_labels(dataset: SensorDataset, fraction: float, seed: int) -> SensorDataset:
    """Hide ``fraction`` of the currently labeled training cells, uniformly at random.

    Test-interval masks are untouched, and a False mask is never flipped back
    to True. Deterministic for a given seed.
    """
    if not (0.0 <= fraction < 1.0):
        raise DataError(f"mask fraction must be in [0, 1), got {fraction}")
    candidates = np.argwhere(dataset.label_mask[: dataset.train_end])
    k = int(round(fraction * len(candidates)))
    if k == 0:
        return replace(dataset)
    rng = np.random.default_rng(seed)
    picked = candidates[rng.choice(len(candidates), size=k, replace=False)]
    mask = np.array(dataset.label_mask)
    mask[picked[:, 0], picked[:, 1]] = False
    return replace(dataset, label_mask=mask)


# -- synthetic generator ------------------------------------------------------


def _cluster_signals(spec: SyntheticSpec, rng: np.random.Generator, times: np.ndarray) -> np.ndarray:
    """One smooth seasonal series per cluster: two sinusoids with
    cluster-specific phase and scale on top of a positive base level.
    Evenly spread primary phases keep the clusters well separated."""
    c = spec.num_clusters
    base = rng.uniform(0.35, 0.55, size=c)
    amp1 = rng.uniform(0.15, 0.25, size=c)
    amp2 = rng.uniform(0.05, 0.10, size=c)
    phase1 = 2.0 * np.pi * np.arange(c) / c + rng.uniform(-0.15, 0.15, size=c)
    phase2 = rng.uniform(0.0, 2.0 * np.pi, size=c)
    p1 = max(spec.num_steps / 2.0, 2.0)
    p2 = max(spec.num_steps / 7.0, 2.0)
    t = times[None, :]
    return (
        base[:, None]
        + amp1[:, None] * np.sin(2.0 * np.pi * t / p1 + phase1[:, None])
        + amp2[:, None] * np.sin(2.0 * np.pi * t / p2 + phase2[:, None])
    )


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SensorDataset:
    """Build a planar dataset with cluster-shared dynamics.

    Sites belong to one of C latent clusters; labels follow the cluster's
    seasonal signal plus site-level AR(1) noise; features are lagged, noisy
    transforms of the same cluster signal. Features are therefore informative
    about the predictable part of the label but individually noisy, so
    aggregating over same-cluster sites genuinely helps. With
    ``misspecified=False`` clusters are compact spatial blocks; with
    ``misspecified=True`` positions carry no cluster information.
    """
    rng = np.random.default_rng(seed)
    n, t_total, d, c = spec.num_locations, spec.num_steps, spec.num_features, spec.num_clusters

    max_lag = min(2, d - 1) if d > 1 else 0
    times = np.arange(-max_lag, t_total, dtype=np.float64)
    signals = _cluster_signals(spec, rng, times)  # (c, max_lag + t_total)

    assignment = np.arange(n) % c
    if spec.misspecified:
        coords = rng.uniform(0.0, spec.side_km, size=(n, 2))
    else:
        grid = math.ceil(math.sqrt(c))
        cell = spec.side_km / grid
        centers = np.array(
            [((k % grid + 0.5) * cell, (k // grid + 0.5) * cell) for k in range(c)]
        )
        jitter = rng.uniform(-0.3, 0.3, size=(n, 2)) * cell
        coords = centers[assignment] + jitter

    # site-level AR(1) label noise, stationary std == spec.noise
    rho = 0.7
    eps = rng.standard_normal((t_total, n))
    ar = np.zeros((t_total, n))
    ar[0] = spec.noise * eps[0]
    scale = spec.noise * math.sqrt(1.0 - rho * rho)
    for t in range(1, t_total):
        ar[t] = rho * ar[t - 1] + scale * eps[t]

    labels = signals[assignment, max_lag:].T + ar  # (t_total, n)

    gains = rng.uniform(0.6, 1.4, size=d)
    offsets = rng.uniform(-0.2, 0.2, size=d)
    lags = np.arange(d) % (max_lag + 1)
    # slow per-(site, channel) AR(1) feature noise, stationary std == feature_noise
    rho_f = 0.9
    f_eps = rng.standard_normal((t_total, n, d))
    f_noise = np.zeros_like(f_eps)
    f_noise[0] = spec.feature_noise * f_eps[0]
    f_scale = spec.feature_noise * math.sqrt(1.0 - rho_f * rho_f)
    for t in range(1, t_total):
        f_noise[t] = rho_f * f_noise[t - 1] + f_scale * f_eps[t]
    features = np.empty((t_total, n, d))
    for j in range(d):
        lagged = signals[assignment, max_lag - lags[j] : max_lag - lags[j] + t_total].T
        features[:, :, j] = gains[j] * lagged + offsets[j] + f_noise[:, :, j]

    train_end = spec.train_end if spec.train_end is not None else default_train_end(t_total)
    return SensorDataset(
        coords=coords,
        planar=True,
        distances=compute_distances(coords, planar=True),
        features=features,
        labels=labels,
        label_mask=np.ones((t_total, n), dtype=bool),
        train_end=train_end,
    )
