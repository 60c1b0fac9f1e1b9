"""1-D k-means over flight altitudes with silhouette-based choice of k."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError


@dataclass
class ClusteringResult:
    k: int
    centroids: list[float]  # ascending
    labels: np.ndarray  # level per input value, ordered by centroid
    silhouette: float
    inertia: float
    sample_ids: list[str] | None = None

    @property
    def assignment(self) -> dict[str, int]:
        ids = self.sample_ids or [str(i) for i in range(len(self.labels))]
        return {sid: int(lv) for sid, lv in zip(ids, self.labels)}

    def to_json(self) -> dict:
        return {"k": self.k, "centroids": list(map(float, self.centroids)),
                "assignment": self.assignment, "silhouette": float(self.silhouette)}


def _kmeanspp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
    return np.asarray(centers, dtype=np.float64)


def _lloyd(x, centers, max_iter):
    labels = None
    for _ in range(max_iter):
        new = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        for c in range(len(centers)):
            if not np.any(new == c):
                # repair: hand the empty cluster the point farthest from its own centroid
                far = np.argmax(np.abs(x - centers[new]))
                new[far] = c
        centers = np.array([x[new == c].mean() for c in range(len(centers))])
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
    labels = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
    return centers, labels


def _hartigan(x, labels, k, max_moves=10_000):
    """Best single-point moves while any lowers the inertia; escapes some Lloyd fixed points."""
    labels = labels.copy()
    n = np.bincount(labels, minlength=k).astype(np.float64)
    mu = np.array([x[labels == c].mean() for c in range(k)])
    idx = np.arange(x.size)
    for _ in range(max_moves):
        na = n[labels]
        leave = np.where(na > 1, na / np.maximum(na - 1.0, 1.0), 0.0) * (x - mu[labels]) ** 2
        join = (n / (n + 1.0))[None, :] * (x[:, None] - mu[None, :]) ** 2
        join[idx, labels] = np.inf
        dest = np.argmin(join, axis=1)
        gain = leave - join[idx, dest]
        i = int(np.argmax(gain))
        if not gain[i] > 1e-12 * max(leave[i], 1e-300):
            break
        a, b = labels[i], dest[i]
        mu[a] = (mu[a] * n[a] - x[i]) / (n[a] - 1.0)
        mu[b] = (mu[b] * n[b] + x[i]) / (n[b] + 1.0)
        n[a] -= 1.0
        n[b] += 1.0
        labels[i] = b
    centers = np.array([x[labels == c].mean() for c in range(k)])
    return centers, np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)


def kmeans(values: Sequence[float], k: int, seed: int = 18, max_iter: int = 100,
           n_init: int = 10, sample_ids=None) -> ClusteringResult:
    """k-means++ seeded Lloyd iterations plus a Hartigan pass; best of ``n_init`` restarts.

    Levels are renumbered so that level 0 has the lowest centroid.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if k < 2:
        raise ContractError(f"k must be at least 2, got {k}")
    if np.unique(x).size < k:
        raise DataError(f"{np.unique(x).size} distinct values cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, labels = _lloyd(x, _kmeanspp(x, k, rng), max_iter)
        if np.unique(labels).size < k:
            continue
        centers, labels = _hartigan(x, labels, k)
        if np.unique(labels).size < k:
            continue
        inertia = float(np.sum((x - centers[labels]) ** 2))
        if best is None or inertia < best[0] - 1e-12:
            best = (inertia, centers, labels)
    if best is None:
        raise DataError(f"k-means could not populate {k} clusters")
    inertia, centers, labels = best
    order = np.argsort(centers, kind="stable")
    rank = np.empty(k, dtype=np.int64)
    rank[order] = np.arange(k)
    labels = rank[labels]
    centers = centers[order]
    return ClusteringResult(k, centers.tolist(), labels, silhouette(x, labels), inertia,
                            None if sample_ids is None else list(sample_ids))


def silhouette(values, labels) -> float:
    """Mean silhouette; members of singleton clusters score 0.

    Uses sorted prefix sums, so memory stays linear in the sample count.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    ks = np.unique(labels)
    if ks.size < 2:
        raise ContractError("silhouette needs at least two clusters")
    # (cluster count, N): summed distance from each point to every cluster
    dist_sum = np.empty((ks.size, x.size))
    sizes = np.empty(ks.size)
    for j, k in enumerate(ks):
        m = np.sort(x[labels == k])
        pre = np.concatenate([[0.0], np.cumsum(m)])
        below = np.searchsorted(m, x, side="right")
        dist_sum[j] = x * below - pre[below] + (pre[-1] - pre[below]) - x * (m.size - below)
        sizes[j] = m.size
    own = np.searchsorted(ks, labels)
    idx = np.arange(x.size)
    own_size = sizes[own]
    a = dist_sum[own, idx] / np.maximum(own_size - 1, 1)
    mean_other = dist_sum / sizes[:, None]
    mean_other[own, idx] = np.inf
    b = mean_other.min(axis=0)
    m = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where((own_size > 1) & (m > 0), (b - a) / m, 0.0)
    return float(s.mean())


def select_k(values, k_min: int = 2, k_max: int = 10, seed: int = 18, sample_ids=None) -> ClusteringResult:
    """k in [k_min, k_max] with the highest silhouette; ties go to the smaller k."""
    x = np.asarray(values, dtype=np.float64).ravel()
    distinct = np.unique(x).size
    if distinct < k_min:
        raise DataError(f"{distinct} distinct values, need at least {k_min}")
    best = None
    for k in range(k_min, min(k_max, distinct) + 1):
        res = kmeans(x, k, seed, sample_ids=sample_ids)
        if best is None or res.silhouette > best.silhouette:
            best = res
    return best


def assign_levels(values, centroids) -> np.ndarray:
    """Nearest-centroid level for new altitudes (centroids ascending)."""
    x = np.asarray(values, dtype=np.float64).ravel()
    c = np.asarray(centroids, dtype=np.float64)
    return np.argmin(np.abs(x[:, None] - c[None, :]), axis=1)


def write_height_levels(result: ClusteringResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_json(), indent=2))


def read_height_levels(path) -> dict:
    obj = json.loads(Path(path).read_text())
    for key in ("k", "centroids", "assignment", "silhouette"):
        if key not in obj:
            raise DataError(f"{path}: missing key {key!r}")
    return obj
