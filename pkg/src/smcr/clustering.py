"""Density clustering of target features and reliability filtering.

Every point is clustered three times: at the working radius ``eps`` and at a
shrunken and an enlarged radius.  How much a point's cluster changes between
the runs (Jaccard overlap of member sets) decides whether its cluster label is
trusted; untrusted and noise points become one-sample classes.

Reliability of point ``f`` with ratios ``rs = J(g, g_shrink)`` and
``re = J(g, g_enlarge)``::

    c1 = max(0, rs + re - eta1)
    c2 = max(0, rs - re - eta2)
    accepted  <=>  c1 > 0 and c2 > 0

``eta1 = q + m`` and ``eta2 = q - m`` where ``q`` is the nearest-rank 90th
percentile of the shrink ratios recorded at the first epoch and ``m`` the
largest enlarge ratio of the current epoch.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DomainError, ShapeError

NOISE = -1


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray
    eps: float
    min_pts: int

    @property
    def num_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size and self.labels.max() >= 0 else 0

    @property
    def noise(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NOISE)


@dataclass(frozen=True, eq=False)
class PseudoLabels:
    labels: np.ndarray
    num_clusters: int     # reliable clusters
    num_outliers: int     # one-sample classes

    @property
    def num_classes(self) -> int:
        return self.num_clusters + self.num_outliers

    def __len__(self) -> int:
        return self.labels.size


@dataclass(frozen=True, eq=False)
class ReliabilityReport:
    ratio_shrink: np.ndarray
    ratio_enlarge: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    accepted: np.ndarray
    eta1: float
    eta2: float
    eps: float
    eps_shrink: float
    eps_enlarge: float
    clusters: np.ndarray              # cluster id at eps, NOISE for noise
    shrink_population: np.ndarray     # ratios eligible for the first-epoch quantile

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "cluster", "ratio_shrink", "ratio_enlarge", "c1", "c2", "accepted"])
            for i in range(self.c1.size):
                w.writerow([
                    i, int(self.clusters[i]), repr(float(self.ratio_shrink[i])),
                    repr(float(self.ratio_enlarge[i])), repr(float(self.c1[i])),
                    repr(float(self.c2[i])), int(bool(self.accepted[i])),
                ])


@dataclass(frozen=True)
class ClusterConfig:
    eps: Optional[float] = None      # None: mean distance to the min_pts-th neighbour
    shrink_factor: float = 0.9
    enlarge_factor: float = 1.1
    min_pts: int = 4
    quantile: float = 0.9
    criteria_enabled: bool = True
    # "clustered": threshold statistics come from points inside clusters only;
    # "all": noise points (whose ratios are trivially 1) are included as well.
    population: str = "clustered"


def pairwise_distances(features) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError("features must be a non-empty 2-D array")
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _dbscan_dist(dist: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    n = dist.shape[0]
    adj = dist <= eps
    core = adj.sum(axis=1) >= min_pts   # the point itself counts
    labels = np.full(n, NOISE, dtype=np.int64)
    cid = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        labels[i] = cid
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in np.flatnonzero(adj[p]):
                if labels[q] == NOISE:
                    labels[q] = cid
                    if core[q]:
                        queue.append(q)
        cid += 1
    return labels


def _check_radius(eps, min_pts):
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    if int(min_pts) < 1:
        raise DomainError(f"min_pts must be at least 1, got {min_pts}")


def dbscan(features, eps: float, min_pts: int, dist: Optional[np.ndarray] = None) -> ClusterAssignment:
    """DBSCAN with Euclidean distance and ascending-index scan order.

    A border point reachable from several clusters joins the one that is
    discovered first.  Pass ``dist`` to reuse a precomputed distance matrix.
    """
    _check_radius(eps, min_pts)
    if dist is None:
        dist = pairwise_distances(features)
    return ClusterAssignment(_dbscan_dist(dist, eps, int(min_pts)), float(eps), int(min_pts))


def overlap_ratio(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        raise DomainError("overlap of two empty sets is undefined")
    return len(a & b) / len(union)


def _singleton_labels(labels: np.ndarray) -> np.ndarray:
    # noise point i becomes its own cluster {i}
    n = labels.size
    return np.where(labels == NOISE, n + np.arange(n), labels)


def pointwise_jaccard(labels_a: np.ndarray, labels_b: np.ndarray) -> np.ndarray:
    """``|A(i) & B(i)| / |A(i) | B(i)|`` for every point, A/B its clusters in each run."""
    a = _singleton_labels(np.asarray(labels_a))
    b = _singleton_labels(np.asarray(labels_b))
    _, ia, na = np.unique(a, return_inverse=True, return_counts=True)
    _, ib, nb = np.unique(b, return_inverse=True, return_counts=True)
    _, iab, nab = np.unique(ia * (ib.max() + 1) + ib, return_inverse=True, return_counts=True)
    inter = nab[iab]
    return inter / (na[ia] + nb[ib] - inter)


@dataclass(frozen=True, eq=False)
class Stability:
    ratio_shrink: np.ndarray
    ratio_enlarge: np.ndarray
    base: ClusterAssignment
    shrunk: ClusterAssignment
    enlarged: ClusterAssignment


def stability_ratios(features, eps, eps_shrink, eps_enlarge, min_pts, dist=None) -> Stability:
    if not (0 < eps_shrink < eps < eps_enlarge):
        raise DomainError(f"need 0 < eps_shrink < eps < eps_enlarge, got {eps_shrink}, {eps}, {eps_enlarge}")
    if dist is None:
        dist = pairwise_distances(features)
    base = dbscan(None, eps, min_pts, dist)
    shrunk = dbscan(None, eps_shrink, min_pts, dist)
    enlarged = dbscan(None, eps_enlarge, min_pts, dist)
    return Stability(
        pointwise_jaccard(base.labels, shrunk.labels),
        pointwise_jaccard(base.labels, enlarged.labels),
        base, shrunk, enlarged,
    )


def nearest_rank(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise DomainError("quantile of an empty list")
    # small slack keeps q*n from drifting past an integer rank
    rank = min(max(math.ceil(q * v.size - 1e-9), 1), v.size)
    return float(v[rank - 1])


def compute_thresholds(first_epoch_shrink_ratios, current_epoch_enlarge_ratios, quantile: float = 0.9) -> Tuple[float, float]:
    first = np.asarray(first_epoch_shrink_ratios, dtype=np.float64)
    current = np.asarray(current_epoch_enlarge_ratios, dtype=np.float64)
    if first.size == 0 or current.size == 0:
        raise DomainError("threshold statistics need non-empty ratio lists")
    q = nearest_rank(first, quantile)
    m = float(current.max())
    return q + m, q - m


def criteria(ratio_shrink, ratio_enlarge, eta1, eta2):
    rs = np.asarray(ratio_shrink, dtype=np.float64)
    re = np.asarray(ratio_enlarge, dtype=np.float64)
    c1 = np.maximum(0.0, rs + re - eta1)
    c2 = np.maximum(0.0, rs - re - eta2)
    return c1, c2, (c1 > 0) & (c2 > 0)


def auto_eps(dist: np.ndarray, min_pts: int) -> float:
    """Mean distance from each point to its ``min_pts``-th nearest other point."""
    n = dist.shape[0]
    k = min(int(min_pts), n - 1)
    if k < 1:
        raise DomainError("need at least two points to pick eps automatically")
    kth = np.partition(dist, k, axis=1)[:, k]
    eps = float(kth.mean())
    if not eps > 0:
        raise DomainError("all points coincide; eps would be zero")
    return eps


def assign_pseudo_labels(clusters: np.ndarray, accepted: np.ndarray) -> PseudoLabels:
    """Keep accepted points in their cluster; everything else becomes a singleton."""
    clusters = np.asarray(clusters)
    keep = accepted & (clusters != NOISE)
    labels = np.empty(clusters.size, dtype=np.int64)
    kept_ids = np.unique(clusters[keep])
    remap = {int(c): j for j, c in enumerate(kept_ids)}
    for i in np.flatnonzero(keep):
        labels[i] = remap[int(clusters[i])]
    rest = np.flatnonzero(~keep)
    labels[rest] = len(kept_ids) + np.arange(rest.size)
    return PseudoLabels(labels, len(kept_ids), int(rest.size))


def generate_pseudo_labels(features, config: ClusterConfig = ClusterConfig(), cached_first_epoch_ratios=None):
    """Cluster ``features`` and turn the result into pseudo-labels.

    Returns ``(PseudoLabels, ReliabilityReport)``.  On the first epoch pass
    ``cached_first_epoch_ratios=None``; the report's ``shrink_population`` is
    what later epochs should pass back in.
    """
    dist = pairwise_distances(features)
    eps = config.eps if config.eps is not None else auto_eps(dist, config.min_pts)
    eps_s, eps_e = eps * config.shrink_factor, eps * config.enlarge_factor

    if not config.criteria_enabled:
        base = dbscan(None, eps, config.min_pts, dist)
        clustered = base.labels != NOISE
        ones = np.ones(clustered.size)
        report = ReliabilityReport(
            ones, ones, ones, ones, clustered, float("nan"), float("nan"),
            eps, eps_s, eps_e, base.labels, np.empty(0),
        )
        return assign_pseudo_labels(base.labels, clustered), report

    st = stability_ratios(None, eps, eps_s, eps_e, config.min_pts, dist)
    if config.population == "clustered":
        eligible = st.base.labels != NOISE
        if not eligible.any():
            eligible = np.ones_like(eligible)
    elif config.population == "all":
        eligible = np.ones(st.base.labels.size, dtype=bool)
    else:
        raise DomainError(f"unknown threshold population {config.population!r}")

    population = st.ratio_shrink[eligible]
    first = population if cached_first_epoch_ratios is None else cached_first_epoch_ratios
    eta1, eta2 = compute_thresholds(first, st.ratio_enlarge[eligible], config.quantile)
    c1, c2, accepted = criteria(st.ratio_shrink, st.ratio_enlarge, eta1, eta2)
    report = ReliabilityReport(
        st.ratio_shrink, st.ratio_enlarge, c1, c2, accepted, eta1, eta2,
        eps, eps_s, eps_e, st.base.labels, population,
    )
    return assign_pseudo_labels(st.base.labels, accepted), report
