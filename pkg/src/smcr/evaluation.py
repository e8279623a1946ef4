"""Retrieval metrics under the usual re-ID protocol and pseudo-label purity.

Gallery entries sharing both identity and camera with the query are removed
before ranking; relevant entries are the remaining ones with the query's
identity.  Ranking is by descending cosine similarity with ties broken by
ascending gallery index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import EvaluationError, ShapeError


@dataclass(frozen=True, eq=False)
class RetrievalSet:
    features: np.ndarray
    identity: np.ndarray
    camera: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        ids = np.asarray(self.identity)
        cams = np.asarray(self.camera)
        if f.ndim != 2 or ids.shape != (f.shape[0],) or cams.shape != (f.shape[0],):
            raise ShapeError("features, identities and cameras are misaligned")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "identity", ids)
        object.__setattr__(self, "camera", cams)

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx) -> "RetrievalSet":
        return RetrievalSet(self.features[idx], self.identity[idx], self.camera[idx])


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def ranked_relevance(query_feature, gallery: RetrievalSet, query_identity, query_camera) -> Optional[np.ndarray]:
    """Boolean relevance of the ranked, junk-filtered gallery; None if nothing is relevant."""
    q = _unit(np.asarray(query_feature, dtype=np.float64))
    sims = _unit(gallery.features) @ q
    valid = ~((gallery.identity == query_identity) & (gallery.camera == query_camera))
    idx = np.flatnonzero(valid)
    order = idx[np.lexsort((idx, -sims[idx]))]
    rel = gallery.identity[order] == query_identity
    if not rel.any():
        return None
    return rel


def average_precision(query_feature, gallery: RetrievalSet, query_identity, query_camera) -> Optional[float]:
    """AP of one query, or None (skip signal) when it has no relevant entry."""
    rel = ranked_relevance(query_feature, gallery, query_identity, query_camera)
    if rel is None:
        return None
    hits = np.flatnonzero(rel)
    precision = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision.mean())


@dataclass
class RetrievalResult:
    mAP: float
    cmc: Dict[int, float]
    per_query_ap: List[Optional[float]]
    first_hit: List[Optional[int]]  # 0-based rank of the first relevant entry
    skipped: List[int] = field(default_factory=list)

    def rank(self, k: int) -> float:
        return self.cmc[k]

    def write_per_query(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query", "ap", "first_hit"])
            for i, (ap, hit) in enumerate(zip(self.per_query_ap, self.first_hit)):
                w.writerow([i, "" if ap is None else repr(ap), "" if hit is None else hit])


def evaluate(queries: RetrievalSet, gallery: RetrievalSet, ks: Sequence[int] = (1, 5, 10)) -> RetrievalResult:
    aps: List[Optional[float]] = []
    hits: List[Optional[int]] = []
    skipped = []
    for i in range(len(queries)):
        rel = ranked_relevance(queries.features[i], gallery, queries.identity[i], queries.camera[i])
        if rel is None:
            aps.append(None)
            hits.append(None)
            skipped.append(i)
            continue
        pos = np.flatnonzero(rel)
        aps.append(float((np.arange(1, pos.size + 1) / (pos + 1)).mean()))
        hits.append(int(pos[0]))
    done = [h for h in hits if h is not None]
    if not done:
        raise EvaluationError("every query was skipped: no relevant gallery entries")
    first = np.array(done)
    cmc = {int(k): float(np.mean(first < k)) for k in ks}
    return RetrievalResult(float(np.mean([a for a in aps if a is not None])), cmc, aps, hits, skipped)


def mean_ap(queries: RetrievalSet, gallery: RetrievalSet) -> float:
    return evaluate(queries, gallery, ks=()).mAP


def cmc(queries: RetrievalSet, gallery: RetrievalSet, k: int) -> float:
    return evaluate(queries, gallery, ks=(k,)).cmc[k]


def query_gallery_split(identity, camera):
    """First sample of every (identity, camera) pair is a query, the rest form the gallery."""
    identity = np.asarray(identity)
    camera = np.asarray(camera)
    seen = set()
    query = []
    for i, key in enumerate(zip(identity.tolist(), camera.tolist())):
        if key not in seen:
            seen.add(key)
            query.append(i)
    query = np.array(query, dtype=np.int64)
    gallery = np.setdiff1d(np.arange(identity.size), query)
    return query, gallery


def evaluate_features(features, identity, camera, ks=(1, 5, 10)) -> RetrievalResult:
    rs = RetrievalSet(features, identity, camera)
    q, g = query_gallery_split(identity, camera)
    return evaluate(rs.subset(q), rs.subset(g), ks)


def pseudo_label_purity(pseudo, truth) -> float:
    """Share of samples whose pseudo-class agrees with that class's majority identity."""
    labels = pseudo.labels if hasattr(pseudo, "labels") else np.asarray(pseudo)
    truth = np.asarray(truth)
    if labels.shape != truth.shape:
        raise ShapeError(f"{labels.size} pseudo-labels for {truth.size} ground-truth labels")
    if labels.size == 0:
        raise ShapeError("purity of an empty labelling")
    _, p = np.unique(labels, return_inverse=True)
    _, t = np.unique(truth, return_inverse=True)
    table = np.zeros((p.max() + 1, t.max() + 1), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return float(table.max(axis=1).sum() / labels.size)
