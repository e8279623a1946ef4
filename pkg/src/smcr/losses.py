"""Hybrid-label prototype memory and the training objectives.

A hybrid label system stacks source ground-truth classes and target
pseudo-classes into one class space with a unit prototype per class.  The
joint contrastive loss is a temperature softmax of feature/prototype inner
products over that whole space.  The collaborative loss compares soft
triplet scores ``sigmoid(D+ - D-)`` of one branch against the momentum
encoder of the other.

Gradients are returned w.r.t. the (normalized) features; prototypes are
treated as constants and only move through :func:`update_prototypes`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .clustering import PseudoLabels
from .errors import DegenerateInputError, DomainError, LabelLookupError, MiningError, NumericError, ShapeError


class Origin(enum.IntEnum):
    SOURCE_GT = 0
    TARGET_CLUSTER = 1
    TARGET_SINGLETON = 2


@dataclass(eq=False)
class HybridLabelSystem:
    prototypes: np.ndarray            # (M_src + M_tgt, d), unit rows
    origins: np.ndarray               # Origin per class
    source_labels: np.ndarray         # ground-truth id of each source class
    target_labels: np.ndarray         # pseudo-label of each target class
    target_members: List[np.ndarray]  # target sample indices per target class
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        self._source_index = {int(l): i for i, l in enumerate(self.source_labels)}
        self._target_index = {int(l): self.num_source + i for i, l in enumerate(self.target_labels)}

    @property
    def num_source(self) -> int:
        return int(self.source_labels.size)

    @property
    def num_target(self) -> int:
        return int(self.target_labels.size)

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def source_class_ids(self, labels) -> np.ndarray:
        try:
            return np.array([self._source_index[int(l)] for l in np.atleast_1d(labels)], dtype=np.int64)
        except KeyError as exc:
            raise LabelLookupError(f"source label {exc.args[0]} is not in the label system") from None

    def target_class_ids(self, pseudo) -> np.ndarray:
        try:
            return np.array([self._target_index[int(l)] for l in np.atleast_1d(pseudo)], dtype=np.int64)
        except KeyError as exc:
            raise LabelLookupError(f"pseudo-label {exc.args[0]} is not in the label system") from None

    def target_prototypes(self) -> np.ndarray:
        return self.prototypes[self.num_source:]

    def copy(self) -> "HybridLabelSystem":
        return HybridLabelSystem(
            self.prototypes.copy(), self.origins.copy(), self.source_labels.copy(),
            self.target_labels.copy(), [m.copy() for m in self.target_members], list(self.warnings),
        )


def _normalized_means(features: np.ndarray, labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    out = np.zeros((classes.size, features.shape[1]))
    index = np.searchsorted(classes, labels)
    np.add.at(out, index, features)
    norms = np.linalg.norm(out, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("a class mean has zero norm")
    return out / norms[:, None]


def build_label_system(source_labeled, target_pseudo=None) -> HybridLabelSystem:
    """One class per source identity and one per pseudo-label.

    ``source_labeled`` is ``(features, labels)``; ``target_pseudo`` is
    ``(features, PseudoLabels)`` or None for a purely supervised system.
    Prototypes start as the normalized class means.
    """
    src_f, src_y = source_labeled
    src_f = np.asarray(src_f, dtype=np.float64)
    src_y = np.asarray(src_y, dtype=np.int64)
    if src_f.ndim != 2 or src_y.shape != (src_f.shape[0],):
        raise ShapeError("source features and labels are misaligned")
    warnings: List[str] = []
    src_classes = np.unique(src_y)
    protos = [_normalized_means(src_f, src_y, src_classes)] if src_classes.size else []
    origins = [np.full(src_classes.size, Origin.SOURCE_GT)]

    tgt_classes = np.empty(0, dtype=np.int64)
    members: List[np.ndarray] = []
    if target_pseudo is not None:
        tgt_f, pseudo = target_pseudo
        tgt_f = np.asarray(tgt_f, dtype=np.float64)
        labels = pseudo.labels if isinstance(pseudo, PseudoLabels) else np.asarray(pseudo)
        if tgt_f.shape[0] != labels.size:
            raise ShapeError("target features and pseudo-labels are misaligned")
        if tgt_f.shape[1] != src_f.shape[1]:
            raise ShapeError("source and target feature dimensions differ")
        tgt_classes = np.unique(labels)
        if isinstance(pseudo, PseudoLabels):
            declared = np.arange(pseudo.num_classes)
            missing = np.setdiff1d(declared, tgt_classes)
            for c in missing:
                warnings.append(f"pseudo-class {int(c)} has no members and was excluded")
        protos.append(_normalized_means(tgt_f, labels, tgt_classes))
        order = np.argsort(labels, kind="stable")
        bounds = np.searchsorted(labels[order], tgt_classes, side="right")
        starts = np.concatenate([[0], bounds[:-1]])
        members = [order[s:e] for s, e in zip(starts, bounds)]
        is_cluster = (
            tgt_classes < pseudo.num_clusters if isinstance(pseudo, PseudoLabels)
            else np.array([m.size > 1 for m in members])
        )
        origins.append(np.where(is_cluster, Origin.TARGET_CLUSTER, Origin.TARGET_SINGLETON))

    return HybridLabelSystem(
        np.concatenate(protos) if protos else np.empty((0, src_f.shape[1])),
        np.concatenate(origins).astype(np.int64),
        src_classes, tgt_classes, members, warnings,
    )


def update_prototypes(hls: HybridLabelSystem, batch_features, batch_class_ids, momentum: float = 0.2) -> HybridLabelSystem:
    """Move each touched prototype toward the batch mean of its class (in place)."""
    f = np.asarray(batch_features, dtype=np.float64)
    ids = np.asarray(batch_class_ids, dtype=np.int64)
    if np.any((ids < 0) | (ids >= hls.num_classes)):
        raise LabelLookupError("batch contains a class id outside the label system")
    touched, inverse = np.unique(ids, return_inverse=True)
    sums = np.zeros((touched.size, f.shape[1]))
    np.add.at(sums, inverse, f)
    means = sums / np.bincount(inverse)[:, None]
    new = momentum * hls.prototypes[touched] + (1.0 - momentum) * means
    norms = np.linalg.norm(new, axis=1)
    ok = norms > 0
    hls.prototypes[touched[ok]] = new[ok] / norms[ok, None]
    return hls


def joint_contrastive(features, class_ids, hls: HybridLabelSystem, tau: float = 0.05):
    """Mean cross-entropy of prototype similarities; returns ``(loss, dL/dfeatures)``."""
    if not tau > 0:
        raise DomainError("temperature must be positive")
    f = np.asarray(features, dtype=np.float64)
    ids = np.asarray(class_ids, dtype=np.int64)
    if f.ndim != 2 or ids.shape != (f.shape[0],):
        raise ShapeError("features and class ids are misaligned")
    if np.any((ids < 0) | (ids >= hls.num_classes)):
        bad = int(ids[(ids < 0) | (ids >= hls.num_classes)][0])
        raise LabelLookupError(f"class id {bad} is not in the label system")
    n = f.shape[0]
    logits = f @ hls.prototypes.T / tau
    top = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - top)
    denom = exp.sum(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(log_norm - logits[np.arange(n), ids]))
    probs = exp / denom
    probs[np.arange(n), ids] -= 1.0
    grad = probs @ hls.prototypes / (tau * n)
    return max(loss, 0.0), grad


def softmax_probabilities(features, hls: HybridLabelSystem, tau: float = 0.05) -> np.ndarray:
    logits = np.asarray(features, dtype=np.float64) @ hls.prototypes.T / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# soft triplets


@dataclass(frozen=True)
class SoftTripletScore:
    anchor: int
    positive: int
    negative: int
    d_pos: float
    d_neg: float
    s: float


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def soft_triplet_scores(batch_features, batch_labels, anchors=None, mined=None) -> List[SoftTripletScore]:
    """Scores for several anchors at once.

    Hardest positive = farthest same-label entry, hardest negative = closest
    other-label entry.  ``mined`` optionally fixes ``(positives, negatives)``
    per anchor so a teacher can be scored on the student's triplets.
    """
    f = np.asarray(batch_features, dtype=np.float64)
    y = np.asarray(batch_labels)
    n = f.shape[0]
    anchors = np.arange(n) if anchors is None else np.asarray(anchors, dtype=np.int64)
    if anchors.size == 0:
        return []
    diff = f[anchors][:, None, :] - f[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    rows = np.arange(anchors.size)
    if mined is None:
        same = y[anchors][:, None] == y[None, :]
        same[rows, anchors] = False
        other = y[anchors][:, None] != y[None, :]
        no_pos = ~same.any(axis=1)
        no_neg = ~other.any(axis=1)
        if no_pos.any() or no_neg.any():
            a = int(anchors[np.flatnonzero(no_pos | no_neg)[0]])
            kind = "positive" if no_pos.any() else "negative"
            raise MiningError(f"anchor {a} has no {kind} in the batch")
        pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
        neg = np.argmin(np.where(other, dist, np.inf), axis=1)
    else:
        pos, neg = (np.asarray(m, dtype=np.int64) for m in mined)
    dp, dn = dist[rows, pos], dist[rows, neg]
    s = _sigmoid(dp - dn)
    return [
        SoftTripletScore(int(a), int(p), int(q), float(u), float(v), float(w))
        for a, p, q, u, v, w in zip(anchors, pos, neg, dp, dn, s)
    ]


def softmax_triplet(batch_features, batch_labels, anchor: int, mined=None) -> SoftTripletScore:
    m = None if mined is None else ([mined[0]], [mined[1]])
    return soft_triplet_scores(batch_features, batch_labels, [anchor], m)[0]


def _distance_grad(f, grad, a, b, coef):
    d = f[a] - f[b]
    norm = np.sqrt(d @ d)
    if norm > 0:
        g = coef * d / norm
        grad[a] += g
        grad[b] -= g


def collaborative_loss(student_features, student_scores: Sequence[SoftTripletScore],
                       teacher_scores: Sequence[SoftTripletScore], verbatim: bool = False):
    """Soft-label cross-entropy between student and teacher triplet scores.

    Default form is binary cross-entropy with the teacher score as target::

        L = -mean(t log s + (1 - t) log(1 - s))

    ``verbatim=True`` uses ``-mean(s log t)`` instead (student outside the
    log).  Returns ``(loss, dL/dstudent_features)``.
    """
    if len(student_scores) != len(teacher_scores):
        raise ShapeError("student and teacher score lists differ in length")
    f = np.asarray(student_features, dtype=np.float64)
    grad = np.zeros_like(f)
    n = len(student_scores)
    if n == 0:
        return 0.0, grad
    s = np.array([sc.s for sc in student_scores])
    t = np.array([sc.s for sc in teacher_scores])
    if np.any((s <= 0) | (s >= 1)) or np.any((t <= 0) | (t >= 1)):
        raise NumericError("soft triplet scores must lie strictly inside (0, 1)")
    if verbatim:
        loss = -np.mean(s * np.log(t))
        dl_ds = -np.log(t) / n
        dl_dpos = dl_ds * s * (1.0 - s)
    else:
        loss = -np.mean(t * np.log(s) + (1.0 - t) * np.log1p(-s))
        dl_dpos = (s - t) / n
    for sc, coef in zip(student_scores, dl_dpos):
        _distance_grad(f, grad, sc.anchor, sc.positive, coef)
        _distance_grad(f, grad, sc.anchor, sc.negative, -coef)
    return float(loss), grad


def binary_entropy(t) -> float:
    t = np.asarray(t, dtype=np.float64)
    return float(-np.mean(t * np.log(t) + (1.0 - t) * np.log1p(-t)))


def total_loss(l_joint1: float, l_joint2: float, l_col: float, alpha: float = 0.5, beta: float = 0.01) -> float:
    vals = np.array([l_joint1, l_joint2, l_col], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise NumericError("loss components must be finite")
    return float(beta * l_col + 2.0 * (1.0 - beta) * (alpha * l_joint1 + (1.0 - alpha) * l_joint2))
