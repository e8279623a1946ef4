"""End-to-end training: synthetic pretraining, two refinement branches, fusion.

Branch DTHR trains on translated source samples plus pseudo-labeled target
samples; branch RIHR trains on raw source samples plus its own pseudo-labeled
target samples.  Both start from the same pretrained encoder.  In ``col``
mode each branch is additionally supervised by soft triplet scores from the
other branch's momentum encoder.

Target identity labels never enter a training path: :func:`adapt` strips
them, and pseudo-label purity is measured by an optional monitor that holds
the withheld labels.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .clustering import ClusterConfig, PseudoLabels, ReliabilityReport, generate_pseudo_labels
from .data import Domain, DomainDataset, concat_datasets, pk_batch
from .errors import AlignmentError, ContractError, DomainError, ShapeError
from .evaluation import RetrievalResult, evaluate_features, pseudo_label_purity
from .losses import (
    HybridLabelSystem,
    build_label_system,
    collaborative_loss,
    joint_contrastive,
    soft_triplet_scores,
    update_prototypes,
)
from .numerics import (
    EncoderParams,
    MomentumParams,
    encode_backward,
    encode_batch,
    init_encoder,
    learning_rate_at,
    momentum_update,
    encoder_blocks,
    encoder_from_blocks,
    sgd_step,
)
from .textio import fmt_float, format_kv, read_blocks, write_blocks
from .translator import fit_translator, perturb_translator, translate_dataset

log = logging.getLogger(__name__)

DTHR = "DTHR"
RIHR = "RIHR"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    P: int = 16
    K: int = 4
    base_lr: float = 0.00035
    lr_step: int = 20
    weight_decay: float = 0.0005
    lam: float = 0.999
    alpha: float = 0.5
    beta: float = 0.01
    tau: float = 0.05
    prototype_momentum: float = 0.2
    mode: str = "col"
    criteria_enabled: bool = True
    use_pretraining: bool = True
    seed: int = 0
    # encoder
    hidden_dims: Tuple[int, ...] = (128,)
    output_dim: int = 64
    activation: str = "tanh"
    optimizer: str = "sgd"
    pretrain_epochs: int = 50
    iters_per_epoch: Optional[int] = None   # None: one pass over the pooled samples
    # clustering
    eps: Optional[float] = None
    shrink_factor: float = 0.9
    enlarge_factor: float = 1.1
    min_pts: int = 4
    quantile: float = 0.9
    threshold_population: str = "clustered"
    # translator
    translator_components: int = 0
    translator_noise: float = 0.0
    verbatim_col: bool = False

    def __post_init__(self):
        if not (0.0 <= self.lam < 1.0):
            raise DomainError(f"lam must lie in [0, 1), got {self.lam}")
        if not (0.0 <= self.alpha <= 1.0):
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (0.0 <= self.beta <= 1.0):
            raise DomainError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.tau > 0:
            raise DomainError("tau must be positive")
        if self.mode not in ("ind", "col"):
            raise DomainError(f"mode must be 'ind' or 'col', got {self.mode!r}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise DomainError("epoch counts must be non-negative")
        if self.P < 1 or self.K < 1:
            raise DomainError("P and K must be positive")
        if self.activation != "tanh" or self.optimizer != "sgd":
            raise DomainError("only the tanh activation and plain SGD are implemented")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(
            eps=self.eps, shrink_factor=self.shrink_factor, enlarge_factor=self.enlarge_factor,
            min_pts=self.min_pts, quantile=self.quantile, criteria_enabled=self.criteria_enabled,
            population=self.threshold_population,
        )

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


@dataclass
class BranchState:
    tag: str
    encoder: EncoderParams
    momentum: MomentumParams
    label_system: Optional[HybridLabelSystem] = None
    pseudo: Optional[PseudoLabels] = None
    first_epoch_ratios: Optional[np.ndarray] = None

    @classmethod
    def start(cls, tag: str, encoder: EncoderParams) -> "BranchState":
        return cls(tag, encoder.copy(), MomentumParams.start(encoder))

    def same_as(self, other: "BranchState") -> bool:
        def eq(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))
        return (
            self.encoder.allclose(other.encoder)
            and self.momentum.params.allclose(other.momentum.params)
            and self.momentum.k == other.momentum.k
            and eq(None if self.pseudo is None else self.pseudo.labels,
                   None if other.pseudo is None else other.pseudo.labels)
            and eq(None if self.label_system is None else self.label_system.prototypes,
                   None if other.label_system is None else other.label_system.prototypes)
        )


@dataclass
class EpochPlan:
    inputs: np.ndarray        # pooled raw vectors: labeled pool first, then target
    class_ids: np.ndarray     # hybrid class id per pooled sample
    is_target: np.ndarray
    num_target: int
    report: ReliabilityReport


@dataclass
class RunReport:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    final: Dict[str, float] = field(default_factory=dict)

    COLUMNS = (
        "epoch", "lr",
        "dthr_joint", "rihr_joint", "col",
        "dthr_mc", "dthr_mo", "rihr_mc", "rihr_mo",
        "dthr_eta1", "dthr_eta2", "rihr_eta1", "rihr_eta2",
        "dthr_purity", "rihr_purity",
    )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for row in self.epochs:
                w.writerow([_cell(row.get(c)) for c in self.COLUMNS])

    def metrics_text(self) -> str:
        return format_kv({k: float(v) for k, v in sorted(self.final.items())})


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else fmt_float(v)
    return str(v)


class PurityMonitor:
    """Holds withheld target labels; training code only ever sees the returned score."""

    def __init__(self, truth):
        self._truth = np.asarray(truth).copy()

    def __call__(self, pseudo: PseudoLabels) -> float:
        return pseudo_label_purity(pseudo, self._truth)


# ---------------------------------------------------------------------------
# supervised pretraining


def _supervised_epoch(encoder, pool: DomainDataset, lr, config: TrainConfig, rng):
    feats, _ = encode_batch(encoder, pool.x)
    hls = build_label_system((feats, pool.identity))
    class_ids = hls.source_class_ids(pool.identity)
    iters = config.iters_per_epoch or math.ceil(len(pool) / config.batch_size)
    losses = []
    for _ in range(iters):
        idx = pk_batch(class_ids, min(config.P, hls.num_classes), config.K, rng)
        f, cache = encode_batch(encoder, pool.x[idx])
        loss, g = joint_contrastive(f, class_ids[idx], hls, config.tau)
        encoder = sgd_step(encoder, encode_backward(encoder, cache, g), lr, config.weight_decay)
        update_prototypes(hls, f, class_ids[idx], config.prototype_momentum)
        losses.append(loss)
    return encoder, float(np.mean(losses))


def train_supervised(encoder: EncoderParams, pool: DomainDataset, config: TrainConfig, epochs: int, seed) -> EncoderParams:
    if not pool.labeled:
        raise ContractError("supervised training needs a fully labeled pool")
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        encoder, loss = _supervised_epoch(encoder, pool, learning_rate_at(epoch, config.base_lr, config.lr_step), config, rng)
        log.debug("pretrain epoch %d loss %.4f", epoch, loss)
    return encoder


def initial_encoder(dim: int, config: TrainConfig) -> EncoderParams:
    return init_encoder(dim, config.hidden_dims, config.output_dim, np.random.SeedSequence([config.seed, 0]))


def synthetic_pretrain(synthetic: DomainDataset, source: DomainDataset, config: TrainConfig) -> EncoderParams:
    """Train one encoder on synthetic-to-source translated data plus source data."""
    if not synthetic.labeled or not source.labeled:
        raise ContractError("synthetic pretraining needs labeled synthetic and source data")
    encoder = initial_encoder(source.dim, config)
    if config.pretrain_epochs == 0:
        return encoder
    tr = fit_translator(synthetic.x, source.x, config.translator_components)
    synth2src = translate_dataset(tr, synthetic, Domain.SYNTH2SRC)
    pool = concat_datasets([synth2src, source], Domain.SOURCE)
    return train_supervised(encoder, pool, config, config.pretrain_epochs, np.random.SeedSequence([config.seed, 1]))


def source_only(source: DomainDataset, config: TrainConfig) -> EncoderParams:
    """Baseline encoder trained on labeled source data alone."""
    encoder = initial_encoder(source.dim, config)
    return train_supervised(encoder, source, config, config.pretrain_epochs, np.random.SeedSequence([config.seed, 1]))


# ---------------------------------------------------------------------------
# adaptation


def prepare_epoch(branch: BranchState, pool: DomainDataset, target: DomainDataset, config: TrainConfig) -> EpochPlan:
    """Re-cluster the target set and rebuild the branch's hybrid label system."""
    if not pool.labeled:
        raise ContractError("the labeled pool must carry identity labels")
    tgt_feats, _ = encode_batch(branch.encoder, target.x)
    pseudo, report = generate_pseudo_labels(tgt_feats, config.cluster_config(), branch.first_epoch_ratios)
    if branch.first_epoch_ratios is None and config.criteria_enabled:
        branch.first_epoch_ratios = report.shrink_population
    pool_feats, _ = encode_batch(branch.encoder, pool.x)
    hls = build_label_system((pool_feats, pool.identity), (tgt_feats, pseudo))
    branch.label_system = hls
    branch.pseudo = pseudo
    class_ids = np.concatenate([hls.source_class_ids(pool.identity), hls.target_class_ids(pseudo.labels)])
    is_target = np.concatenate([np.zeros(len(pool), bool), np.ones(len(target), bool)])
    return EpochPlan(np.concatenate([pool.x, target.x]), class_ids, is_target, len(target), report)


def branch_weight(tag: str, alpha: float) -> float:
    return alpha if tag == DTHR else 1.0 - alpha


def _triplet_anchors(labels: np.ndarray, is_target: np.ndarray) -> np.ndarray:
    anchors = []
    for i in np.flatnonzero(is_target):
        same = labels == labels[i]
        if same.sum() > 1 and (~same).any():
            anchors.append(i)
    return np.array(anchors, dtype=np.int64)


def train_step(branch: BranchState, plan: EpochPlan, idx: np.ndarray, lr: float, config: TrainConfig,
               teacher: Optional[MomentumParams] = None) -> Tuple[float, float]:
    """One SGD step of a branch on pooled indices ``idx``; returns (L_joint, L_col)."""
    hls = branch.label_system
    labels = plan.class_ids[idx]
    x = plan.inputs[idx]
    feats, cache = encode_batch(branch.encoder, x)
    l_joint, g_joint = joint_contrastive(feats, labels, hls, config.tau)
    w = branch_weight(branch.tag, config.alpha)
    beta = config.beta if teacher is not None else 0.0
    grad = 2.0 * (1.0 - beta) * w * g_joint
    l_col = float("nan")
    if teacher is not None:
        anchors = _triplet_anchors(labels, plan.is_target[idx])
        student = soft_triplet_scores(feats, labels, anchors)
        t_feats, _ = encode_batch(teacher.params, x)
        mined = ([s.positive for s in student], [s.negative for s in student])
        teacher_scores = soft_triplet_scores(t_feats, labels, anchors, mined)
        l_col, g_col = collaborative_loss(feats, student, teacher_scores, config.verbatim_col)
        grad = grad + beta * w * g_col
    grads = encode_backward(branch.encoder, cache, grad)
    branch.encoder = sgd_step(branch.encoder, grads, lr, config.weight_decay)
    branch.momentum = momentum_update(branch.momentum, branch.encoder, config.lam)
    update_prototypes(hls, feats, labels, config.prototype_momentum)
    return l_joint, l_col


def _iters(plan: EpochPlan, config: TrainConfig) -> int:
    return config.iters_per_epoch or math.ceil(plan.inputs.shape[0] / config.batch_size)


def run_epoch_branch(branch: BranchState, labeled_pool: DomainDataset, target: DomainDataset, epoch: int,
                     config: TrainConfig, seed) -> Tuple[BranchState, Dict[str, float]]:
    """Independent (non-collaborative) epoch of a single branch."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    plan = prepare_epoch(branch, labeled_pool, target, config)
    lr = learning_rate_at(epoch, config.base_lr, config.lr_step)
    losses = []
    for _ in range(_iters(plan, config)):
        idx = pk_batch(plan.class_ids, config.P, config.K, rng)
        losses.append(train_step(branch, plan, idx, lr, config)[0])
    return branch, _epoch_stats(branch, plan, losses, [])


def _epoch_stats(branch, plan, joint, col):
    return {
        "joint": float(np.mean(joint)) if joint else float("nan"),
        "col": float(np.mean(col)) if col else float("nan"),
        "mc": branch.pseudo.num_clusters,
        "mo": branch.pseudo.num_outliers,
        "eta1": plan.report.eta1,
        "eta2": plan.report.eta2,
    }


def make_translated_source(source: DomainDataset, target: DomainDataset, config: TrainConfig):
    tr = fit_translator(source.x, target.x, config.translator_components)
    if config.translator_noise > 0:
        tr = perturb_translator(tr, config.translator_noise, np.random.SeedSequence([config.seed, 2]))
    return tr, translate_dataset(tr, source, Domain.SRC2TGT)


def adapt(pretrained: EncoderParams, source: DomainDataset, target: DomainDataset, config: TrainConfig,
          monitor: Optional[Callable[[PseudoLabels], float]] = None,
          on_epoch: Optional[Callable[[int, BranchState, BranchState], None]] = None):
    """Run both branches for ``config.epochs`` epochs; returns ``(dthr, rihr, RunReport)``."""
    if not source.labeled:
        raise ContractError("source data must be labeled")
    target = target.strip_labels()
    _, src2tgt = make_translated_source(source, target, config)
    assert len(src2tgt) == len(source)

    b1 = BranchState.start(DTHR, pretrained)
    b2 = BranchState.start(RIHR, pretrained)
    rng1, rng2 = (np.random.default_rng(s) for s in np.random.SeedSequence([config.seed, 3]).spawn(2))
    report = RunReport()

    for epoch in range(config.epochs):
        lr = learning_rate_at(epoch, config.base_lr, config.lr_step)
        if config.mode == "ind":
            b1, s1 = run_epoch_branch(b1, src2tgt, target, epoch, config, rng1)
            b2, s2 = run_epoch_branch(b2, source, target, epoch, config, rng2)
            col = float("nan")
        else:
            plan1 = prepare_epoch(b1, src2tgt, target, config)
            plan2 = prepare_epoch(b2, source, target, config)
            j1, j2, c1, c2 = [], [], [], []
            for _ in range(max(_iters(plan1, config), _iters(plan2, config))):
                idx1 = pk_batch(plan1.class_ids, config.P, config.K, rng1)
                idx2 = pk_batch(plan2.class_ids, config.P, config.K, rng2)
                teacher1, teacher2 = b1.momentum, b2.momentum   # snapshot at batch start
                lj, lc = train_step(b1, plan1, idx1, lr, config, teacher=teacher2)
                j1.append(lj)
                c1.append(lc)
                lj, lc = train_step(b2, plan2, idx2, lr, config, teacher=teacher1)
                j2.append(lj)
                c2.append(lc)
            s1 = _epoch_stats(b1, plan1, j1, c1)
            s2 = _epoch_stats(b2, plan2, j2, c2)
            col = config.alpha * s1["col"] + (1.0 - config.alpha) * s2["col"]
        row = {
            "epoch": epoch, "lr": lr,
            "dthr_joint": s1["joint"], "rihr_joint": s2["joint"], "col": col,
            "dthr_mc": s1["mc"], "dthr_mo": s1["mo"], "rihr_mc": s2["mc"], "rihr_mo": s2["mo"],
            "dthr_eta1": s1["eta1"], "dthr_eta2": s1["eta2"], "rihr_eta1": s2["eta1"], "rihr_eta2": s2["eta2"],
        }
        if monitor is not None:
            row["dthr_purity"] = monitor(b1.pseudo)
            row["rihr_purity"] = monitor(b2.pseudo)
        report.epochs.append(row)
        log.info("epoch %d: joint %.4f/%.4f col %.4f clusters %d/%d", epoch, s1["joint"], s2["joint"], col, s1["mc"], s2["mc"])
        if on_epoch is not None:
            on_epoch(epoch, b1, b2)
    return b1, b2, report


# ---------------------------------------------------------------------------
# persistence


def save_branch(branch: BranchState, path) -> None:
    """Write encoder, momentum encoder, pseudo-labels and prototypes to one block file."""
    header = {
        "kind": "branch", "tag": branch.tag, "layers": len(branch.encoder.layers),
        "momentum_k": branch.momentum.k,
    }
    blocks = {**encoder_blocks(branch.encoder), **encoder_blocks(branch.momentum.params, "A_")}
    if branch.pseudo is not None:
        header["num_clusters"] = branch.pseudo.num_clusters
        blocks["pseudo_labels"] = branch.pseudo.labels
    hls = branch.label_system
    if hls is not None:
        blocks.update(prototypes=hls.prototypes, origins=hls.origins,
                      source_labels=hls.source_labels, target_labels=hls.target_labels)
    if branch.first_epoch_ratios is not None:
        blocks["first_epoch_ratios"] = branch.first_epoch_ratios
    write_blocks(path, header, blocks)


def load_branch(path) -> BranchState:
    header, blocks = read_blocks(path)
    if header.get("kind") != "branch" or header.get("tag") not in (DTHR, RIHR):
        raise ShapeError(f"{path} does not hold a branch state")
    n = int(header["layers"])
    encoder = encoder_from_blocks(blocks, n)
    branch = BranchState(header["tag"], encoder, MomentumParams(encoder_from_blocks(blocks, n, "A_"), int(header["momentum_k"])))
    if "pseudo_labels" in blocks:
        labels = blocks["pseudo_labels"].astype(np.int64)
        mc = int(header["num_clusters"])
        branch.pseudo = PseudoLabels(labels, mc, int(np.unique(labels).size) - mc)
    if "prototypes" in blocks:
        tgt = blocks["target_labels"].astype(np.int64)
        pl = branch.pseudo.labels if branch.pseudo is not None else np.empty(0, np.int64)
        branch.label_system = HybridLabelSystem(
            blocks["prototypes"], blocks["origins"].astype(np.int64), blocks["source_labels"].astype(np.int64),
            tgt, [np.flatnonzero(pl == t) for t in tgt],
        )
    if "first_epoch_ratios" in blocks:
        branch.first_epoch_ratios = blocks["first_epoch_ratios"]
    return branch


# ---------------------------------------------------------------------------
# inference


def extract_embeddings(model: Union[BranchState, EncoderParams, Tuple[BranchState, BranchState]], x, alpha: float = 0.5) -> np.ndarray:
    """Unit features of every row of ``x``.

    A ``(dthr, rihr)`` pair yields the concatenation
    ``[sqrt(alpha) f1, sqrt(1 - alpha) f2]``.
    """
    x = x.x if isinstance(x, DomainDataset) else np.asarray(x, dtype=np.float64)
    if isinstance(model, tuple):
        b1, b2 = model
        f1 = extract_embeddings(b1, x)
        f2 = extract_embeddings(b2, x)
        return np.concatenate([math.sqrt(alpha) * f1, math.sqrt(1.0 - alpha) * f2], axis=1)
    params = model.encoder if isinstance(model, BranchState) else model
    feats, _ = encode_batch(params, x)
    return feats


def evaluate_model(model, dataset: DomainDataset, alpha: float = 0.5) -> RetrievalResult:
    return evaluate_features(extract_embeddings(model, dataset, alpha), dataset.identity, dataset.camera)


def final_metrics(b1: BranchState, b2: BranchState, dataset: DomainDataset, alpha: float = 0.5) -> Dict[str, float]:
    out = {}
    for name, model in (("dthr", b1), ("rihr", b2), ("fused", (b1, b2))):
        res = evaluate_model(model, dataset, alpha)
        out[f"{name}_mAP"] = res.mAP
        for k, v in res.cmc.items():
            out[f"{name}_rank{k}"] = v
    return out


def align_label_systems(hls1: HybridLabelSystem, hls2: HybridLabelSystem) -> List[Tuple[int, int]]:
    """Greedy one-to-one matching of target classes by shared member count.

    Returns ``(i, j)`` pairs of target-class positions (0-based within each
    system's target block), ordered by ``i``.
    """
    n1, n2 = hls1.num_target, hls2.num_target
    overlap = np.zeros((n1, n2), dtype=np.int64)
    owner2 = {}
    for j, m in enumerate(hls2.target_members):
        for s in m.tolist():
            owner2[s] = j
    for i, m in enumerate(hls1.target_members):
        for s in m.tolist():
            j = owner2.get(s)
            if j is not None:
                overlap[i, j] += 1
    pairs = []
    if overlap.size:
        cand = np.argwhere(overlap > 0)
        order = np.lexsort((cand[:, 1], cand[:, 0], -overlap[cand[:, 0], cand[:, 1]]))
        used1, used2 = set(), set()
        for i, j in cand[order]:
            if i not in used1 and j not in used2:
                used1.add(i)
                used2.add(j)
                pairs.append((int(i), int(j)))
    if not pairs:
        raise AlignmentError("the two label systems share no target members", overlap)
    return sorted(pairs)


@dataclass(frozen=True, eq=False)
class FusedScores:
    pairs: List[Tuple[int, int]]
    scores: np.ndarray


def classifier_scores(branch: BranchState, x) -> np.ndarray:
    """Cosine scores of ``x`` against the branch's target-class prototypes."""
    f, _ = encode_batch(branch.encoder, x)
    return branch.label_system.target_prototypes() @ f


def fuse_predict(b1: BranchState, b2: BranchState, x, alpha: float = 0.5, pairs=None) -> FusedScores:
    if b1.label_system is None or b2.label_system is None:
        raise AlignmentError("both branches need a label system")
    if pairs is None:
        pairs = align_label_systems(b1.label_system, b2.label_system)
    s1 = classifier_scores(b1, x)
    s2 = classifier_scores(b2, x)
    i = np.array([p[0] for p in pairs], dtype=np.int64)
    j = np.array([p[1] for p in pairs], dtype=np.int64)
    return FusedScores(list(pairs), alpha * s1[i] + (1.0 - alpha) * s2[j])
