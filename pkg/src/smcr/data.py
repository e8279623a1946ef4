"""Parametric multi-domain toy datasets, their on-disk format and PK batching.

Each domain is a set of identities; an identity is a Gaussian blob around a
latent centroid, observed under several cameras that each add a fixed offset.
The whole domain is then pushed through an affine "style" transform
(orthogonal rotation, per-coordinate scale, offset).  Two domains built from
the same generator thus share identity geometry up to an affine shift.

On disk a dataset is a directory holding ``meta.txt`` (``key=value``) and
``samples.csv`` (``identity,camera,f0,...``; unlabeled identities are ``-1``).
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DomainError, IntegrityError, ParseError, SamplingError, ShapeError
from .textio import fmt_float, read_kv, write_kv

UNLABELED = -1


class Domain(str, enum.Enum):
    SYNTHETIC = "SYNTHETIC"
    SOURCE = "SOURCE"
    TARGET = "TARGET"
    SYNTH2SRC = "SYNTH2SRC"
    SRC2TGT = "SRC2TGT"


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    identity: int
    domain: Domain
    camera: int


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """Column-oriented container: ``x`` is ``(N, dim)``, labels are ``(N,)``."""

    x: np.ndarray
    identity: np.ndarray
    camera: np.ndarray
    domain: Domain
    num_identities: int
    num_cameras: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 2:
            raise ShapeError(f"features must be 2-D, got {x.shape}")
        ident = np.asarray(self.identity, dtype=np.int64)
        cam = np.asarray(self.camera, dtype=np.int64)
        if ident.shape != (x.shape[0],) or cam.shape != (x.shape[0],):
            raise ShapeError("identity/camera columns must have one entry per sample")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "identity", ident)
        object.__setattr__(self, "camera", cam)
        object.__setattr__(self, "domain", Domain(self.domain))
        if self.num_cameras <= 0 or self.num_identities <= 0:
            raise IntegrityError("num_identities and num_cameras must be positive")
        if not np.all(np.isfinite(x)):
            raise IntegrityError("non-finite feature value")
        if np.any((ident < UNLABELED) | (ident >= self.num_identities)):
            raise IntegrityError(f"identity labels must lie in [0, {self.num_identities}) or be {UNLABELED}")
        if np.any((cam < 0) | (cam >= self.num_cameras)):
            raise IntegrityError(f"camera ids must lie in [0, {self.num_cameras})")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(self.identity != UNLABELED))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.identity[i]), self.domain, int(self.camera[i]))

    @property
    def samples(self):
        return list(self)

    def strip_labels(self) -> "DomainDataset":
        return replace(self, identity=np.full(len(self), UNLABELED, dtype=np.int64))

    def equals(self, other: "DomainDataset") -> bool:
        return (
            self.domain == other.domain
            and self.num_identities == other.num_identities
            and self.num_cameras == other.num_cameras
            and self.x.shape == other.x.shape
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.identity, other.identity)
            and np.array_equal(self.camera, other.camera)
        )


@dataclass(frozen=True)
class DomainSpec:
    num_identities: int
    samples_per_identity: int
    num_cameras: int
    input_dim: int
    identity_spread: float
    camera_shift_scale: float = 0.0
    rotation_seed: Optional[int] = None     # None keeps the canonical axes
    # None: Haar-random rotation; t >= 0: orthogonal factor of I + t*G, so
    # small t stays close to the canonical axes
    rotation_strength: Optional[float] = None
    scale: Optional[Sequence[float]] = None  # defaults to all ones
    offset: Optional[Sequence[float]] = None  # defaults to zeros
    rng_seed: int = 0
    domain: Domain = Domain.SOURCE
    # Cameras default to the identity seed; sharing a camera seed across
    # domains gives them the same latent camera nuisance.
    camera_seed: Optional[int] = None
    centroid_scale: float = 1.0

    def __post_init__(self):
        for name in ("num_identities", "samples_per_identity", "num_cameras", "input_dim"):
            if int(getattr(self, name)) <= 0:
                raise DomainError(f"{name} must be positive")
        if not self.identity_spread > 0:
            raise DomainError("identity_spread must be positive")
        if self.rotation_strength is not None and self.rotation_strength < 0:
            raise DomainError("rotation_strength must be non-negative")
        if self.camera_shift_scale < 0:
            raise DomainError("camera_shift_scale must be non-negative")
        if self.scale is not None:
            if len(self.scale) != self.input_dim or np.any(np.asarray(self.scale) <= 0):
                raise DomainError("scale needs input_dim strictly positive entries")
        if self.offset is not None and len(self.offset) != self.input_dim:
            raise DomainError("offset needs input_dim entries")

    def scale_vector(self) -> np.ndarray:
        if self.scale is None:
            return np.ones(self.input_dim)
        return np.asarray(self.scale, dtype=np.float64)

    def offset_vector(self) -> np.ndarray:
        if self.offset is None:
            return np.zeros(self.input_dim)
        return np.asarray(self.offset, dtype=np.float64)

    def rotation_matrix(self) -> np.ndarray:
        return random_rotation(self.input_dim, self.rotation_seed, self.rotation_strength)


def random_rotation(dim: int, seed: Optional[int], strength: Optional[float] = None) -> np.ndarray:
    """Seeded orthogonal matrix, or the identity when ``seed`` is None.

    Without ``strength`` the matrix is Haar-distributed.  With a strength
    ``t`` it is the Q factor of ``I + t * G / sqrt(dim)`` for Gaussian ``G``.
    """
    if seed is None:
        return np.eye(dim)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((dim, dim))
    if strength is not None:
        g = np.eye(dim) + strength * g / np.sqrt(dim)
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def generate_domain(spec: DomainSpec) -> DomainDataset:
    rng = np.random.default_rng(spec.rng_seed)
    d = spec.input_dim
    centroids = spec.centroid_scale * rng.standard_normal((spec.num_identities, d))
    cam_rng = rng if spec.camera_seed is None else np.random.default_rng(spec.camera_seed)
    cam_offsets = spec.camera_shift_scale * cam_rng.standard_normal((spec.num_cameras, d))

    n_per = spec.samples_per_identity
    ident = np.repeat(np.arange(spec.num_identities), spec.num_cameras * n_per)
    cam = np.tile(np.repeat(np.arange(spec.num_cameras), n_per), spec.num_identities)
    noise = spec.identity_spread * rng.standard_normal((ident.size, d))
    latent = centroids[ident] + cam_offsets[cam] + noise

    x = (latent * spec.scale_vector()) @ spec.rotation_matrix().T + spec.offset_vector()
    return DomainDataset(x, ident, cam, spec.domain, spec.num_identities, spec.num_cameras)


def concat_datasets(parts: Sequence[DomainDataset], domain: Domain) -> DomainDataset:
    """Stack datasets, shifting identity ids so classes stay disjoint."""
    xs, ids, cams = [], [], []
    shift = 0
    for ds in parts:
        xs.append(ds.x)
        ids.append(np.where(ds.identity == UNLABELED, UNLABELED, ds.identity + shift))
        cams.append(ds.camera)
        shift += ds.num_identities
    return DomainDataset(
        np.concatenate(xs), np.concatenate(ids), np.concatenate(cams), domain,
        shift, max(ds.num_cameras for ds in parts),
    )


# ---------------------------------------------------------------------------
# persistence

META_FILE = "meta.txt"
SAMPLES_FILE = "samples.csv"


def save_dataset(ds: DomainDataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    write_kv(
        os.path.join(path, META_FILE),
        {
            "dim": ds.dim,
            "num_identities": ds.num_identities,
            "num_cameras": ds.num_cameras,
            "domain": ds.domain.value,
            "count": len(ds),
        },
    )
    header = ",".join(["identity", "camera"] + [f"f{j}" for j in range(ds.dim)])
    rows = [header]
    for i in range(len(ds)):
        rows.append(
            f"{ds.identity[i]},{ds.camera[i]}," + ",".join(fmt_float(v) for v in ds.x[i])
        )
    with open(os.path.join(path, SAMPLES_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


def _meta_int(meta, key):
    if key not in meta:
        raise ParseError(f"{META_FILE} is missing key {key!r}")
    try:
        return int(meta[key])
    except ValueError:
        raise ParseError(f"{META_FILE}: {key} is not an integer: {meta[key]!r}") from None


def load_dataset(path) -> DomainDataset:
    meta_path = os.path.join(path, META_FILE)
    samples_path = os.path.join(path, SAMPLES_FILE)
    for p in (meta_path, samples_path):
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    meta = read_kv(meta_path)
    dim = _meta_int(meta, "dim")
    count = _meta_int(meta, "count")
    num_ids = _meta_int(meta, "num_identities")
    num_cams = _meta_int(meta, "num_cameras")
    try:
        domain = Domain(meta.get("domain", ""))
    except ValueError:
        raise ParseError(f"{META_FILE}: unknown domain {meta.get('domain')!r}") from None

    with open(samples_path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("samples.csv is empty", 1)
    expected_header = ["identity", "camera"] + [f"f{j}" for j in range(dim)]
    if lines[0].split(",") != expected_header:
        raise IntegrityError(f"samples.csv header does not match dim={dim}")

    body = [(n, ln) for n, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if len(body) != count:
        raise IntegrityError(f"meta.txt declares count={count} but samples.csv has {len(body)} rows")
    x = np.empty((count, dim))
    ident = np.empty(count, dtype=np.int64)
    cam = np.empty(count, dtype=np.int64)
    for r, (lineno, line) in enumerate(body):
        cells = line.split(",")
        if len(cells) != dim + 2:
            raise IntegrityError(
                f"samples.csv row {r} (line {lineno}) has {len(cells) - 2} feature values, expected {dim}"
            )
        try:
            ident[r] = int(cells[0])
            cam[r] = int(cells[1])
            x[r] = [float(c) for c in cells[2:]]
        except ValueError as exc:
            raise ParseError(f"samples.csv: {exc}", lineno) from None
    return DomainDataset(x, ident, cam, domain, num_ids, num_cams)


# ---------------------------------------------------------------------------
# batching


def pk_batch(labels, P: int, K: int, seed) -> np.ndarray:
    """Indices of ``P`` distinct classes with ``K`` members each.

    ``labels`` holds one class id per sample (``UNLABELED`` entries are never
    drawn).  Classes smaller than ``K`` are sampled with replacement.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if P < 1 or K < 1:
        raise SamplingError("P and K must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = np.asarray(labels)
    members = class_members(labels)
    if len(members) < P:
        raise SamplingError(f"need {P} labeled classes, only {len(members)} available")
    classes = sorted(members)
    chosen = rng.choice(len(classes), size=P, replace=False)
    out = []
    for c in chosen:
        idx = members[classes[c]]
        out.append(rng.choice(idx, size=K, replace=idx.size < K))
    return np.concatenate(out)


def class_members(labels) -> dict:
    labels = np.asarray(labels)
    valid = np.flatnonzero(labels != UNLABELED)
    order = valid[np.argsort(labels[valid], kind="stable")]
    uniq, starts = np.unique(labels[order], return_index=True)
    bounds = list(starts[1:]) + [order.size]
    return {int(u): order[s:e] for u, s, e in zip(uniq, starts, bounds)}
