"""Label-preserving affine domain translator.

``translate`` maps ``x -> rotation @ (scale * x) + offset`` and copies the
identity label and camera unchanged.  ``fit_translator`` estimates the map by
moment matching between two unpaired sample collections; it stands in for an
image-to-image GAN and can be swapped for a learned model as long as the
fit/translate surface is kept.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Domain, DomainDataset, Sample
from .errors import DegenerateInputError, ShapeError
from .textio import read_blocks, write_blocks


@dataclass(frozen=True, eq=False)
class TranslatorParams:
    scale: np.ndarray
    rotation: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64)
        rot = np.asarray(self.rotation, dtype=np.float64)
        off = np.asarray(self.offset, dtype=np.float64)
        d = scale.shape[0]
        if scale.ndim != 1 or rot.shape != (d, d) or off.shape != (d,):
            raise ShapeError("scale, rotation and offset dimensions disagree")
        if np.any(scale <= 0):
            raise ShapeError("scale entries must be strictly positive")
        if not np.allclose(rot.T @ rot, np.eye(d), rtol=0.0, atol=1e-9):
            raise ShapeError("rotation is not orthogonal")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "offset", off)

    @property
    def dim(self) -> int:
        return self.scale.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "TranslatorParams":
        return cls(np.ones(dim), np.eye(dim), np.zeros(dim))

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise ShapeError(f"translator expects dim {self.dim}, got {X.shape[-1]}")
        return (X * self.scale) @ self.rotation.T + self.offset

    def invert(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=np.float64)
        return ((Y - self.offset) @ self.rotation) / self.scale


def _leading_directions(z: np.ndarray, k: int) -> np.ndarray:
    cov = np.cov(z, rowvar=False, bias=True)
    _, vecs = np.linalg.eigh(np.atleast_2d(cov))
    return vecs[:, ::-1][:, :k]


def fit_translator(src, dst, n_components: int = 0) -> TranslatorParams:
    """Affine map that moves ``src`` statistics onto ``dst`` statistics.

    With ``n_components == 0`` the rotation is the identity and the map
    matches per-coordinate mean and standard deviation exactly.  With
    ``n_components > 0`` the leading principal directions of the two
    standardized clouds are aligned first; means still match exactly and
    standard deviations match in the rotated frame.  Only the diagonal fit is
    idempotent: re-fitting its output against ``dst`` returns the identity.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or dst.ndim != 2 or src.shape[0] == 0 or dst.shape[0] == 0:
        raise ShapeError("both sample collections must be non-empty 2-D arrays")
    if src.shape[1] != dst.shape[1]:
        raise ShapeError(f"dimension mismatch: {src.shape[1]} vs {dst.shape[1]}")
    d = src.shape[1]
    mu_s, sd_s = src.mean(axis=0), src.std(axis=0)
    mu_d, sd_d = dst.mean(axis=0), dst.std(axis=0)
    if np.any(sd_s <= 0):
        bad = np.flatnonzero(sd_s <= 0).tolist()
        raise DegenerateInputError(f"source coordinates {bad} have zero variance")
    if np.any(sd_d <= 0):
        bad = np.flatnonzero(sd_d <= 0).tolist()
        raise DegenerateInputError(f"destination coordinates {bad} have zero variance")

    rotation = np.eye(d)
    k = min(int(n_components), d)
    if k > 0:
        us = _leading_directions((src - mu_s) / sd_s, k)
        ud = _leading_directions((dst - mu_d) / sd_d, k)
        ud = ud * np.where(np.sum(us * ud, axis=0) < 0, -1.0, 1.0)
        m = ud @ us.T + (np.eye(d) - ud @ ud.T) @ (np.eye(d) - us @ us.T)
        u, _, vt = np.linalg.svd(m)
        rotation = u @ vt

    sd_target = (dst @ rotation).std(axis=0) if k > 0 else sd_d
    scale = sd_target / sd_s
    offset = mu_d - rotation @ (scale * mu_s)
    return TranslatorParams(scale, rotation, offset)


def translate(params: TranslatorParams, s: Sample, tag: Domain = Domain.SRC2TGT) -> Sample:
    return Sample(params.apply(s.x), s.identity, Domain(tag), s.camera)


def translate_dataset(params: TranslatorParams, ds: DomainDataset, new_tag: Domain) -> DomainDataset:
    if len(ds) == 0:
        return replace(ds, domain=Domain(new_tag))
    return replace(ds, x=params.apply(ds.x), domain=Domain(new_tag))


def perturb_translator(params: TranslatorParams, noise: float, seed) -> TranslatorParams:
    """Degrade a fitted translator to emulate an imperfect style transfer."""
    if noise <= 0:
        return params
    rng = np.random.default_rng(seed)
    d = params.dim
    q, r = np.linalg.qr(np.eye(d) + noise * rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    return TranslatorParams(
        params.scale * np.exp(noise * rng.standard_normal(d)),
        q @ params.rotation,
        params.offset + noise * rng.standard_normal(d) * np.maximum(np.abs(params.offset), 1.0),
    )


def save_translator(params: TranslatorParams, path) -> None:
    write_blocks(
        path,
        {"kind": "translator", "dim": params.dim},
        {"scale": params.scale, "rotation": params.rotation, "offset": params.offset},
    )


def load_translator(path) -> TranslatorParams:
    header, blocks = read_blocks(path)
    if header.get("kind") != "translator":
        raise ShapeError(f"{path} does not hold translator parameters")
    return TranslatorParams(blocks["scale"], blocks["rotation"], blocks["offset"])


def moment_gap(params: TranslatorParams, src, dst) -> float:
    """Largest per-coordinate mean/std discrepancy after translating ``src``."""
    moved = params.apply(src)
    dst = np.asarray(dst, dtype=np.float64)
    return float(max(np.max(np.abs(moved.mean(0) - dst.mean(0))), np.max(np.abs(moved.std(0) - dst.std(0)))))
