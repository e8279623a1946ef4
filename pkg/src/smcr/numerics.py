"""Small MLP encoder with hand-written gradients, SGD and momentum averaging.

The encoder is ``x -> tanh(W1 x + b1) -> ... -> W_L h + b_L -> z / ||z||``.
Hidden layers use ``tanh``; the last layer is linear and its output is
L2-normalized so that inner products between features are cosine similarities.
Everything operates on float64 numpy arrays and is a pure function of its
arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import DegenerateInputError, DomainError, NumericError, ShapeError
from .textio import read_blocks, write_blocks

ACTIVATION = "tanh"
Layer = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class EncoderParams:
    """Weights of one encoder, ``layers[i] = (W_i [out x in], b_i [out])``."""

    layers: Tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("encoder needs at least one layer")
        prev = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if prev is not None and w.shape[1] != prev:
                raise ShapeError(f"layer {i}: expects {w.shape[1]} inputs, previous layer emits {prev}")
            prev = w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def hidden_dims(self) -> Tuple[int, ...]:
        return tuple(w.shape[0] for w, _ in self.layers[:-1])

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.input_dim,) + self.hidden_dims + (self.output_dim,)

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "EncoderParams":
        if len(arrays) % 2:
            raise ShapeError("expected alternating weight/bias arrays")
        return cls(tuple((np.asarray(arrays[i]), np.asarray(arrays[i + 1])) for i in range(0, len(arrays), 2)))

    def copy(self) -> "EncoderParams":
        return EncoderParams(tuple((w.copy(), b.copy()) for w, b in self.layers))

    def same_shape(self, other: "EncoderParams") -> bool:
        return len(self.layers) == len(other.layers) and all(
            w.shape == w2.shape and b.shape == b2.shape
            for (w, b), (w2, b2) in zip(self.layers, other.layers)
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def allclose(self, other: "EncoderParams", atol: float = 0.0) -> bool:
        return self.same_shape(other) and all(
            np.allclose(a, b, rtol=0.0, atol=atol) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass(frozen=True)
class MomentumParams:
    """Exponential average of an encoder's weights after ``k`` updates."""

    params: EncoderParams
    k: int = 0

    @classmethod
    def start(cls, theta: EncoderParams) -> "MomentumParams":
        # A^0 equals the encoder itself
        return cls(theta.copy(), 0)


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]       # input of every layer, (N, in_i)
    hidden: List[np.ndarray]       # tanh outputs of hidden layers
    z: np.ndarray                  # un-normalized output, (N, out)
    norms: np.ndarray              # (N,)
    features: np.ndarray           # (N, out)
    single: bool
    dims: Tuple[int, ...]


def init_encoder(input_dim: int, hidden_dims: Sequence[int], output_dim: int, seed) -> EncoderParams:
    rng = np.random.default_rng(seed)
    dims = [int(input_dim), *map(int, hidden_dims), int(output_dim)]
    if any(d <= 0 for d in dims):
        raise DomainError(f"layer sizes must be positive, got {dims}")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((w, b))
    return EncoderParams(tuple(layers))


def l2_normalize(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    if np.any(norms <= np.finfo(np.float64).tiny):
        bad = int(np.flatnonzero(norms <= np.finfo(np.float64).tiny)[0])
        raise DegenerateInputError(f"row {bad} has zero norm and cannot be normalized")
    return z / norms[:, None], norms


def encode_batch(params: EncoderParams, X) -> Tuple[np.ndarray, ForwardCache]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ShapeError(f"input has shape {X.shape}, encoder expects {params.input_dim} columns")
    inputs, hidden = [], []
    h = X
    last = len(params.layers) - 1
    z = None
    for i, (w, b) in enumerate(params.layers):
        inputs.append(h)
        # einsum keeps each row's arithmetic independent of batch size, so a
        # batch encodes bit-identically to per-sample calls
        a = np.einsum("ij,kj->ik", h, w) + b
        if i < last:
            h = np.tanh(a)
            hidden.append(h)
        else:
            z = a
    feats, norms = l2_normalize(z)
    cache = ForwardCache(inputs, hidden, z, norms, feats, single, params.dims)
    return (feats[0] if single else feats), cache


def encode(params: EncoderParams, x) -> Tuple[np.ndarray, ForwardCache]:
    """Feature of a single raw vector plus the activations needed for backprop."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"encode takes one vector, got shape {x.shape}")
    return encode_batch(params, x)


def encode_backward(params: EncoderParams, cache: ForwardCache, grad_feature) -> EncoderParams:
    """Gradient of a scalar loss w.r.t. every weight and bias.

    ``grad_feature`` is dL/df for the normalized features of the cached
    forward pass (a vector for a single sample, ``(N, out)`` for a batch).
    Per-sample contributions are summed.
    """
    if cache.dims != params.dims:
        raise ShapeError(f"cache built for dims {cache.dims}, params have {params.dims}")
    g = np.asarray(grad_feature, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.features.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match features {cache.features.shape}")

    f = cache.features
    # d(z/|z|) = (I - f f^T) dz / |z|
    dz = (g - f * np.einsum("ij,ij->i", f, g)[:, None]) / cache.norms[:, None]

    grads: List[Layer] = [None] * len(params.layers)  # type: ignore[list-item]
    delta = dz
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        grads[i] = (delta.T @ cache.inputs[i], delta.sum(axis=0))
        if i > 0:
            h = cache.hidden[i - 1]
            delta = (delta @ w) * (1.0 - h * h)
    return EncoderParams(tuple(grads))


def scale_grads(grads: EncoderParams, factor: float) -> EncoderParams:
    return EncoderParams(tuple((gw * factor, gb * factor) for gw, gb in grads.layers))


def add_grads(a: EncoderParams, b: EncoderParams) -> EncoderParams:
    return EncoderParams(tuple((wa + wb, ba + bb) for (wa, ba), (wb, bb) in zip(a.layers, b.layers)))


def sgd_step(params: EncoderParams, grads: EncoderParams, lr: float, weight_decay: float = 0.0) -> EncoderParams:
    if not params.same_shape(grads):
        raise ShapeError("gradient shapes do not match parameter shapes")
    if lr < 0 or weight_decay < 0:
        raise DomainError("lr and weight_decay must be non-negative")
    if not grads.is_finite():
        raise NumericError("non-finite gradient entry")
    layers = []
    for (w, b), (gw, gb) in zip(params.layers, grads.layers):
        layers.append((w - lr * (gw + weight_decay * w), b - lr * (gb + weight_decay * b)))
    return EncoderParams(tuple(layers))


def momentum_update(prev: MomentumParams, theta: EncoderParams, lam: float) -> MomentumParams:
    if not (0.0 <= lam < 1.0):
        raise DomainError(f"momentum coefficient must lie in [0, 1), got {lam}")
    if not prev.params.same_shape(theta):
        raise ShapeError("momentum params and encoder params differ in shape")
    layers = []
    for (aw, ab), (w, b) in zip(prev.params.layers, theta.layers):
        layers.append((lam * aw + (1.0 - lam) * w, lam * ab + (1.0 - lam) * b))
    return MomentumParams(EncoderParams(tuple(layers)), prev.k + 1)


def learning_rate_at(epoch: int, base_lr: float, step: int = 20, factor: float = 10.0) -> float:
    if epoch < 0:
        raise DomainError("epoch must be non-negative")
    return base_lr / factor ** (epoch // step)


def params_from_identity(dim: int) -> EncoderParams:
    """Single linear layer computing the identity map (handy for tests and baselines)."""
    return EncoderParams(((np.eye(dim), np.zeros(dim)),))


def encoder_blocks(params: EncoderParams, prefix: str = "") -> Dict[str, np.ndarray]:
    """Named arrays ``{prefix}W{i}`` / ``{prefix}b{i}`` for block-file storage."""
    out = {}
    for i, (W, b) in enumerate(params.layers):
        out[f"{prefix}W{i}"] = W
        out[f"{prefix}b{i}"] = b
    return out


def encoder_from_blocks(blocks: Mapping[str, np.ndarray], num_layers: int, prefix: str = "") -> EncoderParams:
    try:
        return EncoderParams(tuple((blocks[f"{prefix}W{i}"], blocks[f"{prefix}b{i}"]) for i in range(num_layers)))
    except KeyError as exc:
        raise ShapeError(f"missing parameter block {exc.args[0]!r}") from None


def save_encoder(params: EncoderParams, path) -> None:
    write_blocks(path, {"kind": "encoder", "layers": len(params.layers)}, encoder_blocks(params))


def load_encoder(path) -> EncoderParams:
    header, blocks = read_blocks(path)
    if header.get("kind") != "encoder":
        raise ShapeError(f"{path} does not hold encoder parameters")
    return encoder_from_blocks(blocks, int(header["layers"]))
