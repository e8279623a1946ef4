import numpy as np
import pytest
from hypothesis import given, strategies as st

from smcr.errors import DegenerateInputError, DomainError, NumericError, ShapeError
from smcr.numerics import (
    EncoderParams,
    MomentumParams,
    encode,
    encode_backward,
    encode_batch,
    init_encoder,
    learning_rate_at,
    load_encoder,
    momentum_update,
    params_from_identity,
    save_encoder,
    sgd_step,
)

from oracles import central_diff, mlp_forward, rel_error


def scalar_params(w):
    return EncoderParams(((np.array([[w]], dtype=float), np.array([0.0])),))


def test_identity_layer_normalizes_input():
    f, _ = encode(params_from_identity(2), [3.0, 4.0])
    np.testing.assert_allclose(f, [0.6, 0.8], rtol=0, atol=1e-15)


def test_zero_input_with_zero_bias_is_degenerate():
    p = init_encoder(3, [4], 2, seed=0)
    zeroed = EncoderParams(tuple((w, np.zeros_like(b)) for w, b in p.layers))
    with pytest.raises(DegenerateInputError):
        encode(zeroed, np.zeros(3))


def test_forward_matches_plain_matrix_oracle():
    rng = np.random.default_rng(0)
    for seed in range(10):
        p = init_encoder(5, [7], 3, seed=seed)
        x = rng.standard_normal(5)
        f, _ = encode(p, x)
        np.testing.assert_allclose(f, mlp_forward(p.layers, x), rtol=0, atol=1e-12)


def test_batch_encoding_matches_single_calls():
    p = init_encoder(4, [6, 5], 3, seed=2)
    X = np.random.default_rng(1).standard_normal((9, 4))
    F, _ = encode_batch(p, X)
    for i in range(9):
        np.testing.assert_array_equal(F[i], encode(p, X[i])[0])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        encode(params_from_identity(3), np.ones(4))
    with pytest.raises(ShapeError):
        EncoderParams(((np.ones((2, 3)), np.ones(2)), (np.ones((2, 4)), np.ones(2))))


def test_zero_upstream_gradient_gives_zero_grads():
    p = init_encoder(4, [5], 3, seed=1)
    _, cache = encode(p, np.ones(4))
    g = encode_backward(p, cache, np.zeros(3))
    assert all(np.all(a == 0) for a in g.arrays())


def test_hand_derived_normalization_jacobian():
    # f = x / |x| with identity weights; d f_0 / d x = (e0 - f0 f) / |x|,
    # and for a linear layer dL/dW = outer(dL/dz, x), dL/db = dL/dz.
    x = np.array([3.0, 4.0])
    p = params_from_identity(2)
    f, cache = encode(p, x)
    g = encode_backward(p, cache, np.array([1.0, 0.0]))
    dz = (np.array([1.0, 0.0]) - f[0] * f) / 5.0
    np.testing.assert_allclose(dz, [0.64 / 5, -0.48 / 5], atol=1e-15)
    np.testing.assert_allclose(g.layers[0][1], dz, atol=1e-15)
    np.testing.assert_allclose(g.layers[0][0], np.outer(dz, x), atol=1e-15)


def _fd_check(p, X, upstream, h=1e-5):
    F, cache = encode_batch(p, X)
    grads = encode_backward(p, cache, upstream)
    arrays = [a.copy() for a in p.arrays()]
    for k, arr in enumerate(arrays):
        def loss(v, k=k):
            trial = list(arrays)
            trial[k] = v
            f, _ = encode_batch(EncoderParams.from_arrays(trial), X)
            return float(np.sum(f * upstream))
        num = central_diff(loss, arr, h)
        assert rel_error(grads.arrays()[k], num) < 1e-4


@given(
    st.integers(1, 8), st.lists(st.integers(1, 8), min_size=0, max_size=2), st.integers(1, 8),
    st.integers(1, 4), st.integers(0, 10_000),
)
def test_backward_matches_finite_differences(d_in, hidden, d_out, n, seed):
    rng = np.random.default_rng(seed)
    p = init_encoder(d_in, hidden, d_out, seed=seed)
    X = rng.standard_normal((n, d_in))
    _fd_check(p, X, rng.standard_normal((n, d_out)))


def test_sgd_scalar_example():
    out = sgd_step(scalar_params(1.0), scalar_params(2.0), lr=0.1)
    assert out.layers[0][0][0, 0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_lr_is_identity():
    p = init_encoder(3, [4], 2, seed=3)
    g = init_encoder(3, [4], 2, seed=4)
    assert sgd_step(p, g, lr=0.0, weight_decay=0.0005).allclose(p)


def test_sgd_matches_elementwise_oracle():
    p = init_encoder(6, [8], 4, seed=5)
    g = init_encoder(6, [8], 4, seed=6)
    lr, wd = 0.00035, 0.0005
    out = sgd_step(p, g, lr, wd)
    for a, w, gw in zip(out.arrays(), p.arrays(), g.arrays()):
        expect = np.empty_like(w)
        for idx in np.ndindex(w.shape):
            expect[idx] = w[idx] - lr * (gw[idx] + wd * w[idx])
        np.testing.assert_allclose(a, expect, rtol=0, atol=1e-15)


def test_sgd_rejects_bad_inputs():
    p = scalar_params(1.0)
    with pytest.raises(DomainError):
        sgd_step(p, p, lr=-1.0)
    with pytest.raises(NumericError):
        sgd_step(p, scalar_params(np.nan), lr=0.1)


def test_momentum_starts_at_encoder():
    p = init_encoder(3, [4], 2, seed=0)
    m = MomentumParams.start(p)
    assert m.k == 0 and m.params.allclose(p)


def test_momentum_zero_lambda_copies_encoder():
    a = MomentumParams.start(init_encoder(3, [4], 2, seed=0))
    theta = init_encoder(3, [4], 2, seed=1)
    out = momentum_update(a, theta, 0.0)
    for x, y in zip(out.params.arrays(), theta.arrays()):
        np.testing.assert_array_equal(x, y)
    assert out.k == 1


def test_momentum_two_step_scalar():
    a = MomentumParams(scalar_params(1.0))
    theta = scalar_params(0.0)
    a = momentum_update(momentum_update(a, theta, 0.9), theta, 0.9)
    assert a.params.layers[0][0][0, 0] == pytest.approx(0.81, abs=1e-15)
    assert a.k == 2


def test_momentum_rejects_lambda_one():
    p = scalar_params(1.0)
    with pytest.raises(DomainError):
        momentum_update(MomentumParams(p), p, 1.0)


@given(st.floats(0.0, 0.999), st.integers(0, 1000))
def test_momentum_is_convex_combination(lam, seed):
    a = MomentumParams.start(init_encoder(3, [4], 2, seed=seed))
    theta = init_encoder(3, [4], 2, seed=seed + 1)
    out = momentum_update(a, theta, lam)
    for new, old, t in zip(out.params.arrays(), a.params.arrays(), theta.arrays()):
        lo, hi = np.minimum(old, t), np.maximum(old, t)
        assert np.all(new >= lo - 1e-15) and np.all(new <= hi + 1e-15)


def test_learning_rate_schedule():
    assert learning_rate_at(0, 0.00035) == 0.00035
    assert learning_rate_at(19, 0.00035) == 0.00035
    assert learning_rate_at(20, 0.00035) == pytest.approx(0.000035, rel=1e-12)
    with pytest.raises(DomainError):
        learning_rate_at(-1, 0.1)


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
def test_output_has_unit_norm(d_in, d_out, seed):
    p = init_encoder(d_in, [6], d_out, seed=seed)
    x = np.random.default_rng(seed).standard_normal((5, d_in))
    f, _ = encode_batch(p, x)
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-9)


def test_init_is_seeded_and_bounded():
    a, b = init_encoder(4, [5], 3, seed=7), init_encoder(4, [5], 3, seed=7)
    assert a.allclose(b)
    assert np.all(np.abs(a.layers[0][0]) <= 1 / np.sqrt(4))
    with pytest.raises(DomainError):
        init_encoder(0, [5], 3, seed=0)


def test_encoder_file_round_trip(tmp_path):
    p = init_encoder(4, [5, 6], 3, seed=8)
    save_encoder(p, tmp_path / "enc.txt")
    assert load_encoder(tmp_path / "enc.txt").allclose(p)
