import numpy as np
import pytest
from hypothesis import given, strategies as st

from smcr.data import Domain, DomainDataset, DomainSpec, generate_domain
from smcr.errors import DegenerateInputError, ShapeError
from smcr.translator import (
    TranslatorParams,
    fit_translator,
    load_translator,
    moment_gap,
    perturb_translator,
    save_translator,
    translate,
    translate_dataset,
)


def cloud(seed, n=400, d=4):
    return np.random.default_rng(seed).standard_normal((n, d)) * [1.0, 2.0, 0.5, 3.0][:d] + 1.0


def test_same_distribution_gives_identity():
    x = cloud(0)
    tr = fit_translator(x, x)
    np.testing.assert_allclose(tr.scale, 1.0, atol=1e-12)
    np.testing.assert_allclose(tr.rotation, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(tr.offset, 0.0, atol=1e-12)
    np.testing.assert_allclose(tr.apply(x), x, atol=1e-6)


def test_constant_shift_recovered():
    x = cloud(1)
    c = np.array([0.5, -2.0, 3.0, 1.0])
    tr = fit_translator(x, x + c)
    np.testing.assert_allclose(tr.offset, c, atol=1e-6)
    np.testing.assert_allclose(tr.scale, 1.0, atol=1e-6)


def test_doubling_recovered():
    x = cloud(2)
    tr = fit_translator(x, 2 * x)
    np.testing.assert_allclose(tr.scale, 2.0, atol=1e-6)


def test_hand_arithmetic_example():
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    tr = TranslatorParams(np.array([2.0, 2.0]), rot, np.array([1.0, 0.0]))
    np.testing.assert_allclose(tr.apply(np.array([1.0, 0.0])), [1.0, 2.0], atol=1e-15)


def test_identity_translator_preserves_sample():
    ds = generate_domain(DomainSpec(2, 2, 2, 3, 0.5, rng_seed=1))
    s = translate(TranslatorParams.identity(3), ds[0])
    np.testing.assert_array_equal(s.x, ds[0].x)
    assert s.identity == ds[0].identity and s.camera == ds[0].camera and s.domain is Domain.SRC2TGT


@given(st.integers(1, 6), st.integers(0, 1000), st.floats(0.01, 0.5))
def test_labels_preserved_and_invertible(dim, seed, noise):
    ds = generate_domain(DomainSpec(3, 2, 2, dim, 0.5, rng_seed=seed))
    tr = perturb_translator(fit_translator(ds.x, 3 * ds.x + 1, n_components=min(2, dim)), noise, seed)
    out = translate_dataset(tr, ds, Domain.SRC2TGT)
    assert len(out) == len(ds)
    np.testing.assert_array_equal(out.identity, ds.identity)
    np.testing.assert_allclose(tr.invert(out.x), ds.x, atol=1e-9)


def test_empty_dataset_stays_empty():
    empty = DomainDataset(np.empty((0, 3)), np.empty(0), np.empty(0), Domain.SOURCE, 1, 1)
    out = translate_dataset(TranslatorParams.identity(3), empty, Domain.SRC2TGT)
    assert len(out) == 0 and out.domain is Domain.SRC2TGT


def test_refit_after_translation_is_identity():
    k = 0
    src = generate_domain(DomainSpec(8, 4, 2, 5, 0.5, rng_seed=1, rotation_seed=3))
    dst = generate_domain(DomainSpec(8, 4, 2, 5, 0.5, rng_seed=2, rotation_seed=4,
                                     scale=[1, 2, 3, 1, 0.5], offset=[1, 0, -1, 2, 0]))
    tr = fit_translator(src.x, dst.x, k)
    moved = tr.apply(src.x)
    again = fit_translator(moved, dst.x, k)
    np.testing.assert_allclose(again.scale, 1.0, atol=1e-3)
    np.testing.assert_allclose(again.rotation, np.eye(5), atol=1e-3)
    np.testing.assert_allclose(again.offset, 0.0, atol=1e-3)
    assert moment_gap(tr, src.x, dst.x) < 1e-9


def test_aligned_fit_matches_means_and_rotated_stds():
    src = generate_domain(DomainSpec(8, 4, 2, 5, 0.5, rng_seed=1, rotation_seed=3))
    dst = generate_domain(DomainSpec(8, 4, 2, 5, 0.5, rng_seed=2, rotation_seed=4, scale=[1, 2, 3, 1, 0.5]))
    tr = fit_translator(src.x, dst.x, n_components=2)
    moved = tr.apply(src.x)
    np.testing.assert_allclose(moved.mean(0), dst.x.mean(0), atol=1e-9)
    np.testing.assert_allclose((moved @ tr.rotation).std(0), (dst.x @ tr.rotation).std(0), atol=1e-9)


def test_errors():
    with pytest.raises(ShapeError):
        fit_translator(np.empty((0, 2)), np.ones((3, 2)))
    with pytest.raises(ShapeError):
        fit_translator(np.ones((3, 2)), np.ones((3, 3)))
    with pytest.raises(DegenerateInputError):
        fit_translator(np.ones((3, 2)), cloud(0, 3, 2))
    with pytest.raises(ShapeError):
        TranslatorParams(np.ones(2), np.ones((2, 2)), np.zeros(2))


def test_file_round_trip(tmp_path):
    tr = fit_translator(cloud(3), 2 * cloud(4) - 1, n_components=2)
    save_translator(tr, tmp_path / "t.txt")
    back = load_translator(tmp_path / "t.txt")
    for a, b in ((tr.scale, back.scale), (tr.rotation, back.rotation), (tr.offset, back.offset)):
        np.testing.assert_array_equal(a, b)
