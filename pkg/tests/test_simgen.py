"""Synthetic problem generation and the Gaussian identifiability check."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

import ivakit as ik
from ivakit.errors import CombinatorialLimitError, ParameterError, ShapeError
from ivakit.simgen import scv_covariances


# ---------------------------------------------------------------------------
# SCV generation
# ---------------------------------------------------------------------------

def test_ar1_first_scv_matches_construction():
    spec = ik.ScvSpec(p=3, k=3, n=100, covariance_style="ar1", ar1_phi=0.9)
    covs = scv_covariances(spec)
    lags = np.abs(np.subtract.outer(np.arange(3), np.arange(3)))
    assert_allclose(covs[0], 0.9**lags)


def test_ar1_covariances_distinct_and_valid():
    # identical correlation matrices are exactly the non-identifiable case,
    # so the AR(1) style must spread its coefficient across SCVs
    spec = ik.ScvSpec(p=4, k=5, n=100, covariance_style="ar1", ar1_phi=0.8)
    covs = scv_covariances(spec)
    for j, cov in enumerate(covs):
        assert_allclose(np.diag(cov), 1.0)
        assert np.linalg.eigvalsh(cov)[0] > 0
        off = np.abs(cov[~np.eye(5, dtype=bool)])
        assert off.max() >= spec.min_cross_correlation
    identifiable, pair = ik.check_identifiability_gaussian(covs, tol=1e-8)
    assert identifiable, pair


def test_random_spd_covariances_valid():
    spec = ik.ScvSpec(
        p=5, k=4, n=100, covariance_style="random_spd",
        min_cross_correlation=0.2, seed=3,
    )
    covs = scv_covariances(spec)
    for cov in covs:
        assert_allclose(np.diag(cov), 1.0, atol=1e-12)
        assert_allclose(cov, cov.T)
        assert np.linalg.eigvalsh(cov)[0] > 0
        off = np.abs(cov[~np.eye(4, dtype=bool)])
        assert off.max() >= 0.2


def test_gaussian_sources_match_population_covariance():
    spec = ik.ScvSpec(p=3, k=3, n=100_000, family="gaussian", seed=5)
    sources, covs = ik.gen_scv_sources(spec)
    for j in range(3):
        sample = np.cov(sources.scvs[j], bias=True)
        assert np.abs(sample - covs[j]).max() <= 0.02


def test_distinct_scvs_uncorrelated():
    spec = ik.ScvSpec(p=3, k=2, n=100_000, family="gaussian", seed=6)
    sources, _ = ik.gen_scv_sources(spec)
    flat = sources.scvs.reshape(6, -1)
    cross = np.cov(flat, bias=True)
    for j in range(3):
        for l in range(j + 1, 3):
            block = cross[2 * j : 2 * j + 2, 2 * l : 2 * l + 2]
            assert np.abs(block).max() <= 0.02


def test_laplace_sources_super_gaussian():
    spec = ik.ScvSpec(p=2, k=2, n=100_000, family="laplace", seed=9)
    sources, _ = ik.gen_scv_sources(spec)
    for j in range(2):
        for k in range(2):
            row = sources.scvs[j, k]
            assert row.std() == pytest.approx(1.0, abs=1e-9)
            kurt = (row**4).mean() / row.std() ** 4 - 3.0
            assert kurt > 0.5


def test_generation_deterministic():
    spec = ik.ScvSpec(p=2, k=3, n=500, family="laplace", seed=42)
    a, cov_a = ik.gen_scv_sources(spec)
    b, cov_b = ik.gen_scv_sources(spec)
    assert np.array_equal(a.scvs, b.scvs)
    assert np.array_equal(cov_a, cov_b)


def test_spec_validation():
    with pytest.raises(ParameterError):
        ik.ScvSpec(p=0, k=2, n=100)
    with pytest.raises(ParameterError):
        ik.ScvSpec(p=2, k=2, n=100, family="cauchy")
    with pytest.raises(ParameterError):
        ik.ScvSpec(p=2, k=2, n=100, ar1_phi=1.5)


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------

def test_gen_mixing_respects_condition_cap():
    mixing = ik.gen_mixing(4, 3, condition_cap=10.0, seed=2)
    for m in mixing.matrices:
        assert np.linalg.cond(m, 2) <= 10.0


def test_gen_mixing_deterministic():
    a = ik.gen_mixing(3, 2, 20.0, seed=11)
    b = ik.gen_mixing(3, 2, 20.0, seed=11)
    assert np.array_equal(a.matrices, b.matrices)


def test_gen_mixing_scalar_case():
    mixing = ik.gen_mixing(1, 2, condition_cap=5.0, seed=0)
    assert mixing.matrices.shape == (2, 1, 1)


def test_gen_mixing_impossible_cap():
    with pytest.raises(ParameterError):
        ik.gen_mixing(6, 1, condition_cap=1.0 + 1e-9, seed=0)


# ---------------------------------------------------------------------------
# mix
# ---------------------------------------------------------------------------

def test_mix_identity_stacks_sources(rng):
    sources = ik.SourceEstimates(rng.standard_normal((3, 2, 50)))
    mixing = ik.MixingSet(np.stack([np.eye(3)] * 2))
    data = ik.mix(sources, mixing)
    for k in range(2):
        for j in range(3):
            assert_allclose(data.data[k, j], sources.scvs[j, k])


def test_mix_round_trip():
    spec = ik.ScvSpec(p=3, k=2, n=400, family="gaussian", seed=14)
    sources, _ = ik.gen_scv_sources(spec)
    mixing = ik.gen_mixing(3, 2, 20.0, seed=14)
    data = ik.mix(sources, mixing)
    est = ik.apply_unmixing(
        ik.UnmixingSet(np.linalg.inv(mixing.matrices)), data
    )
    assert np.abs(est.scvs - sources.scvs).max() <= 1e-10


def test_mix_scaling_linearity(rng):
    sources = ik.SourceEstimates(rng.standard_normal((2, 2, 30)))
    mats = rng.standard_normal((2, 2, 2)) + 2 * np.eye(2)
    data = ik.mix(sources, ik.MixingSet(mats))
    scaled = mats.copy()
    scaled[1] *= 2.0
    data2 = ik.mix(sources, ik.MixingSet(scaled))
    assert_allclose(data2.data[1], 2.0 * data.data[1])
    assert_allclose(data2.data[0], data.data[0])


def test_mix_shape_mismatch(rng):
    sources = ik.SourceEstimates(rng.standard_normal((3, 2, 30)))
    with pytest.raises(ShapeError):
        ik.mix(sources, ik.MixingSet(np.stack([np.eye(4)] * 2)))


# ---------------------------------------------------------------------------
# identifiability
# ---------------------------------------------------------------------------

def _correlation(rng, k):
    a = rng.standard_normal((k, k))
    m = a @ a.T + k * np.eye(k)
    d = np.sqrt(np.diag(m))
    return m / np.outer(d, d)


def test_identical_matrices_non_identifiable(rng):
    r = _correlation(rng, 3)
    identifiable, pair = ik.check_identifiability_gaussian(
        np.stack([r, r.copy()]), tol=1e-8
    )
    assert not identifiable
    assert pair == (0, 1)


def test_sign_flip_non_identifiable(rng):
    r = _correlation(rng, 3)
    d = np.diag([1.0, -1.0, 1.0])
    flipped = d @ r @ d
    identifiable, pair = ik.check_identifiability_gaussian(
        np.stack([r, flipped]), tol=1e-8
    )
    assert not identifiable
    assert pair == (0, 1)


def test_distinct_ar1_identifiable():
    lags = np.abs(np.subtract.outer(np.arange(4), np.arange(4)))
    covs = np.stack([0.5**lags, 0.9**lags])
    identifiable, pair = ik.check_identifiability_gaussian(covs, tol=1e-8)
    assert identifiable
    assert pair is None


def test_identifiability_k_limit():
    covs = np.stack([np.eye(21)] * 2)
    with pytest.raises(CombinatorialLimitError):
        ik.check_identifiability_gaussian(covs, tol=1e-6)


def test_identifiability_rejects_non_correlation(rng):
    bad = np.stack([2.0 * np.eye(3), np.eye(3)])
    with pytest.raises(ik.IvakitError):
        ik.check_identifiability_gaussian(bad, tol=1e-6)
