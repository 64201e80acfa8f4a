"""Shared builders for synthetic separation problems."""

import numpy as np
import pytest

import ivakit as ik


def make_instance(p, k, n, family, seed, ar1_phi=0.8, condition_cap=20.0):
    """One mixed problem: (sources, covariances, mixing, observed data)."""
    spec = ik.ScvSpec(
        p=p, k=k, n=n, family=family, covariance_style="ar1",
        ar1_phi=ar1_phi, seed=seed,
    )
    sources, covariances = ik.gen_scv_sources(spec)
    mixing = ik.gen_mixing(p, k, condition_cap, seed)
    data = ik.mix(sources, mixing)
    return sources, covariances, mixing, data


def whitened_context(data, models):
    """Center + whiten the data and pair it with the given models."""
    centered, _ = ik.center(data)
    whitened, transform = ik.whiten(centered)
    return ik.CostContext(whitened, tuple(models)), transform


def recovery_jisi(unmixing, transform, mixing):
    """jISI of a whitened-space unmixing composed back onto raw data."""
    composed = ik.compose_whitening(unmixing, transform)
    return ik.joint_isi(ik.GainMatrices.from_sets(composed, mixing))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
