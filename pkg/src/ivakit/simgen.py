"""Synthetic joint source-separation problems with known ground truth.

Source component vectors are mutually independent across sources and
dependent within (controlled K x K correlation matrices).  Generation is
deterministic per seed and uses the counter-based Philox generator, so
independent specs can be drawn in parallel without coordination.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import (
    CombinatorialLimitError,
    DataValidationError,
    ParameterError,
    ShapeError,
)
from .model import DatasetCollection, MixingSet, SourceEstimates

__all__ = [
    "ScvSpec",
    "gen_scv_sources",
    "gen_mixing",
    "mix",
    "check_identifiability_gaussian",
]

_MAX_SIGN_DATASETS = 20


@dataclass(frozen=True)
class ScvSpec:
    """Specification of a synthetic SCV ensemble.

    ``covariance_style``:

    * ``"ar1"`` — SCV j gets the AR(1) correlation ``phi_j ** |k - k'|``.
      The coefficients are spread over ``[max(min_cross_correlation,
      ar1_phi / 2), ar1_phi]``, largest first, so that no two SCVs share a
      correlation matrix (identical matrices are exactly the Gaussian
      non-identifiable case).
    * ``"random_spd"`` — random correlation matrices with eigenvalues drawn
      uniform on [0.2, 1.8] (normalized to trace K) and random orthogonal
      eigenvectors, rescaled to unit diagonal.
    """

    p: int
    k: int
    n: int
    family: str = "gaussian"
    covariance_style: str = "ar1"
    ar1_phi: float = 0.8
    min_cross_correlation: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.p < 1 or self.k < 1 or self.n < 2:
            raise ParameterError("need p >= 1, k >= 1, n >= 2")
        if self.family not in ("gaussian", "laplace"):
            raise ParameterError(f"unknown source family {self.family!r}")
        if self.covariance_style not in ("ar1", "random_spd"):
            raise ParameterError(
                f"unknown covariance style {self.covariance_style!r}"
            )
        if not 0.0 < self.ar1_phi < 1.0:
            raise ParameterError("ar1_phi must lie in (0, 1)")
        if not 0.0 < self.min_cross_correlation < 1.0:
            raise ParameterError("min_cross_correlation must lie in (0, 1)")


# stream domains: the same integer seed may drive sources and mixing without
# replaying one stream inside the other
_DOMAIN_SOURCES = 0
_DOMAIN_MIXING = 1
_DOMAIN_COVARIANCES = 2


def _rng(seed, domain) -> np.random.Generator:
    seq = np.random.SeedSequence(seed, spawn_key=(domain,))
    return np.random.Generator(np.random.Philox(seq))


def _ar1_matrix(phi: float, k: int) -> np.ndarray:
    lags = np.abs(np.subtract.outer(np.arange(k), np.arange(k)))
    return phi**lags


def _random_correlation(rng, k: int, min_cross: float) -> np.ndarray:
    for _ in range(10):
        eigvals = rng.uniform(0.2, 1.8, size=k)
        eigvals *= k / eigvals.sum()
        q, r = np.linalg.qr(rng.standard_normal((k, k)))
        q = q * np.sign(np.diag(r))
        mat = (q * eigvals) @ q.T
        d = np.sqrt(np.diag(mat))
        corr = mat / np.outer(d, d)
        corr = 0.5 * (corr + corr.T)
        np.fill_diagonal(corr, 1.0)
        if np.linalg.eigvalsh(corr)[0] <= 0.0:
            continue
        if k > 1:
            off = np.abs(corr[~np.eye(k, dtype=bool)])
            if off.max() < min_cross:
                continue
        return corr
    raise ParameterError(
        "failed to draw a valid correlation matrix in 10 attempts; "
        "min_cross_correlation may be too demanding"
    )


def scv_covariances(spec: ScvSpec) -> np.ndarray:
    """Population correlation matrices R_j for the spec, shape (p, k, k)."""
    if spec.covariance_style == "ar1":
        low = max(spec.min_cross_correlation, spec.ar1_phi / 2.0)
        low = min(low, spec.ar1_phi)
        phis = np.linspace(spec.ar1_phi, low, spec.p)
        return np.stack([_ar1_matrix(phi, spec.k) for phi in phis])
    rng = _rng(spec.seed, _DOMAIN_COVARIANCES)
    return np.stack(
        [
            _random_correlation(rng, spec.k, spec.min_cross_correlation)
            for _ in range(spec.p)
        ]
    )


def gen_scv_sources(spec: ScvSpec):
    """Draw p mutually independent SCVs, each iid over n samples.

    Gaussian SCVs come from N(0, R_j).  Laplace SCVs use the Gaussian scale
    mixture (a Gaussian draw times the square root of an independent
    standard-exponential variate), rescaled to unit sample variance per
    component.

    Returns
    -------
    sources : SourceEstimates
        Ground-truth SCV blocks, shape (p, k, n).
    covariances : ndarray, shape (p, k, k)
        The population correlation matrices R_j.
    """
    covs = scv_covariances(spec)
    rng = _rng(spec.seed, _DOMAIN_SOURCES)
    blocks = np.empty((spec.p, spec.k, spec.n))
    for j in range(spec.p):
        chol = np.linalg.cholesky(covs[j])
        gauss = chol @ rng.standard_normal((spec.k, spec.n))
        if spec.family == "gaussian":
            blocks[j] = gauss
        else:
            mixer = np.sqrt(rng.standard_exponential(spec.n))
            heavy = gauss * mixer[None, :]
            blocks[j] = heavy / heavy.std(axis=1, keepdims=True)
    return SourceEstimates(blocks), covs


def gen_mixing(p: int, k: int, condition_cap: float, seed: int) -> MixingSet:
    """Standard-normal mixing matrices, rejection-sampled until each has
    2-norm condition number at most ``condition_cap``.

    Raises
    ------
    ParameterError
        After 100 consecutive rejections for one dataset (cap too tight).
    """
    if condition_cap <= 1.0:
        raise ParameterError("condition_cap must exceed 1")
    rng = _rng(seed, _DOMAIN_MIXING)
    mats = np.empty((k, p, p))
    for idx in range(k):
        for attempt in range(101):
            if attempt == 100:
                raise ParameterError(
                    f"dataset {idx}: no draw met condition cap {condition_cap} "
                    "in 100 attempts"
                )
            candidate = rng.standard_normal((p, p))
            if p == 1 or np.linalg.cond(candidate, 2) <= condition_cap:
                mats[idx] = candidate
                break
    return MixingSet(mats)


def mix(sources: SourceEstimates, mixing: MixingSet) -> DatasetCollection:
    """Observe ``x^[k] = Omega^[k] s^[k]``: dataset k stacks component k of
    every SCV as rows and premultiplies by the mixing matrix."""
    p, k_count, n = sources.scvs.shape
    if mixing.matrices.shape != (k_count, p, p):
        raise ShapeError(
            f"mixing {mixing.matrices.shape} does not match sources "
            f"(p={p}, k={k_count})"
        )
    stacked = sources.scvs.transpose(1, 0, 2)  # (k, p, n)
    return DatasetCollection(np.einsum("kij,kjn->kin", mixing.matrices, stacked))


def check_identifiability_gaussian(covariances, tol: float):
    """Check assumption (B4) for the all-Gaussian case.

    A pair of SCVs (l, j) defeats identifiability when some full-rank
    diagonal D gives ``R_l = D R_j D``; for correlation matrices D must be a
    sign matrix, so the check enumerates all ``2^(K-1)`` sign patterns
    (global sign is irrelevant).

    Returns
    -------
    identifiable : bool
    offending_pair : tuple or None
        First (l, j) in lexicographic order with ``min_D ||R_l - D R_j D||_inf
        <= tol``, or None when identifiable.
    """
    covs = np.asarray(covariances, dtype=np.float64)
    if covs.ndim != 3 or covs.shape[1] != covs.shape[2]:
        raise ShapeError(f"expected (p, K, K) correlation matrices, got {covs.shape}")
    p, k, _ = covs.shape
    if k > _MAX_SIGN_DATASETS:
        raise CombinatorialLimitError(
            f"sign-pattern enumeration over K={k} datasets exceeds the "
            f"limit of {_MAX_SIGN_DATASETS}"
        )
    if tol < 0:
        raise ParameterError("tol must be nonnegative")
    for idx, cov in enumerate(covs):
        if not np.all(np.isfinite(cov)):
            raise DataValidationError(f"covariance {idx} has non-finite entries")
        if np.abs(np.diag(cov) - 1.0).max() > 0.01 or np.abs(cov - cov.T).max() > 0.01:
            raise DataValidationError(
                f"covariance {idx} is not a correlation matrix "
                "(unit diagonal, symmetric)"
            )

    patterns = [
        np.array((1.0,) + tail)
        for tail in itertools.product((1.0, -1.0), repeat=k - 1)
    ]
    for l in range(p):
        for j in range(l + 1, p):
            for d in patterns:
                flipped = covs[j] * np.outer(d, d)
                if np.abs(covs[l] - flipped).max() <= tol:
                    return False, (l, j)
    return True, None
