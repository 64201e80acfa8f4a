"""Separation-quality metrics and alignment to ground truth.

The joint intersymbol interference (jISI) scores the gain matrices
``G^[k] = W^[k] Omega^[k]``: it is 0 exactly when every gain is a diagonal
times one permutation common to all datasets, and 1 when interference is
total (all gain magnitudes equal).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ShapeError, UndefinedMetricError
from .model import MixingSet, SourceEstimates, UnmixingSet

__all__ = ["GainMatrices", "Alignment", "joint_isi", "isi", "align_to_truth"]


@dataclass(frozen=True)
class GainMatrices:
    """Stack of gain matrices ``G^[k] = W^[k] Omega^[k]``, shape (K, p, p)."""

    g: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.g, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise ShapeError(f"expected (K, p, p) gains, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise UndefinedMetricError("gain matrices contain non-finite entries")
        object.__setattr__(self, "g", arr)

    @classmethod
    def from_sets(cls, unmixing: UnmixingSet, mixing: MixingSet) -> "GainMatrices":
        if unmixing.matrices.shape != mixing.matrices.shape:
            raise ShapeError("unmixing and mixing dimensions disagree")
        return cls(np.einsum("kij,kjl->kil", unmixing.matrices, mixing.matrices))


@dataclass(frozen=True)
class Alignment:
    """A permutation common to all datasets plus per-dataset signs.

    ``permutation[l]`` is the estimate index matched to truth source l;
    ``signs[k, l]`` is the sign applied to that estimate in dataset k.
    """

    permutation: np.ndarray  # (p,) int
    signs: np.ndarray        # (K, p) in {-1, +1}


def joint_isi(gains: GainMatrices) -> float:
    """Joint intersymbol interference in [0, 1]; 0 means ideal separation.

    Uses the dataset-summed magnitudes ``gbar = sum_k |G^[k]|`` and averages
    the row-normalized and column-normalized interference sums.

    Raises
    ------
    UndefinedMetricError
        If ``gbar`` has an all-zero row or column.
    """
    gbar = np.abs(gains.g).sum(axis=0)
    p = gbar.shape[0]
    if p < 2:
        raise UndefinedMetricError("jISI needs at least two sources")
    row_max = gbar.max(axis=1)
    col_max = gbar.max(axis=0)
    if np.any(row_max == 0.0) or np.any(col_max == 0.0):
        raise UndefinedMetricError("gain matrix has an all-zero row or column")
    row_term = (gbar / row_max[:, None]).sum(axis=1) - 1.0
    col_term = (gbar / col_max[None, :]).sum(axis=0) - 1.0
    return float((row_term.sum() + col_term.sum()) / (2.0 * p * (p - 1)))


def isi(gain) -> float:
    """Single-dataset intersymbol interference (the K = 1 case of jISI)."""
    arr = np.asarray(gain, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"expected a square gain matrix, got {arr.shape}")
    return joint_isi(GainMatrices(arr[None, :, :]))


def _normalized_rows(scvs):
    """Center and unit-normalize along samples; error on zero variance."""
    centered = scvs - scvs.mean(axis=-1, keepdims=True)
    norms = np.linalg.norm(centered, axis=-1)
    raw_norms = np.linalg.norm(scvs, axis=-1)
    if np.any(norms <= 1e-12 * np.maximum(raw_norms, 1e-300)):
        raise UndefinedMetricError(
            "zero-variance component; correlation alignment is undefined"
        )
    return centered / norms[..., None]


def align_to_truth(estimates: SourceEstimates, truth: SourceEstimates):
    """Match estimated SCVs to ground truth with one permutation common to
    all datasets, then fix per-dataset signs.

    The affinity of estimate j with truth l is the absolute Pearson
    correlation summed over datasets; the permutation maximizes total
    affinity (optimal assignment, ties resolved deterministically toward the
    lowest source index).

    Returns
    -------
    alignment : Alignment
    aligned : SourceEstimates
        Estimates reordered and sign-corrected to match ``truth``.
    """
    if estimates.scvs.shape != truth.scvs.shape:
        raise ShapeError(
            f"estimates {estimates.scvs.shape} and truth {truth.scvs.shape} disagree"
        )
    est_n = _normalized_rows(estimates.scvs)  # (p, K, n)
    tru_n = _normalized_rows(truth.scvs)
    corr = np.einsum("jkn,lkn->jlk", est_n, tru_n)  # corr(est j, truth l) per k
    affinity = np.abs(corr).sum(axis=2)
    est_idx, truth_idx = linear_sum_assignment(-affinity)
    permutation = np.empty_like(est_idx)
    permutation[truth_idx] = est_idx

    p, k_count, _ = estimates.scvs.shape
    signs = np.ones((k_count, p))
    aligned = np.empty_like(estimates.scvs)
    for l in range(p):
        j = permutation[l]
        sgn = np.where(corr[j, l, :] < 0.0, -1.0, 1.0)
        signs[:, l] = sgn
        aligned[l] = sgn[:, None] * estimates.scvs[j]
    return Alignment(permutation, signs), SourceEstimates(aligned)


def fix_signs_by_skewness(estimates: SourceEstimates) -> SourceEstimates:
    """Blind sign convention: flip each component so its sample skewness is
    nonnegative.  Used when no ground truth is available for alignment."""
    scvs = estimates.scvs
    centered = scvs - scvs.mean(axis=-1, keepdims=True)
    third = (centered**3).mean(axis=-1)
    flips = np.where(third < 0.0, -1.0, 1.0)  # (p, K)
    return SourceEstimates(scvs * flips[:, :, None])
