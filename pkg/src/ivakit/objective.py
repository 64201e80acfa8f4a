"""The separation objective and its derivatives.

The computable objective is the maximum-likelihood surrogate

    cost(W) = sum_j mean_i[ -log p_j(s_hat_{j,i}) ] - sum_k log|det W^[k]|,

with expectations estimated by sample means.  The entropy-based population
cost differs from this by a constant whenever the source models are correct,
so every optimizer in :mod:`ivakit.optimizers` descends this quantity.

Row-decoupled derivatives (gradient and block Hessian of the cost as a
function of one unmixing row stacked across datasets) support the Newton
updates.  Scores are evaluated with a 1e-12 radius clamp so constructed data
sitting exactly on a density's singular point cannot abort a run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .densities import (
    DensityModel,
    _log_density_batch,
    _score_batch,
    _score_jacobian_batch,
    estimate_scatter,
)
from .errors import (
    DataValidationError,
    DegenerateUnmixingError,
    NearSingularUnmixingError,
    ParameterError,
    RankDeficiencyError,
    ShapeError,
)
from .model import DatasetCollection, UnmixingSet, apply_unmixing

__all__ = [
    "CostContext",
    "DecouplingBasis",
    "iva_cost",
    "iva_gradient",
    "iva_gradients",
    "natural_gradient",
    "decoupling_vector",
    "row_gradient",
    "row_hessian",
    "iva_g_cost",
    "negentropy_moment_approx",
    "negentropy_nonquadratic_approx",
]

# score clamp used by all objective evaluations (see densities singular-point policy)
_CLAMP = 1e-12


@dataclass(frozen=True)
class CostContext:
    """Pairing of a (centered, optionally whitened) collection with one
    assumed source model per SCV."""

    collection: DatasetCollection
    models: tuple
    det_floor: float = 1e-12

    def __post_init__(self):
        models = tuple(self.models)
        if len(models) != self.collection.channel_count:
            raise ShapeError(
                f"need one model per source: got {len(models)} models for "
                f"p={self.collection.channel_count}"
            )
        for j, model in enumerate(models):
            if not isinstance(model, DensityModel):
                raise ParameterError(f"model {j} is not a DensityModel")
            if model.dim != self.collection.k_count:
                raise ShapeError(
                    f"model {j} has dimension {model.dim}, data has "
                    f"K={self.collection.k_count}"
                )
        if self.det_floor <= 0:
            raise ParameterError("det_floor must be positive")
        object.__setattr__(self, "models", models)


def _logabsdets(ctx, unmixing):
    signs, logdets = np.linalg.slogdet(unmixing.matrices)
    if np.any(signs == 0) or np.any(np.exp(logdets) < ctx.det_floor):
        raise NearSingularUnmixingError(
            f"abs(det W) fell below the floor {ctx.det_floor:g}"
        )
    return logdets


def iva_cost(ctx: CostContext, unmixing: UnmixingSet) -> float:
    """Sample-mean negative log likelihood minus the log-determinant reward."""
    logdets = _logabsdets(ctx, unmixing)
    est = apply_unmixing(unmixing, ctx.collection)
    total = 0.0
    for j, model in enumerate(ctx.models):
        total += -float(
            _log_density_batch(model, est.scvs[j], _CLAMP).mean()
        )
    return total - float(logdets.sum())


def _score_stack(ctx, est):
    """phi over all SCVs: (p, K, n) array, entry [j, k, i]."""
    p, k_count, n = est.scvs.shape
    phi = np.empty((p, k_count, n))
    for j, model in enumerate(ctx.models):
        phi[j] = _score_batch(model, est.scvs[j], _CLAMP)
    return phi


def iva_gradients(ctx: CostContext, unmixing: UnmixingSet) -> np.ndarray:
    """Matrix gradients for all datasets at once, shape (K, p, p)."""
    _logabsdets(ctx, unmixing)
    est = apply_unmixing(unmixing, ctx.collection)
    phi = _score_stack(ctx, est)
    n = ctx.collection.sample_count
    # row j of the k-th gradient is E[phi_k(s_hat_j) x^[k]^T]
    grads = np.einsum("jkn,kmn->kjm", phi, ctx.collection.data) / n
    grads -= np.linalg.inv(np.transpose(unmixing.matrices, (0, 2, 1)))
    return grads


def iva_gradient(ctx: CostContext, unmixing: UnmixingSet, k: int) -> np.ndarray:
    """Gradient of the cost with respect to W^[k]:
    ``E[phi^[k](s_hat) x^[k]^T] - (W^[k]^T)^{-1}``."""
    return iva_gradients(ctx, unmixing)[k]


def natural_gradient(ctx: CostContext, unmixing: UnmixingSet, k: int) -> np.ndarray:
    """Matrix gradient postmultiplied by ``W^T W``."""
    w = unmixing.matrices[k]
    return iva_gradient(ctx, unmixing, k) @ w.T @ w


def decoupling_vector(w_matrix: np.ndarray, j: int) -> np.ndarray:
    """Unit vector orthogonal to every row of ``w_matrix`` except row j.

    The sign is fixed so the inner product with row j is positive, making
    ``log|det W| = log(h^T w_j) + 0.5 log det(W~ W~^T)`` differentiable in
    the row.

    Raises
    ------
    DegenerateUnmixingError
        If the remaining rows do not have full rank p - 1, or row j lies in
        their span.
    """
    w = np.asarray(w_matrix, dtype=np.float64)
    p = w.shape[0]
    if w.shape != (p, p):
        raise ShapeError(f"expected a square matrix, got {w.shape}")
    if not 0 <= j < p:
        raise ParameterError(f"row index {j} out of range for p={p}")
    reduced = np.delete(w, j, axis=0)
    _, svals, vt = np.linalg.svd(reduced)
    if p > 1 and svals[-1] <= 1e-12 * max(svals[0], 1.0):
        raise DegenerateUnmixingError(
            f"rows other than {j} are rank deficient; no unique decoupling vector"
        )
    h = vt[-1]
    inner = float(h @ w[j])
    if abs(inner) <= 1e-14 * np.linalg.norm(w[j]):
        raise DegenerateUnmixingError(
            f"row {j} lies in the span of the remaining rows"
        )
    return h if inner > 0 else -h


@dataclass(frozen=True)
class DecouplingBasis:
    """Decoupling vectors for one source row across all datasets, shape (K, p)."""

    h: np.ndarray

    @classmethod
    def build(cls, unmixing: UnmixingSet, j: int) -> "DecouplingBasis":
        vectors = np.stack(
            [decoupling_vector(w, j) for w in unmixing.matrices]
        )
        return cls(vectors)


def row_gradient(ctx: CostContext, unmixing: UnmixingSet, j: int) -> np.ndarray:
    """Gradient of the cost with respect to the stacked row
    ``w_j = (w_j^[1], ..., w_j^[K])``, a pK-vector (dataset-major blocks).

    Per dataset the block is ``E[phi^[k](s_hat_j) x^[k]] - h / (h^T w_j^[k])``
    with h the decoupling vector.
    """
    basis = DecouplingBasis.build(unmixing, j)
    est = apply_unmixing(unmixing, ctx.collection)
    phi = _score_batch(ctx.models[j], est.scvs[j], _CLAMP)  # (K, n)
    n = ctx.collection.sample_count
    blocks = np.einsum("kn,kmn->km", phi, ctx.collection.data) / n  # (K, p)
    inners = np.einsum("kp,kp->k", basis.h, unmixing.matrices[:, j, :])
    blocks = blocks - basis.h / inners[:, None]
    return blocks.reshape(-1)


def row_hessian(ctx: CostContext, unmixing: UnmixingSet, j: int) -> np.ndarray:
    """Block Hessian of the cost in the stacked row w_j, shape (pK, pK).

    Block (k1, k2) is the sample mean of
    ``[J_phi(s_hat_j)]_{k1,k2} x^[k1] (x^[k2])^T`` with J_phi the score
    Jacobian; the diagonal adds ``h h^T / (h^T w_j)^2`` from the determinant
    term.
    """
    basis = DecouplingBasis.build(unmixing, j)
    est = apply_unmixing(unmixing, ctx.collection)
    jac = _score_jacobian_batch(ctx.models[j], est.scvs[j], _CLAMP)  # (K, K, n)
    x = ctx.collection.data
    k_count, p, n = x.shape
    blocks = np.einsum("abn,axn,byn->abxy", jac, x, x) / n
    inners = np.einsum("kp,kp->k", basis.h, unmixing.matrices[:, j, :])
    hess = blocks.transpose(0, 2, 1, 3).reshape(k_count * p, k_count * p)
    for k in range(k_count):
        outer = np.outer(basis.h[k], basis.h[k]) / inners[k] ** 2
        hess[k * p : (k + 1) * p, k * p : (k + 1) * p] += outer
    return hess


def iva_g_cost(unmixing: UnmixingSet, collection: DatasetCollection) -> float:
    """Closed-form Gaussian cost: ``pK log(2 pi e)/2 + 0.5 sum log eigenvalues
    of each SCV sample covariance - sum_k log|det W^[k]|``."""
    signs, logdets = np.linalg.slogdet(unmixing.matrices)
    if np.any(signs == 0):
        raise NearSingularUnmixingError("singular unmixing matrix in iva_g_cost")
    est = apply_unmixing(unmixing, collection)
    p, k_count, _ = est.scvs.shape
    log_eig_sum = 0.0
    for j in range(p):
        cov = estimate_scatter(est.scvs[j])
        eigvals = np.linalg.eigvalsh(cov)
        if eigvals[0] <= 0.0:
            cov = estimate_scatter(est.scvs[j], ridge=1e-12)
            eigvals = np.linalg.eigvalsh(cov)
            if eigvals[0] <= 0.0:
                raise RankDeficiencyError(
                    f"SCV {j} covariance is not positive definite even after ridge"
                )
        log_eig_sum += float(np.log(eigvals).sum())
    return (
        0.5 * p * k_count * math.log(2.0 * math.pi * math.e)
        + 0.5 * log_eig_sum
        - float(logdets.sum())
    )


# ---------------------------------------------------------------------------
# negentropy approximations (scalar series)
# ---------------------------------------------------------------------------

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(64)
_GH_TOTAL = _GH_WEIGHTS.sum()


def _log_cosh(y):
    return np.logaddexp(y, -y) - math.log(2.0)


def _neg_gauss_exp(y):
    return -np.exp(-0.5 * y * y)


# standard-normal references E[G(nu)], 64-node Gauss-Hermite quadrature
_NONQUADRATIC = {
    "log_cosh": (_log_cosh, float((_GH_WEIGHTS * _log_cosh(_GH_NODES)).sum() / _GH_TOTAL)),
    "gauss_exp": (
        _neg_gauss_exp,
        float((_GH_WEIGHTS * _neg_gauss_exp(_GH_NODES)).sum() / _GH_TOTAL),
    ),
}


def _require_standardized(y):
    arr = np.asarray(y, dtype=np.float64).reshape(-1)
    if arr.size < 2:
        raise DataValidationError("need at least two samples")
    mean = arr.mean()
    var = arr.var()
    if abs(mean) > 1e-6 or abs(var - 1.0) > 1e-6:
        raise DataValidationError(
            f"input must be standardized (mean {mean:.2e}, variance {var:.6f})"
        )
    return arr


def negentropy_moment_approx(y) -> float:
    """Two-term moment approximation of negentropy for a standardized sample:
    ``(1/12) E(y^3)^2 + (1/48) kurt(y)^2`` with ``kurt(y) = E(y^4) - 3``."""
    arr = _require_standardized(y)
    skew_term = float((arr**3).mean())
    kurt = float((arr**4).mean()) - 3.0
    return skew_term**2 / 12.0 + kurt**2 / 48.0


def negentropy_nonquadratic_approx(y, g: str = "log_cosh") -> float:
    """One-function approximation ``(E G(y) - E G(nu))^2`` for standardized y.

    ``g`` is ``"log_cosh"`` or ``"gauss_exp"`` (the negative Gaussian
    exponential).  The standard-normal reference is a precomputed quadrature
    constant, so the estimate carries no Monte Carlo noise of its own.
    """
    arr = _require_standardized(y)
    if g not in _NONQUADRATIC:
        raise ParameterError(
            f"unknown nonquadratic tag {g!r}; choose from {sorted(_NONQUADRATIC)}"
        )
    func, ref = _NONQUADRATIC[g]
    return float((func(arr).mean() - ref) ** 2)
