"""Estimation algorithms under a common convergence-control contract.

Five solvers are provided: matrix natural gradient, decoupled row-wise
Newton, the FastIVA fixed point, AuxIVA (auxiliary-function minimization),
and the Gaussian-model family IVA-G with the two-stage IVA-GL pipeline.

All runs are deterministic given (seed, config, data).  Convergence is
declared on the sign-invariant row-angle criterion: the maximum over
datasets and rows of ``1 - |cos angle(w_old, w_new)|``.  Row sign flips are
legitimate fixed points, so a Frobenius difference would never settle.

Random-orthogonal initialization on whitened data is the default; identity
initialization can start exactly on a saddle point of symmetric instances.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
import scipy.linalg

from .densities import (
    SUPER_GAUSSIAN,
    DensityModel,
    FastIvaNonlinearity,
    estimate_scatter,
    nonlinearity_eval,
)
from .errors import (
    ConfigError,
    DataValidationError,
    DegenerateUnmixingError,
    NearSingularUnmixingError,
    NumericalFailureError,
    ParameterError,
    ShapeError,
)
from .model import (
    DatasetCollection,
    UnmixingSet,
    apply_unmixing,
    center,
    compose_whitening,
    sample_covariances,
    whiten,
)
from .objective import (
    CostContext,
    iva_cost,
    iva_g_cost,
    iva_gradients,
    row_gradient,
    row_hessian,
)

__all__ = [
    "OptimizerConfig",
    "ConvergenceReport",
    "convergence_criterion",
    "run_natural_gradient",
    "run_newton",
    "run_fastiva",
    "run_auxiva",
    "run_iva_g",
    "run_iva_gl",
]

IVA_G_VARIANTS = ("matrix_gradient", "vector_gradient", "newton")

# the radius clamp shared with the objective module
_U_CLAMP = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    """Shared knobs for every solver.

    ``step_size`` of ``None`` picks the per-algorithm default: 1 for Newton
    and AuxIVA, 0.1 for the gradient methods.  A value of 0 is accepted as a
    degenerate setting (the run never moves and never converges).  ``init``
    is ``"identity"``, ``"random_orthogonal"`` (seeded), or a provided
    UnmixingSet.  ``scatter_ridge`` is relative: ``ridge * trace / K`` lands
    on the diagonal of every estimated SCV covariance.
    """

    step_size: Optional[float] = None
    max_iterations: int = 512
    tolerance: float = 1e-6
    init: Union[str, UnmixingSet] = "random_orthogonal"
    scatter_ridge: float = 1e-8
    hessian_fallback: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.step_size is not None and not 0.0 <= self.step_size <= 1.0:
            raise ParameterError("step_size must lie in [0, 1]")
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be positive")
        if self.tolerance <= 0.0:
            raise ParameterError("tolerance must be positive")
        if self.scatter_ridge < 0.0:
            raise ParameterError("scatter_ridge must be nonnegative")
        if isinstance(self.init, str) and self.init not in (
            "identity",
            "random_orthogonal",
        ):
            raise ConfigError(f"unknown init {self.init!r}")

    def resolved_step(self, default: float) -> float:
        return default if self.step_size is None else self.step_size

    def echo(self) -> dict:
        init = "provided" if isinstance(self.init, UnmixingSet) else self.init
        return {
            "step_size": self.step_size,
            "max_iterations": self.max_iterations,
            "tolerance": self.tolerance,
            "init": init,
            "scatter_ridge": self.scatter_ridge,
            "hessian_fallback": self.hessian_fallback,
            "seed": self.seed,
        }


@dataclass
class ConvergenceReport:
    """Per-run diagnostics.  ``cost_trace`` holds the initial cost plus one
    value per iteration; ``criterion_trace`` one value per iteration."""

    iterations_run: int
    converged: bool
    cost_trace: list
    criterion_trace: list
    final_cost: float
    wall_time: float
    seed: Optional[int] = None
    stages: Optional[list] = None
    config_echo: Optional[dict] = None

    def to_dict(self, include_wall_time: bool = True) -> dict:
        out = {
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "cost_trace": [float(c) for c in self.cost_trace],
            "criterion_trace": [float(c) for c in self.criterion_trace],
            "final_cost": float(self.final_cost),
            "seed": self.seed,
            "stages": self.stages,
            "config": self.config_echo,
        }
        if include_wall_time:
            out["wall_time"] = self.wall_time
        return out


def convergence_criterion(prev: UnmixingSet, nxt: UnmixingSet) -> float:
    """Max over datasets and rows of ``1 - |cos angle(w_prev, w_next)|``;
    zero exactly when every row matches up to sign and positive scale."""
    return _criterion_matrices(prev.matrices, nxt.matrices)


def _criterion_matrices(prev: np.ndarray, nxt: np.ndarray) -> float:
    if prev.shape != nxt.shape:
        raise ShapeError(f"shape mismatch: {prev.shape} vs {nxt.shape}")
    norms_prev = np.linalg.norm(prev, axis=2)
    norms_next = np.linalg.norm(nxt, axis=2)
    if np.any(norms_prev == 0.0) or np.any(norms_next == 0.0):
        raise DegenerateUnmixingError("zero-norm unmixing row")
    u = prev / norms_prev[:, :, None]
    v = nxt / norms_next[:, :, None]
    # 1 - |cos| = min over sign of ||u -+ v||^2 / 2; exact zero for rows that
    # agree bitwise up to sign, unlike the direct cosine formula
    diff = 0.5 * np.minimum(
        ((u - v) ** 2).sum(axis=2), ((u + v) ** 2).sum(axis=2)
    )
    return float(diff.max())


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def _initial_matrices(cfg, k_count, p, orthogonal=False) -> np.ndarray:
    if isinstance(cfg.init, UnmixingSet):
        if cfg.init.matrices.shape != (k_count, p, p):
            raise ShapeError(
                f"provided init has shape {cfg.init.matrices.shape}, "
                f"expected {(k_count, p, p)}"
            )
        mats = cfg.init.matrices.copy()
        return _symmetric_decorrelate_all(mats) if orthogonal else mats
    if cfg.init == "identity":
        return np.tile(np.eye(p), (k_count, 1, 1))
    rng = np.random.default_rng(cfg.seed)
    mats = np.empty((k_count, p, p))
    for k in range(k_count):
        q, r = np.linalg.qr(rng.standard_normal((p, p)))
        mats[k] = q * np.sign(np.diag(r))
    return mats


def _symmetric_decorrelate(w: np.ndarray) -> np.ndarray:
    """(W W^T)^{-1/2} W via the symmetric eigendecomposition."""
    gram = w @ w.T
    eigvals, eigvecs = np.linalg.eigh(gram)
    if eigvals[0] <= 0.0:
        raise NumericalFailureError("cannot decorrelate a rank-deficient matrix")
    inv_sqrt = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
    return inv_sqrt @ w


def _symmetric_decorrelate_all(mats: np.ndarray) -> np.ndarray:
    return np.stack([_symmetric_decorrelate(w) for w in mats])


def _guard_dets(mats: np.ndarray, floor: float, partial_report) -> None:
    signs, logdets = np.linalg.slogdet(mats)
    if np.any(signs == 0) or np.any(np.exp(logdets) < floor):
        raise NearSingularUnmixingError(
            f"unmixing determinant collapsed below {floor:g}",
            report=partial_report,
        )


def _partial_report(cost_trace, criterion_trace, seed, cfg, start) -> ConvergenceReport:
    return ConvergenceReport(
        iterations_run=len(criterion_trace),
        converged=False,
        cost_trace=list(cost_trace),
        criterion_trace=list(criterion_trace),
        final_cost=cost_trace[-1] if cost_trace else float("nan"),
        wall_time=time.perf_counter() - start,
        seed=seed,
        config_echo=cfg.echo(),
    )


# ---------------------------------------------------------------------------
# matrix natural gradient
# ---------------------------------------------------------------------------

def run_natural_gradient(ctx: CostContext, cfg: OptimizerConfig, callback=None):
    """Descend the cost with ``W <- W - rho * grad * W^T W`` per dataset."""
    start = time.perf_counter()
    rho = cfg.resolved_step(0.1)
    k_count, p = ctx.collection.k_count, ctx.collection.channel_count
    mats = _initial_matrices(cfg, k_count, p)
    current = UnmixingSet(mats)
    cost_trace = [iva_cost(ctx, current)]
    criterion_trace = []
    converged = False
    iterations = 0
    for iteration in range(1, cfg.max_iterations + 1):
        grads = iva_gradients(ctx, current)
        natural = np.einsum(
            "kij,klj,klm->kim", grads, current.matrices, current.matrices
        )
        new_mats = current.matrices - rho * natural
        _guard_dets(
            new_mats,
            ctx.det_floor,
            _partial_report(cost_trace, criterion_trace, cfg.seed, cfg, start),
        )
        crit = _criterion_matrices(current.matrices, new_mats)
        current = UnmixingSet(new_mats)
        cost_trace.append(iva_cost(ctx, current))
        criterion_trace.append(crit)
        iterations = iteration
        if callback is not None:
            callback(iteration, current.matrices)
        if rho > 0.0 and crit <= cfg.tolerance:
            converged = True
            break
    report = ConvergenceReport(
        iterations_run=iterations,
        converged=converged,
        cost_trace=cost_trace,
        criterion_trace=criterion_trace,
        final_cost=cost_trace[-1],
        wall_time=time.perf_counter() - start,
        seed=cfg.seed,
        config_echo=cfg.echo(),
    )
    return current, report


# ---------------------------------------------------------------------------
# decoupled Newton
# ---------------------------------------------------------------------------

def _newton_sweep(ctx, mats, rho, hessian_fallback, covs):
    """One sequential pass over all rows; mutates and returns ``mats``."""
    k_count, p = mats.shape[0], mats.shape[1]
    for j in range(p):
        current = UnmixingSet(mats)
        grad = row_gradient(ctx, current, j)
        hess = row_hessian(ctx, current, j)
        try:
            cho = scipy.linalg.cho_factor(hess, check_finite=False)
            step = scipy.linalg.cho_solve(cho, grad, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            if not hessian_fallback:
                raise NumericalFailureError(
                    f"row {j}: Hessian is not positive definite and fallback "
                    "is disabled"
                )
            step = grad
        rows = mats[:, j, :] - rho * step.reshape(k_count, p)
        # enforce unit SCV sample variance per dataset (scale assumption B2)
        variances = np.einsum("kp,kpq,kq->k", rows, covs, rows)
        if np.any(variances <= 0.0) or not np.all(np.isfinite(variances)):
            raise NumericalFailureError(f"row {j}: update produced a zero row")
        mats[:, j, :] = rows / np.sqrt(variances)[:, None]
    return mats


def run_newton(ctx: CostContext, cfg: OptimizerConfig, callback=None):
    """Row-decoupled Newton sweeps.

    Each sweep updates rows j = 1..p sequentially: solve the pK x pK block
    Hessian system for the stacked row, step, and rescale every sub-row to
    unit SCV sample variance.  A non-positive-definite Hessian falls back to
    a plain gradient step when ``hessian_fallback`` is on.
    """
    start = time.perf_counter()
    rho = cfg.resolved_step(1.0)
    k_count, p = ctx.collection.k_count, ctx.collection.channel_count
    mats = _initial_matrices(cfg, k_count, p)
    covs = sample_covariances(ctx.collection)
    cost_trace = [iva_cost(ctx, UnmixingSet(mats))]
    criterion_trace = []
    converged = False
    iterations = 0
    for sweep in range(1, cfg.max_iterations + 1):
        previous = mats.copy()
        try:
            mats = _newton_sweep(ctx, mats, rho, cfg.hessian_fallback, covs)
        except (
            DataValidationError,
            DegenerateUnmixingError,
            NearSingularUnmixingError,
        ) as exc:
            raise NearSingularUnmixingError(
                f"sweep {sweep}: {exc}",
                report=_partial_report(
                    cost_trace, criterion_trace, cfg.seed, cfg, start
                ),
            ) from exc
        _guard_dets(
            mats,
            ctx.det_floor,
            _partial_report(cost_trace, criterion_trace, cfg.seed, cfg, start),
        )
        crit = _criterion_matrices(previous, mats)
        cost_trace.append(iva_cost(ctx, UnmixingSet(mats)))
        criterion_trace.append(crit)
        iterations = sweep
        if callback is not None:
            callback(sweep, mats)
        if rho > 0.0 and crit <= cfg.tolerance:
            converged = True
            break
    report = ConvergenceReport(
        iterations_run=iterations,
        converged=converged,
        cost_trace=cost_trace,
        criterion_trace=criterion_trace,
        final_cost=cost_trace[-1],
        wall_time=time.perf_counter() - start,
        seed=cfg.seed,
        config_echo=cfg.echo(),
    )
    return UnmixingSet(mats), report


# ---------------------------------------------------------------------------
# FastIVA fixed point
# ---------------------------------------------------------------------------

def _require_whitened(collection):
    covs = sample_covariances(collection)
    eye = np.eye(collection.channel_count)
    err = max(np.linalg.norm(c - eye) for c in covs)
    if err > 1e-6:
        raise DataValidationError(
            f"FastIVA requires whitened data (covariance error {err:.2e}); "
            "run whiten() first"
        )


def _fastiva_cost(mats, x, g):
    y = np.einsum("kji,kin->kjn", mats, x)
    u = np.maximum((y**2).sum(axis=0), _U_CLAMP**2)
    val, _, _ = nonlinearity_eval(g, u)
    return float(val.mean(axis=1).sum())


def run_fastiva(
    ctx: CostContext,
    cfg: OptimizerConfig,
    g: FastIvaNonlinearity,
    callback=None,
):
    """Fixed-point updates under the orthogonality constraint.

    Requires whitened data.  Every iteration applies the row update

        w <- E[G'(u) + s^2 G''(u)] w - E[s G'(u) x],   u = sum_k s_k^2,

    for all rows and datasets, then symmetrically decorrelates each
    ``W^[k]``, so the iterates stay orthogonal throughout.
    """
    start = time.perf_counter()
    _require_whitened(ctx.collection)
    k_count, p, n = ctx.collection.data.shape
    mats = _initial_matrices(cfg, k_count, p, orthogonal=True)
    x = ctx.collection.data
    cost_trace = [_fastiva_cost(mats, x, g)]
    criterion_trace = []
    converged = False
    iterations = 0
    for iteration in range(1, cfg.max_iterations + 1):
        previous = mats.copy()
        y = np.einsum("kji,kin->kjn", mats, x)  # (K, p, n), y[k, j] = s_hat_j^[k]
        u = np.maximum((y**2).sum(axis=0), _U_CLAMP**2)  # (p, n)
        _, g1, g2 = nonlinearity_eval(g, u)
        new_mats = np.empty_like(mats)
        for k in range(k_count):
            coeff = (g1 + y[k] ** 2 * g2).mean(axis=1)  # (p,)
            cross = np.einsum("jn,mn->jm", y[k] * g1, x[k]) / n
            new_mats[k] = _symmetric_decorrelate(coeff[:, None] * mats[k] - cross)
        crit = _criterion_matrices(previous, new_mats)
        mats = new_mats
        cost_trace.append(_fastiva_cost(mats, x, g))
        criterion_trace.append(crit)
        iterations = iteration
        if callback is not None:
            callback(iteration, mats)
        if crit <= cfg.tolerance:
            converged = True
            break
    report = ConvergenceReport(
        iterations_run=iterations,
        converged=converged,
        cost_trace=cost_trace,
        criterion_trace=criterion_trace,
        final_cost=cost_trace[-1],
        wall_time=time.perf_counter() - start,
        seed=cfg.seed,
        config_echo=cfg.echo(),
    )
    return UnmixingSet(mats), report


# ---------------------------------------------------------------------------
# AuxIVA
# ---------------------------------------------------------------------------

def _radial_profile_of(model: DensityModel):
    if model.family != SUPER_GAUSSIAN:
        raise ParameterError(
            "AuxIVA requires super_gaussian_radial source models"
        )
    from .densities import RADIAL_PROFILES

    return RADIAL_PROFILES[model.params.get("profile", "norm")]


def _aux_cost(mats, x, profiles):
    y = np.einsum("kji,kin->kjn", mats, x)
    r = np.maximum(np.sqrt((y**2).sum(axis=0)), _U_CLAMP)  # (p, n)
    total = 0.0
    for j, profile in enumerate(profiles):
        g, _, _ = profile(r[j])
        total += float(g.mean())
    _, logdets = np.linalg.slogdet(mats)
    return total - float(logdets.sum())


def run_auxiva(ctx: CostContext, cfg: OptimizerConfig, callback=None):
    """Auxiliary-function minimization with iterative-projection row updates.

    Per iteration: set ``r_j = ||s_hat_j||_2`` from the current unmixing,
    build the weighted covariances ``V_j^[k] = E[(G'(r_j)/r_j) x x^T]``, then
    update each row in sequence by ``w = (W V_j)^{-1} e_j`` scaled to
    ``w^T V_j w = 1``.  The surrogate cost is non-increasing by construction;
    the update has no step-size knob.
    """
    start = time.perf_counter()
    profiles = [_radial_profile_of(m) for m in ctx.models]
    k_count, p, n = ctx.collection.data.shape
    x = ctx.collection.data
    mats = _initial_matrices(cfg, k_count, p)
    cost_trace = [_aux_cost(mats, x, profiles)]
    criterion_trace = []
    converged = False
    iterations = 0
    eye = np.eye(p)
    for iteration in range(1, cfg.max_iterations + 1):
        previous = mats.copy()
        y = np.einsum("kji,kin->kjn", mats, x)
        r = np.maximum(np.sqrt((y**2).sum(axis=0)), _U_CLAMP)  # (p, n)
        weights = np.empty_like(r)
        for j, profile in enumerate(profiles):
            _, g1, _ = profile(r[j])
            weights[j] = g1 / r[j]
        v_all = np.einsum("jn,kxn,kyn->kjxy", weights, x, x) / n
        for k in range(k_count):
            for j in range(p):
                v = v_all[k, j]
                try:
                    w = np.linalg.solve(mats[k] @ v, eye[j])
                except np.linalg.LinAlgError:
                    v = v + (1e-12 * np.trace(v) / p) * eye
                    try:
                        w = np.linalg.solve(mats[k] @ v, eye[j])
                    except np.linalg.LinAlgError:
                        raise NumericalFailureError(
                            f"dataset {k}, row {j}: projection solve failed"
                        ) from None
                scale = float(w @ v @ w)
                if scale <= 0.0 or not np.isfinite(scale):
                    raise NumericalFailureError(
                        f"dataset {k}, row {j}: degenerate weighted norm"
                    )
                mats[k, j] = w / np.sqrt(scale)
        _guard_dets(
            mats,
            ctx.det_floor,
            _partial_report(cost_trace, criterion_trace, cfg.seed, cfg, start),
        )
        crit = _criterion_matrices(previous, mats)
        cost_trace.append(_aux_cost(mats, x, profiles))
        criterion_trace.append(crit)
        iterations = iteration
        if callback is not None:
            callback(iteration, mats)
        if crit <= cfg.tolerance:
            converged = True
            break
    report = ConvergenceReport(
        iterations_run=iterations,
        converged=converged,
        cost_trace=cost_trace,
        criterion_trace=criterion_trace,
        final_cost=cost_trace[-1],
        wall_time=time.perf_counter() - start,
        seed=cfg.seed,
        config_echo=cfg.echo(),
    )
    return UnmixingSet(mats), report


# ---------------------------------------------------------------------------
# IVA-G and IVA-GL
# ---------------------------------------------------------------------------

def _gaussian_models(est_scvs, ridge):
    return tuple(
        DensityModel.gaussian(scatter=estimate_scatter(block, ridge))
        for block in est_scvs
    )


def _vector_gradient_sweep(ctx, mats, rho, covs):
    k_count, p = mats.shape[0], mats.shape[1]
    for j in range(p):
        current = UnmixingSet(mats)
        grad = row_gradient(ctx, current, j)
        rows = mats[:, j, :] - rho * grad.reshape(k_count, p)
        variances = np.einsum("kp,kpq,kq->k", rows, covs, rows)
        if np.any(variances <= 0.0):
            raise NumericalFailureError(f"row {j}: update produced a zero row")
        mats[:, j, :] = rows / np.sqrt(variances)[:, None]
    return mats


def _run_iva_g_core(data: DatasetCollection, cfg: OptimizerConfig, variant: str):
    """Shared IVA-G loop on internally centered and whitened data.

    Returns the whitened-space unmixing, the whitening transform, the report
    (costs already shifted to the composed space), and the whitened data.
    """
    if variant not in IVA_G_VARIANTS:
        raise ConfigError(
            f"unknown IVA-G variant {variant!r}; choose from {IVA_G_VARIANTS}"
        )
    start = time.perf_counter()
    centered, _ = center(data)
    whitened, transform = whiten(centered)
    k_count, p = whitened.k_count, whitened.channel_count
    # composed-space cost = whitened-space cost - sum_k log|det V^[k]|
    shift = -float(np.linalg.slogdet(transform.whiteners)[1].sum())
    rho = cfg.resolved_step(1.0 if variant == "newton" else 0.1)
    mats = _initial_matrices(cfg, k_count, p)
    covs = sample_covariances(whitened)
    cost_trace = [iva_g_cost(UnmixingSet(mats), whitened) + shift]
    criterion_trace = []
    converged = False
    iterations = 0
    for iteration in range(1, cfg.max_iterations + 1):
        previous = mats.copy()
        est = apply_unmixing(UnmixingSet(mats), whitened)
        models = _gaussian_models(est.scvs, cfg.scatter_ridge)
        ctx = CostContext(whitened, models)
        if variant == "matrix_gradient":
            current = UnmixingSet(mats)
            grads = iva_gradients(ctx, current)
            natural = np.einsum("kij,klj,klm->kim", grads, mats, mats)
            mats = mats - rho * natural
        elif variant == "vector_gradient":
            mats = _vector_gradient_sweep(ctx, mats, rho, covs)
        else:
            mats = _newton_sweep(ctx, mats, rho, cfg.hessian_fallback, covs)
        _guard_dets(
            mats,
            ctx.det_floor,
            _partial_report(cost_trace, criterion_trace, cfg.seed, cfg, start),
        )
        crit = _criterion_matrices(previous, mats)
        cost_trace.append(iva_g_cost(UnmixingSet(mats), whitened) + shift)
        criterion_trace.append(crit)
        iterations = iteration
        if rho > 0.0 and crit <= cfg.tolerance:
            converged = True
            break
    report = ConvergenceReport(
        iterations_run=iterations,
        converged=converged,
        cost_trace=cost_trace,
        criterion_trace=criterion_trace,
        final_cost=cost_trace[-1],
        wall_time=time.perf_counter() - start,
        seed=cfg.seed,
        stages=[{"name": f"iva_g_{variant}", "iterations": iterations}],
        config_echo=cfg.echo(),
    )
    return mats, transform, report, whitened, shift


def run_iva_g(data: DatasetCollection, cfg: OptimizerConfig, variant: str = "newton"):
    """IVA with Gaussian source models whose scatters are re-estimated from
    the current SCV estimates once per outer iteration.

    ``variant`` selects the update kernel: ``"matrix_gradient"`` (natural
    gradient on whole matrices), ``"vector_gradient"`` (row-wise gradient
    steps), or ``"newton"`` (row-decoupled Newton).  Centering and whitening
    happen internally; the returned unmixing is composed with the whitener.
    """
    mats, transform, report, _, _ = _run_iva_g_core(data, cfg, variant)
    composed = compose_whitening(UnmixingSet(mats), transform)
    return composed, report


def run_iva_gl(data: DatasetCollection, cfg: OptimizerConfig):
    """Two-stage pipeline: IVA-G (Newton) to convergence, then Laplace-model
    Newton refinement with identity scatter, initialized at the stage-1
    solution.  The report concatenates both stages' traces with stage
    markers; per-stage traces are kept whole under ``stages``."""
    start = time.perf_counter()
    mats, transform, report_g, whitened, shift = _run_iva_g_core(
        data, cfg, "newton"
    )
    k_count = whitened.k_count
    laplace_models = tuple(
        DensityModel.laplace(dim=k_count)
        for _ in range(whitened.channel_count)
    )
    ctx = CostContext(whitened, laplace_models)
    stage2_cfg = replace(cfg, init=UnmixingSet(mats))
    final_white, report_l = run_newton(ctx, stage2_cfg)
    composed = compose_whitening(final_white, transform)

    stage1_costs = [c for c in report_g.cost_trace]
    stage2_costs = [c + shift for c in report_l.cost_trace]
    stages = [
        {
            "name": "iva_g_newton",
            "iterations": report_g.iterations_run,
            "cost_trace": stage1_costs,
            "criterion_trace": list(report_g.criterion_trace),
        },
        {
            "name": "laplace_newton",
            "iterations": report_l.iterations_run,
            "cost_trace": stage2_costs,
            "criterion_trace": list(report_l.criterion_trace),
        },
    ]
    report = ConvergenceReport(
        iterations_run=report_g.iterations_run + report_l.iterations_run,
        converged=report_l.converged,
        cost_trace=stage1_costs + stage2_costs[1:],
        criterion_trace=list(report_g.criterion_trace)
        + list(report_l.criterion_trace),
        final_cost=stage2_costs[-1],
        wall_time=time.perf_counter() - start,
        seed=cfg.seed,
        stages=stages,
        config_echo=cfg.echo(),
    )
    return composed, report
