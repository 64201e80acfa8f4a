"""Source-density families for source component vectors.

Each family supplies the log density, the multivariate score
``phi(y) = -d log p(y) / dy``, and the score Jacobian (the Hessian of
``-log p``).  The elliptical families (Gaussian, Laplace, Student-t, Kotz,
MGGD) share the structure ``phi(y) = a(Q) * Sigma^{-1}(y - mu)`` with
``Q = (y - mu)^T Sigma^{-1} (y - mu)``, which keeps batch evaluation cheap.

Evaluations accept a single K-vector or a (K, n) batch of column vectors and
vectorize over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import gammaln

from .errors import ParameterError, RankDeficiencyError, SingularityError

__all__ = [
    "DensityModel",
    "FastIvaNonlinearity",
    "log_density",
    "score",
    "score_jacobian",
    "nonlinearity_eval",
    "estimate_scatter",
    "RADIAL_PROFILES",
]

GAUSSIAN = "gaussian"
LAPLACE = "laplace"
STUDENT_T = "student_t"
KOTZ = "kotz"
MGGD = "mggd"
MIXED = "mixed"
SUPER_GAUSSIAN = "super_gaussian_radial"

_FAMILIES = (GAUSSIAN, LAPLACE, STUDENT_T, KOTZ, MGGD, MIXED, SUPER_GAUSSIAN)

# Admissible radial profiles for the super-Gaussian family: G is even (taken
# as a function of r = ||y||), strictly increasing on r > 0, and G'(r)/r is
# strictly decreasing on r > 0.  Each entry maps r > 0 to (G, G', G'').
RADIAL_PROFILES = {
    "norm": lambda r: (r, np.ones_like(r), np.zeros_like(r)),
    "sqrt": lambda r: (
        np.sqrt(r),
        0.5 / np.sqrt(r),
        -0.25 * r ** (-1.5),
    ),
    "log_cosh": lambda r: (
        np.logaddexp(r, -r) - math.log(2.0),
        np.tanh(r),
        1.0 - np.tanh(r) ** 2,
    ),
}


@dataclass(frozen=True)
class DensityModel:
    """A tagged density family with location, scatter, and family parameters.

    Instances are immutable; evaluation functions are pure.  Use the
    per-family classmethods instead of the raw constructor.
    """

    family: str
    location: np.ndarray
    scatter: np.ndarray
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ParameterError(f"unknown density family {self.family!r}")
        loc = np.asarray(self.location, dtype=np.float64).reshape(-1)
        sca = np.asarray(self.scatter, dtype=np.float64)
        k = loc.shape[0]
        if sca.shape != (k, k):
            raise ParameterError(
                f"scatter shape {sca.shape} does not match location dim {k}"
            )
        if not np.allclose(sca, sca.T, atol=1e-10):
            raise ParameterError("scatter must be symmetric")
        if self.family != SUPER_GAUSSIAN:
            eigvals = np.linalg.eigvalsh(sca)
            if eigvals[0] <= 0:
                raise ParameterError(
                    f"scatter must be positive definite (min eigenvalue {eigvals[0]:.3e})"
                )
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "scatter", sca)
        object.__setattr__(self, "params", dict(self.params))
        self._validate_params()

    def _validate_params(self):
        p = self.params
        if self.family == STUDENT_T:
            if p.get("nu", 0.0) <= 0:
                raise ParameterError("student_t requires nu > 0")
        elif self.family == KOTZ:
            beta, eta, lam = p.get("beta"), p.get("eta"), p.get("lam")
            if beta is None or eta is None or lam is None:
                raise ParameterError("kotz requires beta, eta, lam")
            k = self.dim
            if beta <= 0 or lam <= 0 or eta <= (2.0 - k) / 2.0:
                raise ParameterError(
                    f"kotz needs beta > 0, lam > 0, eta > {(2.0 - k) / 2.0}"
                )
            if (2 * eta + k - 2) / (2 * beta) <= 0:
                raise ParameterError("kotz derived parameter nu must be positive")
        elif self.family == MGGD:
            if p.get("alpha", 0.0) <= 0 or p.get("beta", 0.0) <= 0:
                raise ParameterError("mggd requires alpha > 0 and beta > 0")
        elif self.family == MIXED:
            eps = p.get("epsilon")
            comp_a, comp_b = p.get("component_a"), p.get("component_b")
            if eps is None or not 0.0 <= eps <= 1.0:
                raise ParameterError("mixed requires epsilon in [0, 1]")
            if not isinstance(comp_a, DensityModel) or not isinstance(
                comp_b, DensityModel
            ):
                raise ParameterError("mixed components must be DensityModel instances")
            if comp_a.dim != self.dim or comp_b.dim != self.dim:
                raise ParameterError("mixed components must match the mixture dimension")
        elif self.family == SUPER_GAUSSIAN:
            profile = p.get("profile", "norm")
            if profile not in RADIAL_PROFILES:
                raise ParameterError(
                    f"unknown radial profile {profile!r}; choose from "
                    f"{sorted(RADIAL_PROFILES)}"
                )
            if not np.allclose(self.scatter, np.eye(self.dim), atol=1e-12):
                raise ParameterError(
                    "super_gaussian_radial uses the Euclidean norm; scatter must be identity"
                )

    # -- constructors ------------------------------------------------------

    @classmethod
    def gaussian(cls, location=None, scatter=None, dim=None):
        location, scatter = _fill_loc_scatter(location, scatter, dim)
        return cls(GAUSSIAN, location, scatter)

    @classmethod
    def laplace(cls, location=None, scatter=None, dim=None):
        location, scatter = _fill_loc_scatter(location, scatter, dim)
        return cls(LAPLACE, location, scatter)

    @classmethod
    def student_t(cls, nu, location=None, scatter=None, dim=None):
        location, scatter = _fill_loc_scatter(location, scatter, dim)
        return cls(STUDENT_T, location, scatter, {"nu": float(nu)})

    @classmethod
    def kotz(cls, beta, eta, lam, location=None, scatter=None, dim=None):
        location, scatter = _fill_loc_scatter(location, scatter, dim)
        return cls(
            KOTZ,
            location,
            scatter,
            {"beta": float(beta), "eta": float(eta), "lam": float(lam)},
        )

    @classmethod
    def mggd(cls, alpha, beta, location=None, scatter=None, dim=None):
        location, scatter = _fill_loc_scatter(location, scatter, dim)
        return cls(MGGD, location, scatter, {"alpha": float(alpha), "beta": float(beta)})

    @classmethod
    def mixed(cls, epsilon, component_a, component_b):
        return cls(
            MIXED,
            component_a.location,
            component_a.scatter,
            {
                "epsilon": float(epsilon),
                "component_a": component_a,
                "component_b": component_b,
            },
        )

    @classmethod
    def super_gaussian(cls, profile="norm", location=None, dim=None):
        if location is None and dim is None:
            raise ParameterError("give location or dim")
        if location is None:
            location = np.zeros(dim)
        location = np.asarray(location, dtype=np.float64).reshape(-1)
        return cls(
            SUPER_GAUSSIAN,
            location,
            np.eye(location.shape[0]),
            {"profile": profile},
        )

    # -- basic properties --------------------------------------------------

    @property
    def dim(self) -> int:
        return self.location.shape[0]

    @property
    def scatter_inv(self) -> np.ndarray:
        cached = self.__dict__.get("_scatter_inv")
        if cached is None:
            cached = np.linalg.inv(self.scatter)
            self.__dict__["_scatter_inv"] = cached
        return cached

    @property
    def scatter_logdet(self) -> float:
        cached = self.__dict__.get("_scatter_logdet")
        if cached is None:
            cached = float(np.linalg.slogdet(self.scatter)[1])
            self.__dict__["_scatter_logdet"] = cached
        return cached

    def with_scatter(self, scatter) -> "DensityModel":
        """Copy of this model with a new scatter matrix."""
        return DensityModel(self.family, self.location, scatter, self.params)

    # -- JSON descriptor ---------------------------------------------------

    def to_descriptor(self) -> dict:
        params = {}
        for key, val in self.params.items():
            params[key] = (
                val.to_descriptor() if isinstance(val, DensityModel) else val
            )
        return {
            "family": self.family,
            "location": self.location.tolist(),
            "scatter": self.scatter.tolist(),
            "params": params,
        }

    @classmethod
    def from_descriptor(cls, descriptor: Mapping) -> "DensityModel":
        params = dict(descriptor.get("params", {}))
        for key in ("component_a", "component_b"):
            if key in params:
                params[key] = cls.from_descriptor(params[key])
        return cls(
            descriptor["family"],
            np.asarray(descriptor["location"], dtype=np.float64),
            np.asarray(descriptor["scatter"], dtype=np.float64),
            params,
        )


def _fill_loc_scatter(location, scatter, dim):
    if location is None and scatter is None and dim is None:
        raise ParameterError("give location, scatter, or dim")
    if location is None:
        size = dim if dim is not None else np.asarray(scatter).shape[0]
        location = np.zeros(size)
    location = np.asarray(location, dtype=np.float64).reshape(-1)
    if scatter is None:
        scatter = np.eye(location.shape[0])
    return location, np.asarray(scatter, dtype=np.float64)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _prepare(model, y):
    """Return (Y as (K, n), was_single) after shape checks."""
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
        single = True
    elif arr.ndim == 2:
        single = False
    else:
        raise ParameterError(f"y must be a K-vector or (K, n) batch, got {arr.shape}")
    if arr.shape[0] != model.dim:
        raise ParameterError(
            f"y has dimension {arr.shape[0]}, model expects {model.dim}"
        )
    if not np.all(np.isfinite(arr)):
        raise ParameterError("y contains non-finite entries")
    return arr, single


def _quad_form(model, Y):
    """U = Sigma^{-1}(Y - mu) and Q = column-wise quadratic form."""
    diff = Y - model.location[:, None]
    u = model.scatter_inv @ diff
    q = np.einsum("kn,kn->n", diff, u)
    # rounding can push tiny quadratic forms below zero
    return u, np.maximum(q, 0.0)


def _radial_weight(model, q, clamp_radius):
    """Scalar weight a(Q) with phi = a(Q) * Sigma^{-1}(y - mu), plus a'(Q).

    ``clamp_radius`` clamps sqrt(Q) away from zero for families whose weight
    diverges at the center; ``None`` raises SingularityError there instead.
    """
    family = model.family
    if family == GAUSSIAN:
        return np.ones_like(q), np.zeros_like(q)

    singular_at_zero = False
    if family == LAPLACE:
        singular_at_zero = True
    elif family == KOTZ:
        eta, beta = model.params["eta"], model.params["beta"]
        singular_at_zero = eta != 1.0 or beta < 1.0
    elif family == MGGD:
        singular_at_zero = model.params["beta"] < 1.0

    if singular_at_zero:
        if clamp_radius is None:
            if np.any(q == 0.0):
                raise SingularityError(
                    f"{family} score is singular at the location; clamp the radius"
                )
        else:
            q = np.maximum(q, clamp_radius**2)

    if family == LAPLACE:
        a = 1.0 / np.sqrt(q)
        return a, -0.5 * q ** (-1.5)
    if family == STUDENT_T:
        nu = model.params["nu"]
        k = model.dim
        a = (nu + k) / (nu + q)
        return a, -(nu + k) / (nu + q) ** 2
    if family == KOTZ:
        beta, eta, lam = (
            model.params["beta"],
            model.params["eta"],
            model.params["lam"],
        )
        a = 2.0 * (1.0 - eta + lam * beta * q**beta) / q
        da = -2.0 * (1.0 - eta) / q**2 + 2.0 * lam * beta * (beta - 1.0) * q ** (
            beta - 2.0
        )
        return a, da
    if family == MGGD:
        alpha, beta = model.params["alpha"], model.params["beta"]
        a = 2.0 * beta * q ** (beta - 1.0) / alpha**beta
        da = 2.0 * beta * (beta - 1.0) * q ** (beta - 2.0) / alpha**beta
        return a, da
    raise ParameterError(f"no radial weight for family {family!r}")


def _log_norm_const(model) -> float:
    """log of the density's normalizing constant (excludes the Q-kernel)."""
    k = model.dim
    family = model.family
    if family == GAUSSIAN:
        return -0.5 * k * math.log(2 * math.pi) - 0.5 * model.scatter_logdet
    if family == LAPLACE:
        return (
            -0.5 * model.scatter_logdet
            - gammaln((k + 1) / 2.0)
            - k * math.log(2.0)
            - 0.5 * (k - 1) * math.log(math.pi)
        )
    if family == STUDENT_T:
        nu = model.params["nu"]
        return (
            gammaln((nu + k) / 2.0)
            - gammaln(nu / 2.0)
            - 0.5 * k * math.log(nu * math.pi)
            - 0.5 * model.scatter_logdet
        )
    if family == KOTZ:
        beta, eta, lam = (
            model.params["beta"],
            model.params["eta"],
            model.params["lam"],
        )
        nu_kotz = (2 * eta + k - 2) / (2 * beta)
        return (
            gammaln(k / 2.0)
            + math.log(beta)
            + nu_kotz * math.log(lam)
            - gammaln(nu_kotz)
            - 0.5 * k * math.log(math.pi)
            - 0.5 * model.scatter_logdet
        )
    if family == MGGD:
        alpha, beta = model.params["alpha"], model.params["beta"]
        return (
            gammaln(k / 2.0)
            + math.log(beta)
            - gammaln(k / (2.0 * beta))
            - 0.5 * k * math.log(math.pi)
            - 0.5 * k * math.log(alpha)
            - 0.5 * model.scatter_logdet
        )
    raise ParameterError(f"no closed-form constant for family {family!r}")


def log_density(model: DensityModel, y, clamp_radius: float | None = None):
    """Natural-log density at ``y`` (scalar for a K-vector, (n,) for a batch).

    Includes the normalizing constant for all closed-form families.  For the
    super-Gaussian radial family this returns the unnormalized value
    ``-G_R(||y - mu||)``.
    """
    arr, single = _prepare(model, y)
    out = _log_density_batch(model, arr, clamp_radius)
    return float(out[0]) if single else out


def _log_density_batch(model, arr, clamp_radius):
    family = model.family
    if family == MIXED:
        eps = model.params["epsilon"]
        comp_a = model.params["component_a"]
        comp_b = model.params["component_b"]
        if eps == 1.0:
            return _log_density_batch(comp_a, arr, clamp_radius)
        if eps == 0.0:
            return _log_density_batch(comp_b, arr, clamp_radius)
        la = math.log(eps) + _log_density_batch(comp_a, arr, clamp_radius)
        lb = math.log(1.0 - eps) + _log_density_batch(comp_b, arr, clamp_radius)
        return np.logaddexp(la, lb)
    if family == SUPER_GAUSSIAN:
        diff = arr - model.location[:, None]
        r = np.linalg.norm(diff, axis=0)
        if clamp_radius is not None:
            r = np.maximum(r, clamp_radius)
        g, _, _ = RADIAL_PROFILES[model.params.get("profile", "norm")](
            np.maximum(r, np.finfo(float).tiny)
        )
        return -g

    _, q = _quad_form(model, arr)
    const = _log_norm_const(model)
    if family == GAUSSIAN:
        return const - 0.5 * q
    if family == LAPLACE:
        return const - np.sqrt(q)
    if family == STUDENT_T:
        nu = model.params["nu"]
        return const - 0.5 * (nu + model.dim) * np.log1p(q / nu)
    if family == KOTZ:
        beta, eta, lam = (
            model.params["beta"],
            model.params["eta"],
            model.params["lam"],
        )
        if eta != 1.0 and np.any(q == 0.0):
            if eta < 1.0 and clamp_radius is None:
                raise SingularityError(
                    "kotz log density diverges at the location for eta < 1"
                )
            q = np.maximum(q, (clamp_radius or np.finfo(float).tiny) ** 2)
        with np.errstate(divide="ignore"):
            kernel = (eta - 1.0) * np.log(q) - lam * q**beta
        return const + kernel
    if family == MGGD:
        alpha, beta = model.params["alpha"], model.params["beta"]
        return const - (q / alpha) ** beta
    raise ParameterError(f"unhandled family {family!r}")


def score(model: DensityModel, y, clamp_radius: float | None = None):
    """Multivariate score ``phi(y) = -d log p / dy``.

    Returns a K-vector for vector input, (K, n) for a batch.  Families whose
    score diverges at the location raise SingularityError on an exact hit
    unless ``clamp_radius`` substitutes a floored radius.
    """
    arr, single = _prepare(model, y)
    out = _score_batch(model, arr, clamp_radius)
    return out[:, 0] if single else out


def _score_batch(model, arr, clamp_radius):
    family = model.family
    if family == MIXED:
        phi, _, _ = _mixture_parts(model, arr, clamp_radius)
        return phi
    if family == SUPER_GAUSSIAN:
        diff = arr - model.location[:, None]
        r = np.linalg.norm(diff, axis=0)
        profile = model.params.get("profile", "norm")
        if profile in ("norm", "sqrt"):
            if clamp_radius is None:
                if np.any(r == 0.0):
                    raise SingularityError(
                        "radial score is singular at the location; clamp the radius"
                    )
            else:
                r = np.maximum(r, clamp_radius)
        r_safe = np.maximum(r, np.finfo(float).tiny)
        _, g1, _ = RADIAL_PROFILES[profile](r_safe)
        return diff * (g1 / r_safe)

    u, q = _quad_form(model, arr)
    a, _ = _radial_weight(model, q, clamp_radius)
    return u * a


def _mixture_parts(model, arr, clamp_radius):
    """Score, posterior weight of component a, and per-component scores."""
    eps = model.params["epsilon"]
    comp_a = model.params["component_a"]
    comp_b = model.params["component_b"]
    if eps == 1.0:
        phi = _score_batch(comp_a, arr, clamp_radius)
        return phi, np.ones(arr.shape[1]), (phi, np.zeros_like(phi))
    if eps == 0.0:
        phi = _score_batch(comp_b, arr, clamp_radius)
        return phi, np.zeros(arr.shape[1]), (np.zeros_like(phi), phi)
    la = math.log(eps) + _log_density_batch(comp_a, arr, clamp_radius)
    lb = math.log(1.0 - eps) + _log_density_batch(comp_b, arr, clamp_radius)
    total = np.logaddexp(la, lb)
    w_a = np.exp(la - total)
    phi_a = _score_batch(comp_a, arr, clamp_radius)
    phi_b = _score_batch(comp_b, arr, clamp_radius)
    phi = w_a * phi_a + (1.0 - w_a) * phi_b
    return phi, w_a, (phi_a, phi_b)


def score_jacobian(model: DensityModel, y, clamp_radius: float | None = None):
    """Jacobian ``d phi / d y^T`` (the Hessian of ``-log p``), symmetric.

    Returns (K, K) for vector input, (K, K, n) for a batch.
    """
    arr, single = _prepare(model, y)
    out = _score_jacobian_batch(model, arr, clamp_radius)
    return out[:, :, 0] if single else out


def _score_jacobian_batch(model, arr, clamp_radius):
    family = model.family
    if family == MIXED:
        phi, w_a, (phi_a, phi_b) = _mixture_parts(model, arr, clamp_radius)
        comp_a = model.params["component_a"]
        comp_b = model.params["component_b"]
        jac_a = _score_jacobian_batch(comp_a, arr, clamp_radius)
        jac_b = _score_jacobian_batch(comp_b, arr, clamp_radius)
        w_b = 1.0 - w_a
        jac = w_a * jac_a + w_b * jac_b
        jac -= w_a * np.einsum("kn,ln->kln", phi_a, phi_a)
        jac -= w_b * np.einsum("kn,ln->kln", phi_b, phi_b)
        jac += np.einsum("kn,ln->kln", phi, phi)
        return jac
    if family == SUPER_GAUSSIAN:
        diff = arr - model.location[:, None]
        r = np.linalg.norm(diff, axis=0)
        profile = model.params.get("profile", "norm")
        if profile in ("norm", "sqrt"):
            if clamp_radius is None:
                if np.any(r == 0.0):
                    raise SingularityError(
                        "radial score is singular at the location; clamp the radius"
                    )
            else:
                r = np.maximum(r, clamp_radius)
        r_safe = np.maximum(r, np.finfo(float).tiny)
        _, g1, g2 = RADIAL_PROFILES[profile](r_safe)
        eye = np.eye(model.dim)[:, :, None]
        outer = np.einsum("kn,ln->kln", diff, diff)
        return (g1 / r_safe) * eye + (g2 / r_safe**2 - g1 / r_safe**3) * outer

    u, q = _quad_form(model, arr)
    a, da = _radial_weight(model, q, clamp_radius)
    jac = a * model.scatter_inv[:, :, None]
    jac = jac + 2.0 * da * np.einsum("kn,ln->kln", u, u)
    return jac


# ---------------------------------------------------------------------------
# FastIVA nonlinearities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FastIvaNonlinearity:
    """One of the fixed-point contrast functions G(u), u > 0.

    ``g1``: log(u); ``g2``: sqrt(u); ``g3``: sqrt(2/K) sqrt(u) + (K - 1/2) log(u),
    which needs the ambient dataset count ``k_count``; ``g4``: cbrt(u).
    """

    choice: str
    k_count: int | None = None

    def __post_init__(self):
        if self.choice not in ("g1", "g2", "g3", "g4"):
            raise ParameterError(f"unknown nonlinearity {self.choice!r}")
        if self.choice == "g3" and (self.k_count is None or self.k_count < 1):
            raise ParameterError("g3 requires the ambient dataset count k_count")


def nonlinearity_eval(g: FastIvaNonlinearity, u):
    """Value and first two derivatives of G at u > 0.

    Returns three scalars for scalar input, three arrays for array input.
    """
    arr = np.asarray(u, dtype=np.float64)
    single = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if np.any(arr <= 0.0):
        raise ParameterError("nonlinearity domain is u > 0")
    if g.choice == "g1":
        val, d1, d2 = np.log(arr), 1.0 / arr, -1.0 / arr**2
    elif g.choice == "g2":
        root = np.sqrt(arr)
        val, d1, d2 = root, 0.5 / root, -0.25 * arr ** (-1.5)
    elif g.choice == "g3":
        c = math.sqrt(2.0 / g.k_count)
        m = g.k_count - 0.5
        root = np.sqrt(arr)
        val = c * root + m * np.log(arr)
        d1 = 0.5 * c / root + m / arr
        d2 = -0.25 * c * arr ** (-1.5) - m / arr**2
    else:  # g4
        val = np.cbrt(arr)
        d1 = val / (3.0 * arr)
        d2 = -2.0 * val / (9.0 * arr**2)
    if single:
        return float(val[0]), float(d1[0]), float(d2[0])
    return val, d1, d2


# ---------------------------------------------------------------------------
# scatter estimation
# ---------------------------------------------------------------------------

def estimate_scatter(scv_samples, ridge: float = 0.0) -> np.ndarray:
    """Sample covariance of a (K, n) SCV block, optionally ridge-stabilized.

    The ridge adds ``ridge * trace(S) / K`` to the diagonal, which keeps the
    result positive definite for any ``ridge > 0``.

    Raises
    ------
    RankDeficiencyError
        If n <= K and no ridge is requested (the plain estimate cannot have
        full rank).
    """
    y = np.asarray(scv_samples, dtype=np.float64)
    if y.ndim != 2:
        raise ParameterError(f"expected a (K, n) block, got shape {y.shape}")
    k, n = y.shape
    if ridge < 0.0:
        raise ParameterError("ridge must be nonnegative")
    if n <= k and ridge == 0.0:
        raise RankDeficiencyError(
            f"covariance of {k} components from {n} samples is rank deficient; "
            "use a positive ridge"
        )
    centered = y - y.mean(axis=1, keepdims=True)
    cov = centered @ centered.T / n
    if ridge > 0.0:
        cov = cov + (ridge * np.trace(cov) / k) * np.eye(k)
    return cov
