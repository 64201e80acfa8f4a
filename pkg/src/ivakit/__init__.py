"""ivakit: joint blind source separation across multiple datasets."""

from .densities import (
    DensityModel,
    FastIvaNonlinearity,
    estimate_scatter,
    log_density,
    nonlinearity_eval,
    score,
    score_jacobian,
)
from .errors import IvakitError
from .metrics import Alignment, GainMatrices, align_to_truth, isi, joint_isi
from .model import (
    DatasetCollection,
    MixingSet,
    SourceEstimates,
    UnmixingSet,
    WhiteningTransform,
    apply_unmixing,
    center,
    compose_whitening,
    whiten,
)
from .objective import (
    CostContext,
    decoupling_vector,
    iva_cost,
    iva_g_cost,
    iva_gradient,
    natural_gradient,
    negentropy_moment_approx,
    negentropy_nonquadratic_approx,
    row_gradient,
    row_hessian,
)
from .optimizers import (
    ConvergenceReport,
    OptimizerConfig,
    convergence_criterion,
    run_auxiva,
    run_fastiva,
    run_iva_g,
    run_iva_gl,
    run_natural_gradient,
    run_newton,
)
from .simgen import (
    ScvSpec,
    check_identifiability_gaussian,
    gen_mixing,
    gen_scv_sources,
    mix,
)

__version__ = "0.1.0"

__all__ = [
    "DensityModel",
    "FastIvaNonlinearity",
    "estimate_scatter",
    "log_density",
    "nonlinearity_eval",
    "score",
    "score_jacobian",
    "IvakitError",
    "Alignment",
    "GainMatrices",
    "align_to_truth",
    "isi",
    "joint_isi",
    "DatasetCollection",
    "MixingSet",
    "SourceEstimates",
    "UnmixingSet",
    "WhiteningTransform",
    "apply_unmixing",
    "center",
    "compose_whitening",
    "whiten",
    "CostContext",
    "decoupling_vector",
    "iva_cost",
    "iva_g_cost",
    "iva_gradient",
    "natural_gradient",
    "negentropy_moment_approx",
    "negentropy_nonquadratic_approx",
    "row_gradient",
    "row_hessian",
    "ConvergenceReport",
    "OptimizerConfig",
    "convergence_criterion",
    "run_auxiva",
    "run_fastiva",
    "run_iva_g",
    "run_iva_gl",
    "run_natural_gradient",
    "run_newton",
    "ScvSpec",
    "check_identifiability_gaussian",
    "gen_mixing",
    "gen_scv_sources",
    "mix",
]
