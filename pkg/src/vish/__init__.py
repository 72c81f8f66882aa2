"""Variational GPs with spherical-harmonic inducing features."""

from .errors import (
    ConditioningError,
    ConstructionError,
    DataFormatError,
    DegenerateFeatureError,
    DiagnosticsError,
    InvalidArgumentError,
    NumericalConsistencyError,
    NumericalError,
    TargetTypeError,
    UnsupportedDimensionError,
    VishError,
)
from .harmonics import HarmonicBasis, HarmonicLevel, build_basis, build_level, eval_basis, eval_level, num_harmonics
from .kernels import KernelSpec, ZonalSpectrum, build_spectrum, kernel_eval_truncated
from .sphere_map import SphereMapping, project, project_batch
from .svgp import (
    InducingBasis,
    Likelihood,
    VariationalState,
    VishModel,
    build_model,
    collapsed_gaussian_fit,
    elbo_stochastic,
    features,
    kl_qu_pu,
    kuu_diag,
    predict_f,
    predict_y,
)
from .train import FitTrace, TrainConfig, auc, exact_gpr_truncated, finite_diff_check, fit, mse, nlpd_bernoulli, nlpd_gaussian
