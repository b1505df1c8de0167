"""Bayesian robust CP factorization of incomplete multiway data.

Decomposes a partially observed tensor into a low-rank CP part, a sparse
per-entry outlier part and isotropic noise, with the CP rank determined
automatically, via mean-field variational inference.
"""

from .complete import expected_cp_norm_sq, expected_gram, gram_complete
from .inference import (
    FitConfig,
    FitReport,
    NumericalBreakdownError,
    VBEngine,
    default_init_rank,
    fit,
)
from .predict import PredictiveParams, impute, predictive_params
from .state import (
    ColumnPrecisionPosterior,
    EntryPrecisionPosterior,
    FactorPosterior,
    HyperPriors,
    ModelState,
    NoisePosterior,
    SparsePosterior,
    new_state,
)
from .synthetic import (
    ExperimentRow,
    SyntheticData,
    SyntheticSpec,
    fme,
    generate_synthetic,
    rrse,
    run_experiment,
)
from .tensor_ops import (
    cp_reconstruct,
    generalized_inner_product,
    hadamard_all,
    khatri_rao,
    khatri_rao_except,
    masked_frobenius_sq,
    matricize,
)

__version__ = "0.1.0"

__all__ = [
    "FitConfig",
    "FitReport",
    "NumericalBreakdownError",
    "VBEngine",
    "fit",
    "default_init_rank",
    "PredictiveParams",
    "predictive_params",
    "impute",
    "HyperPriors",
    "FactorPosterior",
    "ColumnPrecisionPosterior",
    "SparsePosterior",
    "EntryPrecisionPosterior",
    "NoisePosterior",
    "ModelState",
    "new_state",
    "SyntheticSpec",
    "SyntheticData",
    "ExperimentRow",
    "generate_synthetic",
    "rrse",
    "fme",
    "run_experiment",
    "matricize",
    "khatri_rao",
    "khatri_rao_except",
    "hadamard_all",
    "generalized_inner_product",
    "cp_reconstruct",
    "masked_frobenius_sq",
    "expected_gram",
    "gram_complete",
    "expected_cp_norm_sq",
    "__version__",
]
