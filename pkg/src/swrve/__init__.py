"""Linear mixed models with cluster-robust variance estimators for stepped-wedge trials."""
from .covariance import (
    CovStructure,
    IccPanel,
    IccSpec,
    VarianceComponents,
    build_V,
    build_Z_R,
    components_to_icc,
    icc_to_components,
)
from .datagen import Dataset, GenSpec, generate, sample_mvn_ar1
from .design import TrialDesign, build_design, design_matrix
from .inference import WaldResult, satterthwaite_dof, wald_test
from .lmm import CellData, FitOptions, FitResult, gls, reml_fit
from .permutation import PermutationResult, permutation_test
from .rve import ESTIMATORS, RobustVcov, cr0, cr1_family, cr2, cr3, robust_vcov

__version__ = "0.1.0"

__all__ = [
    "CellData",
    "CovStructure",
    "Dataset",
    "ESTIMATORS",
    "FitOptions",
    "FitResult",
    "GenSpec",
    "IccPanel",
    "IccSpec",
    "PermutationResult",
    "RobustVcov",
    "TrialDesign",
    "VarianceComponents",
    "WaldResult",
    "build_V",
    "build_Z_R",
    "build_design",
    "components_to_icc",
    "cr0",
    "cr1_family",
    "cr2",
    "cr3",
    "design_matrix",
    "generate",
    "gls",
    "icc_to_components",
    "permutation_test",
    "reml_fit",
    "robust_vcov",
    "sample_mvn_ar1",
    "satterthwaite_dof",
    "wald_test",
]
