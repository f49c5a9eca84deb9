"""Latent-variable mediation analysis robust to unmeasured
mediator-outcome confounding.

Estimation is two-stage: a confirmatory factor model turns indicator
panels into factor scores with a known score-error covariance, and the
structural effects are then solved from error-corrected moment
conditions, either with randomization-based weights (robust to
unmeasured mediator-outcome confounders) or as corrected least squares
(the confounding-sensitive baseline).  A simulation generator and a
Monte Carlo harness reproduce the accompanying robustness and power
studies at desk scale.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, LatmedError, NumericalError, RankDeficiencyError
from .harness import (
    CellResult,
    MCSummary,
    RepRecord,
    aggregate_records,
    histogram_bins,
    run_cell,
    run_grid,
)
from .inference import BootstrapResult, WaldTest, bootstrap, wald_test
from .measurement import (
    CanonicalData,
    FactorScorePanel,
    MeasurementEstimate,
    MeasurementPattern,
    canonicalize,
    compute_H,
    factor_score_error_cov,
    factor_scores,
    fit_cfa,
    fit_cfa_moments,
)
from .model import FactorSpec, ModelSpec, load_model_spec, model_spec_from_dict, save_model_spec
from .pipeline import METHODS, FitResult, fit_pipeline
from .simgen import (
    GeneratedDataset,
    StudyCondition,
    default_model_spec,
    generate,
    solve_residual_variances,
    study1_grid,
    study2_grid,
)
from .structural import (
    CORRECTED_REGRESSION,
    G_ESTIMATION,
    MediatorEstimate,
    ModifiedMoments,
    MomentPair,
    RankCheck,
    StructuralEstimate,
    build_A0,
    build_A1,
    corrected_regression,
    fit_mediator,
    g_estimate,
    g_estimation,
    mediator_weight,
    modified_moments,
    treatment_weight,
)

__all__ = [name for name in dir() if not name.startswith("_")]
