"""Quantile regression, quantile treatment effects and their inference."""

from .core import (
    OlsFit,
    QuantileFit,
    SolverOptions,
    brute_force_fit,
    check_loss,
    fit_grid,
    fit_ols,
    fit_quantile,
)
from .data import DesignMatrix, Dataset, GdpSeries, build_design, decadal_growth, load_dataset
from .errors import (
    ConvergenceError,
    DataError,
    DensityEstimationError,
    NumericalError,
    RankDeficiencyError,
    RelevanceError,
    ResamplingError,
    ToolkitError,
)
from .inference import (
    ConfidenceBand,
    CovarianceEstimate,
    bootstrap_cov,
    confidence_band,
    covariance_iid,
    covariance_sandwich,
    estimate_density,
)
from .simulate import (
    HeightPanelDgp,
    LocationScaleDgp,
    McConfig,
    analytic_slope,
    gen_height_panel,
    gen_location_scale,
    mc_study,
)
from .treatment import (
    EmpiricalCdf,
    TreatmentResult,
    bootstrap_treatment,
    complier_cdfs,
    empirical_quantile,
    late_wald,
    lqte,
    qte,
)

__version__ = "0.1.0"
