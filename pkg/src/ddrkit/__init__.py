"""Doubly robust high-dimensional M-estimation with missing outcomes.

The package is organized bottom-up:

* ``numkit``      dense linear algebra helpers and splittable RNG streams
* ``solvers``     coordinate-descent lasso and L1 logistic regression
* ``kernel``      ratio-form kernel smoothing and bandwidth selection
* ``nuisance``    propensity and outcome-regression working models
* ``ddr``         cross-fitting, pseudo outcomes, the penalized DDR fit
* ``inference``   desparsified estimates and confidence intervals
* ``simulate``    data-generating processes and comparator estimators
* ``harness``     replicated experiments, records, summaries
* ``cli``         the ``ddrkit`` command-line tool
"""

from .dataset import ObservedDataset
from .numkit import RngStream, cholesky, gaussian_matrix, gaussian_vector
from .solvers import (
    CVResult,
    DesignProblem,
    SparseFit,
    cross_validate_lambda,
    fit_lasso,
    fit_logistic_lasso,
    lambda_path,
    soft_threshold,
)
from .kernel import KernelSmoother, bandwidth_lscv, bandwidth_rot, smooth_at
from .nuisance import (
    BasisSpec,
    OutcomeModel,
    OutcomeSpec,
    PropensityModel,
    expand_basis,
    fit_outcome_parametric,
    fit_outcome_sim,
    fit_propensity,
)
from .ddr import (
    CrossFitPlan,
    NuisancePredictions,
    PseudoOutcomes,
    build_predictions,
    crossfit_outcome,
    ddr_estimate,
    deviation_diagnostic,
    fit_ddr,
    gradient_decomposition,
    pseudo_outcomes,
    split,
)
from .inference import (
    InferenceResult,
    PrecisionEstimate,
    confidence_intervals,
    desparsify,
    precision_direct,
    precision_nodewise,
    run_inference,
    variance_estimates,
)
from .simulate import (
    DgpParams,
    DgpSpec,
    HiddenTruth,
    build_covariance,
    comparator_fits,
    compute_theta0,
    default_params,
    generate,
)
from .harness import ExperimentConfig, config_from_dict, load_config, run_experiment, summarize

__version__ = "0.1.0"
