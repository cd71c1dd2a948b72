"""The core estimator: cross-fitted pseudo outcomes and the penalized fit.

Pipeline, in order:

1. ``split``: one random balanced 2-fold partition of the rows.
2. ``crossfit_outcome``: each row's outcome prediction comes from the model
   trained on the *other* fold's complete cases, so no row's own outcome
   leaks into its prediction. The propensity model is fit once on all rows
   (no splitting needed there, since it never sees Y).
3. ``pseudo_outcomes``: ytil_i = mtil_i + (t_i / pihat_i) * (y_i - mtil_i).
   Rows with t = 0 get exactly mtil_i.
4. ``fit_ddr``: an L1-penalized fit of the pseudo outcomes on the basis
   features. The pseudo empirical loss has the same gradient as the full
   doubly-robust empirical loss, so minimizing it solves the original
   problem while looking like a plain penalized regression.

``gradient_decomposition`` and ``deviation_diagnostic`` are simulation-side
diagnostics: the first splits the estimating-equation gradient into a
leading term plus the three nuisance-error terms (they vanish exactly under
true nuisances), the second checks the deterministic deviation bounds
||theta_hat - theta_0||_2 <= 3 sqrt(s) lambda / kappa and
||.||_1 <= 12 s lambda / kappa that hold whenever
lambda >= 2 ||grad at theta_0||_inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from . import solvers
from .dataset import ObservedDataset
from .nuisance import BasisSpec, CvRule, LambdaRule, OutcomeSpec, PropensityModel, expand_matrix, select_lambda
from .numkit import RngStream


class InsufficientCompleteCases(Exception):
    def __init__(self, fold: int, count: int):
        self.fold = fold
        super().__init__(f"fold {fold} has only {count} complete case(s)")


@dataclass(frozen=True)
class CrossFitPlan:
    """Assignment of each row to fold 1 or 2; sizes differ by at most one."""

    fold_of: np.ndarray
    rng: RngStream

    def rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def swapped(self) -> "CrossFitPlan":
        return CrossFitPlan(np.where(self.fold_of == 1, 2, 1).astype(np.int8), self.rng)


@dataclass(frozen=True)
class NuisancePredictions:
    """Per-row pi-hat (unsplit) and cross-fitted m-tilde."""

    pi_hat: np.ndarray
    m_tilde: np.ndarray
    plan: CrossFitPlan

    def __post_init__(self):
        if np.any(self.pi_hat <= 0) or np.any(self.pi_hat > 1):
            raise ValueError("pi_hat must lie in (0, 1]")
        if not np.all(np.isfinite(self.m_tilde)):
            raise ValueError("m_tilde must be finite")


@dataclass(frozen=True)
class PseudoOutcomes:
    y_tilde: np.ndarray


def split(n: int, rng: RngStream) -> CrossFitPlan:
    """Uniformly random balanced 2-fold partition, deterministic per stream."""
    if n < 2:
        raise ValueError("need n >= 2 to split")
    perm = rng.generator().permutation(n)
    fold_of = np.full(n, 2, dtype=np.int8)
    fold_of[perm[: (n + 1) // 2]] = 1
    return CrossFitPlan(fold_of, rng)


def crossfit_outcome(
    data: ObservedDataset,
    plan: CrossFitPlan,
    spec: OutcomeSpec,
    rng: Optional[RngStream] = None,
) -> np.ndarray:
    """Cross-fitted outcome predictions m-tilde at every training row."""
    if rng is None:
        rng = plan.rng.substream("crossfit")
    m_tilde = np.empty(data.n)
    for fold in (1, 2):
        train_rows = plan.rows(3 - fold)
        eval_rows = plan.rows(fold)
        train = data.subset(train_rows)
        n_cc = train.complete_cases().size
        if n_cc < 2:
            raise InsufficientCompleteCases(3 - fold, n_cc)
        model = spec.fit(train, rng.substream("fold", 3 - fold))
        m_tilde[eval_rows] = model.predict(data.x[eval_rows])
    return m_tilde


def build_predictions(
    data: ObservedDataset,
    plan: CrossFitPlan,
    pi_model: PropensityModel,
    outcome_spec: OutcomeSpec,
    rng: Optional[RngStream] = None,
) -> NuisancePredictions:
    pi_hat = pi_model.predict(data.x)
    m_tilde = crossfit_outcome(data, plan, outcome_spec, rng)
    return NuisancePredictions(pi_hat, m_tilde, plan)


def pseudo_outcomes(data: ObservedDataset, preds: NuisancePredictions) -> PseudoOutcomes:
    """ytil = mtil + (t / pihat) (y - mtil); rows with t=0 get mtil exactly."""
    y_tilde = preds.m_tilde.copy()
    cc = data.complete_cases()
    y_tilde[cc] += (data.y[cc] - preds.m_tilde[cc]) / preds.pi_hat[cc]
    return PseudoOutcomes(y_tilde)


def pseudo_problem(
    data: ObservedDataset,
    preds: NuisancePredictions,
    basis: BasisSpec,
    loss: str = "squared",
) -> solvers.DesignProblem:
    """The penalized regression instance on (ytil, Psi(X))."""
    features = expand_matrix(data.x, basis)
    y_tilde = pseudo_outcomes(data, preds).y_tilde
    return solvers.DesignProblem(
        features, y_tilde, loss=loss, penalize_intercept=not basis.include_intercept
    )


def fit_ddr(
    data: ObservedDataset,
    preds: NuisancePredictions,
    loss: str = "squared",
    basis: BasisSpec = BasisSpec.linear(),
    rule: LambdaRule = CvRule(),
    rng: RngStream = RngStream(0),
) -> solvers.SparseFit:
    """L1-regularized fit of the pseudo outcomes on the basis features.

    Lambda comes from 10-fold CV of the pseudo loss by default; the nuisance
    predictions stay fixed across CV folds (they are not re-fit per fold).
    """
    problem = pseudo_problem(data, preds, basis, loss)
    lam = select_lambda(problem, rule, rng)
    if loss == "squared":
        return solvers.fit_lasso(problem, lam)
    return solvers.fit_logistic_lasso(problem, lam)


@dataclass
class DdrResult:
    fit: solvers.SparseFit
    preds: NuisancePredictions


def ddr_estimate(
    data: ObservedDataset,
    pi_model: PropensityModel,
    outcome_spec: OutcomeSpec,
    basis: BasisSpec = BasisSpec.linear(),
    loss: str = "squared",
    rule: LambdaRule = CvRule(),
    rng: RngStream = RngStream(0),
    repeats: int = 1,
) -> DdrResult:
    """Split + cross-fit + pseudo outcomes + penalized fit, end to end.

    ``repeats > 1`` redoes the random split that many times and averages the
    coefficient vectors, which averages out the (minor) split randomness.
    The returned predictions are those of the first split; inference should
    use repeats=1.
    """
    fits = []
    first_preds = None
    for r in range(repeats):
        sub = rng.substream("repeat", r)
        plan = split(data.n, sub.substream("split"))
        preds = build_predictions(data, plan, pi_model, outcome_spec, sub.substream("m"))
        fit = fit_ddr(data, preds, loss, basis, rule, sub.substream("cv"))
        fits.append(fit)
        if first_preds is None:
            first_preds = preds
    if repeats == 1:
        return DdrResult(fits[0], first_preds)
    coef = np.mean([f.coefficients for f in fits], axis=0)
    pooled = solvers.SparseFit(
        coef,
        float(np.mean([f.lam for f in fits])),
        sum(f.iterations for f in fits),
        all(f.converged for f in fits),
        float(np.mean([f.objective for f in fits])),
    )
    return DdrResult(pooled, first_preds)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def ddr_empirical_loss(
    data: ObservedDataset,
    preds: NuisancePredictions,
    theta: np.ndarray,
    basis: BasisSpec,
    loss: str = "squared",
) -> float:
    """The doubly-robust empirical loss, up to terms free of theta.

    (1/n) sum_i phi_tilde(X_i, theta)
      + (1/n) sum_i (t_i / pihat_i) { l(y_i, v_i) - phi_tilde(X_i, theta) },

    where phi_tilde(X, theta) = l(mtil(X), v) plus theta-free terms that are
    dropped here (they cannot affect gradients, which is all the estimator
    and its diagnostics ever use).
    """
    features = expand_matrix(data.x, basis)
    v = features @ theta

    def pointwise(u, vv):
        if loss == "squared":
            return (u - vv) ** 2
        return -u * vv + np.logaddexp(0.0, vv)

    phi = pointwise(preds.m_tilde, v)
    total = phi.sum()
    cc = data.complete_cases()
    total += np.sum((pointwise(data.y[cc], v[cc]) - phi[cc]) / preds.pi_hat[cc])
    return float(total) / data.n


def pseudo_gradient(
    data: ObservedDataset,
    preds: NuisancePredictions,
    theta: np.ndarray,
    basis: BasisSpec,
    loss: str = "squared",
) -> np.ndarray:
    """Analytic gradient of the pseudo loss (== gradient of the DDR loss)."""
    features = expand_matrix(data.x, basis)
    y_tilde = pseudo_outcomes(data, preds).y_tilde
    n = data.n
    if loss == "squared":
        return -(2.0 / n) * (features.T @ (y_tilde - features @ theta))
    return (1.0 / n) * (features.T @ (expit(features @ theta) - y_tilde))


@dataclass
class GradientDecomposition:
    """The four sample-average terms; total() is the pseudo-loss gradient."""

    t0: np.ndarray
    tpi: np.ndarray
    tm: np.ndarray
    rpim: np.ndarray

    def total(self) -> np.ndarray:
        return self.t0 + self.tpi - self.tm - self.rpim


def gradient_decomposition(
    data: ObservedDataset,
    preds: NuisancePredictions,
    true_pi: Callable[[np.ndarray], np.ndarray],
    true_m: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    basis: BasisSpec = BasisSpec.linear(),
) -> GradientDecomposition:
    """Split the squared-loss gradient into leading and nuisance-error terms.

    Requires the true nuisances, so this is a simulation-only diagnostic.
    With pihat == pi and mtil == m pointwise, the three error terms are
    exactly zero and the leading term is the whole gradient.
    """
    features = expand_matrix(data.x, basis)  # h(X) = -2 Psi(X)
    n = data.n
    m_true = np.asarray(true_m(data.x), dtype=float)
    pi_true = np.asarray(true_pi(data.x), dtype=float)

    cc = data.complete_cases()
    # t/pi (y - m) and (t/pihat - t/pi)(y - m), nonzero only on complete cases
    lead_resid = np.zeros(n)
    lead_resid[cc] = (data.y[cc] - m_true[cc]) / pi_true[cc]
    pi_err_resid = np.zeros(n)
    pi_err_resid[cc] = (data.y[cc] - m_true[cc]) * (
        1.0 / preds.pi_hat[cc] - 1.0 / pi_true[cc]
    )

    t_over_pi = np.zeros(n)
    t_over_pi[cc] = 1.0 / pi_true[cc]
    t_over_pihat = np.zeros(n)
    t_over_pihat[cc] = 1.0 / preds.pi_hat[cc]
    m_err = preds.m_tilde - m_true

    def avg(vec):
        return -(2.0 / n) * (features.T @ vec)

    t0 = avg((m_true - features @ theta) + lead_resid)
    tpi = avg(pi_err_resid)
    tm = avg((t_over_pi - 1.0) * m_err)
    rpim = avg((t_over_pihat - t_over_pi) * m_err)
    return GradientDecomposition(t0, tpi, tm, rpim)


@dataclass
class DeviationReport:
    """Outcome of the deterministic deviation-bound check."""

    lam: float
    grad_inf_norm: float
    lambda_ok: bool
    sparsity: int
    l2_error: float
    l2_bound: float
    l2_ok: bool
    l2_slack: float
    l1_error: float
    l1_bound: float
    l1_ok: bool
    l1_slack: float


def deviation_diagnostic(
    fit: solvers.SparseFit,
    theta0: np.ndarray,
    grad_inf_norm: float,
    kappa: float,
) -> DeviationReport:
    """Check the deviation bounds at the fitted lambda.

    The bounds are only guaranteed when lambda >= 2 * grad_inf_norm
    (``lambda_ok``); when that flag is false the bound columns are still
    reported but carry no guarantee.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    theta0 = np.asarray(theta0, dtype=float)
    s = int(np.count_nonzero(theta0))
    diff = fit.coefficients - theta0
    l2_error = float(np.linalg.norm(diff))
    l1_error = float(np.sum(np.abs(diff)))
    l2_bound = 3.0 * math.sqrt(s) * fit.lam / kappa
    l1_bound = 12.0 * s * fit.lam / kappa
    return DeviationReport(
        lam=fit.lam,
        grad_inf_norm=float(grad_inf_norm),
        lambda_ok=fit.lam >= 2.0 * grad_inf_norm,
        sparsity=s,
        l2_error=l2_error,
        l2_bound=l2_bound,
        l2_ok=l2_error <= l2_bound,
        l2_slack=l2_bound - l2_error,
        l1_error=l1_error,
        l1_bound=l1_bound,
        l1_ok=l1_error <= l1_bound,
        l1_slack=l1_bound - l1_error,
    )
