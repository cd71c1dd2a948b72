"""Working models for the propensity score and the outcome regression.

The propensity pi(x) = P(T=1 | X=x) is fit on all n rows of (T, X) without
any sample splitting, as a penalized logistic regression over a polynomial
basis, and every prediction is clamped into the truncation interval so that
inverse weights stay bounded. The outcome mean m(x) = E[Y | X=x] is fit on
complete cases only, either as a penalized linear regression over a basis or
as a single-index model: an inverse-probability-weighted lasso gives the
index direction, and a one-dimensional kernel smoother over the estimated
scores gives the link.

Masked outcomes are never read: every fitting path goes through
``ObservedDataset.complete_cases()`` first, and the test suite poisons
masked entries with NaN to enforce it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import solvers
from .dataset import ObservedDataset
from .kernel import (
    DegenerateScores,
    KernelSmoother,
    bandwidth_lscv,
    bandwidth_rot,
    lscv_grid,
    smooth_many,
)
from .numkit import RngStream


class DegenerateTreatment(Exception):
    """T is constant; the propensity model cannot be fit."""


class InsufficientData(Exception):
    """Too few complete cases for the requested outcome model."""


class DegenerateIndex(Exception):
    """The estimated single-index direction is identically zero."""


# ---------------------------------------------------------------------------
# basis expansion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial basis {1, x_j^k : j <= p, k <= degree}, pure powers only."""

    kind: str = "linear"
    degree: int = 1
    include_intercept: bool = True

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic", "polynomial"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        expected = {"linear": 1, "quadratic": 2}.get(self.kind)
        if expected is not None and self.degree != expected:
            object.__setattr__(self, "degree", expected)
        if self.degree < 1:
            raise ValueError("degree must be >= 1")

    @staticmethod
    def linear(include_intercept: bool = True) -> "BasisSpec":
        return BasisSpec("linear", 1, include_intercept)

    @staticmethod
    def quadratic(include_intercept: bool = True) -> "BasisSpec":
        return BasisSpec("quadratic", 2, include_intercept)

    @staticmethod
    def polynomial(degree: int, include_intercept: bool = True) -> "BasisSpec":
        return BasisSpec("polynomial", degree, include_intercept)

    def feature_count(self, p: int) -> int:
        return int(self.include_intercept) + p * self.degree


def expand_matrix(x: np.ndarray, spec: BasisSpec) -> np.ndarray:
    """Feature matrix [1, X, X^2, ..., X^degree] in fixed column order."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    blocks = []
    if spec.include_intercept:
        blocks.append(np.ones((x.shape[0], 1)))
    for k in range(1, spec.degree + 1):
        blocks.append(x**k)
    return np.hstack(blocks)


def expand_basis(x: np.ndarray, spec: BasisSpec) -> np.ndarray:
    """Feature row for a single covariate vector."""
    return expand_matrix(np.asarray(x, dtype=float)[None, :], spec)[0]


# ---------------------------------------------------------------------------
# lambda selection rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CvRule:
    """K-fold CV of the held-out loss over a geometric lambda path.

    The path floor sits well below where CV lands on these problems
    (selected lambda is typically 2-5% of lambda_max) without paying for
    near-interpolating fits at the deep end.
    """

    folds: int = 10
    n_lambdas: int = 30
    ratio: float = 5e-3


@dataclass(frozen=True)
class BicRule:
    """BIC over the path: 2n * loss(theta_hat) + ||theta_hat||_0 * log n.

    BIC's df penalty selects larger lambdas than CV, so its path can stop
    higher.
    """

    n_lambdas: int = 30
    ratio: float = 1e-2


@dataclass(frozen=True)
class FixedLambda:
    lam: float = 0.0


LambdaRule = Union[CvRule, BicRule, FixedLambda]


def select_lambda(problem: solvers.DesignProblem, rule: LambdaRule, rng: RngStream) -> float:
    if isinstance(rule, FixedLambda):
        return float(rule.lam)
    path = solvers.lambda_path(problem, rule.n_lambdas, rule.ratio)
    if np.all(path == 0):
        return 0.0
    if isinstance(rule, CvRule):
        return solvers.cross_validate_lambda(problem, rule.folds, path, rng).lam
    # BIC: fit the whole path warm-started, score each fit. Ties go to the
    # largest lambda, consistent with the CV tie-break.
    n = problem.n
    fits = solvers.fit_path(problem, path)
    best_lam, best_bic = float(path[0]), np.inf
    for lam, fit in zip(path, fits):
        df = int(np.count_nonzero(fit.coefficients))
        bic = 2.0 * n * solvers.empirical_loss(problem, fit.coefficients) + df * np.log(n)
        if bic < best_bic:
            best_bic, best_lam = bic, float(lam)
    return best_lam


# ---------------------------------------------------------------------------
# propensity models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PropensityModel:
    """pi-hat with predictions always clamped into [lo, hi] (0 < lo)."""

    kind: str  # "logistic" | "mcar" | "known"
    trunc: tuple[float, float] = (0.1, 0.9)
    coefficients: Optional[np.ndarray] = None
    basis: Optional[BasisSpec] = None
    rate: Optional[float] = None
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lam: Optional[float] = None

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo, hi = self.trunc
        if self.kind == "known":
            raw = np.asarray(self.func(x), dtype=float)
        elif self.kind == "mcar":
            raw = np.full(x.shape[0], self.rate)
        else:
            from scipy.special import expit

            raw = expit(expand_matrix(x, self.basis) @ self.coefficients)
        return np.clip(raw, lo, hi)

    @staticmethod
    def from_function(func, trunc=(0.1, 0.9)) -> "PropensityModel":
        return PropensityModel(kind="known", trunc=trunc, func=func)


def fit_propensity(
    data: ObservedDataset,
    spec: Optional[BasisSpec] = None,
    trunc: tuple[float, float] = (0.1, 0.9),
    rule: LambdaRule = BicRule(),
    rng: RngStream = RngStream(0),
    kind: str = "logistic",
) -> PropensityModel:
    """Fit pi-hat on all n rows of (T, X); no sample splitting.

    ``kind="logistic"`` runs an L1-penalized logistic regression of T on the
    basis features with lambda chosen by ``rule`` (BIC by default).
    ``kind="mcar"`` just takes the sample mean of T.
    """
    lo, hi = trunc
    if not (0 < lo < hi < 1):
        raise ValueError("truncation bounds must satisfy 0 < lo < hi < 1")
    t = data.t.astype(float)
    if t.min() == t.max():
        raise DegenerateTreatment("T is constant across the dataset")

    if kind == "mcar":
        return PropensityModel(kind="mcar", trunc=trunc, rate=float(t.mean()))
    if kind != "logistic":
        raise ValueError(f"unknown propensity kind {kind!r}")
    if spec is None:
        spec = BasisSpec.linear()

    features = expand_matrix(data.x, spec)
    problem = solvers.DesignProblem(
        features, t, loss="logistic", penalize_intercept=not spec.include_intercept
    )
    lam = select_lambda(problem, rule, rng)
    fit = solvers.fit_logistic_lasso(problem, lam)
    return PropensityModel(
        kind="logistic", trunc=trunc, coefficients=fit.coefficients,
        basis=spec, lam=lam,
    )


# ---------------------------------------------------------------------------
# outcome models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutcomeModel:
    """m-hat; one of a known function, a basis lasso, or a single-index fit."""

    kind: str  # "known" | "lasso" | "sim"
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None
    coefficients: Optional[np.ndarray] = None
    basis: Optional[BasisSpec] = None
    gamma: Optional[np.ndarray] = None
    smoother: Optional[KernelSmoother] = None
    constant: Optional[float] = None
    degenerate: bool = False
    lam: Optional[float] = None

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "known":
            return np.asarray(self.func(x), dtype=float)
        if self.kind == "lasso":
            return expand_matrix(x, self.basis) @ self.coefficients
        if self.degenerate:
            return np.full(x.shape[0], self.constant)
        values, _ = smooth_many(self.smoother, x @ self.gamma)
        return values

    @staticmethod
    def from_function(func) -> "OutcomeModel":
        return OutcomeModel(kind="known", func=func)


def fit_outcome_parametric(
    data: ObservedDataset,
    spec: BasisSpec,
    rule: LambdaRule = CvRule(),
    rng: RngStream = RngStream(0),
) -> OutcomeModel:
    """Identity-link penalized regression of Y on the basis, complete cases only."""
    cc = data.complete_cases()
    if cc.size < 2:
        raise InsufficientData(f"need >= 2 complete cases, have {cc.size}")
    features = expand_matrix(data.x[cc], spec)
    problem = solvers.DesignProblem(
        features, data.y[cc], penalize_intercept=not spec.include_intercept
    )
    lam = select_lambda(problem, rule, rng)
    fit = solvers.fit_lasso(problem, lam)
    return OutcomeModel(kind="lasso", coefficients=fit.coefficients, basis=spec, lam=lam)


def fit_outcome_sim(
    data: ObservedDataset,
    pi_model: PropensityModel,
    bandwidth: Union[str, float] = "rot",
    rule: LambdaRule = CvRule(),
    rng: RngStream = RngStream(0),
    weighted: bool = True,
) -> OutcomeModel:
    """Single-index outcome model on complete cases.

    Index direction from a lasso of Y on X with weights 1 / pi-hat(X)
    (``weighted=False`` drops the weighting; the weighted version is the one
    backed by theory under elliptically symmetric designs). Link estimated
    by ratio-form kernel smoothing of Y over the index scores. A zero index
    falls back to the complete-case mean with ``degenerate=True``.
    """
    cc = data.complete_cases()
    if cc.size < 10:
        raise InsufficientData(f"need >= 10 complete cases, have {cc.size}")
    x_cc = data.x[cc]
    y_cc = data.y[cc]
    weights = 1.0 / pi_model.predict(x_cc) if weighted else None

    design = np.hstack([np.ones((cc.size, 1)), x_cc])
    problem = solvers.DesignProblem(design, y_cc, weights=weights)
    lam = select_lambda(problem, rule, rng)
    fit = solvers.fit_lasso(problem, lam)
    gamma = fit.coefficients[1:]

    if not np.any(gamma):
        return OutcomeModel(
            kind="sim", gamma=gamma, constant=float(np.mean(y_cc)),
            degenerate=True, lam=lam,
        )

    scores = x_cc @ gamma
    try:
        if bandwidth == "rot":
            h = bandwidth_rot(scores)
        elif bandwidth == "lscv":
            h = bandwidth_lscv(scores, y_cc, lscv_grid(scores))
        else:
            h = float(bandwidth)
    except DegenerateScores:
        return OutcomeModel(
            kind="sim", gamma=gamma, constant=float(np.mean(y_cc)),
            degenerate=True, lam=lam,
        )
    smoother = KernelSmoother(scores, y_cc, h)
    return OutcomeModel(kind="sim", gamma=gamma, smoother=smoother, lam=lam)


# ---------------------------------------------------------------------------
# named fitter specs, so cross-fitting and the harness can ask for a model
# by what it is rather than by closure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutcomeSpec:
    """Recipe for an outcome model fit; callable on any data subset.

    ``kind``: "linear" or "quad" (basis lasso) or "sim" (needs ``pi_model``).
    """

    kind: str
    rule: LambdaRule = CvRule()
    pi_model: Optional[PropensityModel] = None
    bandwidth: Union[str, float] = "rot"
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def fit(self, data: ObservedDataset, rng: RngStream) -> OutcomeModel:
        if self.kind == "linear":
            return fit_outcome_parametric(data, BasisSpec.linear(), self.rule, rng)
        if self.kind == "quad":
            return fit_outcome_parametric(data, BasisSpec.quadratic(), self.rule, rng)
        if self.kind == "sim":
            if self.pi_model is None:
                raise ValueError("sim outcome spec needs a fitted propensity model")
            return fit_outcome_sim(
                data, self.pi_model, bandwidth=self.bandwidth, rule=self.rule, rng=rng
            )
        if self.kind == "known":
            return OutcomeModel.from_function(self.func)
        raise ValueError(f"unknown outcome spec kind {self.kind!r}")
