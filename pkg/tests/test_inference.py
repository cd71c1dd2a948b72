import numpy as np
import pytest

from ddrkit.dataset import ObservedDataset
from ddrkit.ddr import NuisancePredictions, pseudo_outcomes, split
from ddrkit.inference import (
    DegenerateColumn,
    Singular,
    confidence_intervals,
    desparsify,
    normal_quantile,
    precision_direct,
    precision_nodewise,
    run_inference,
    variance_estimates,
)
from ddrkit.numkit import RngStream
from ddrkit.nuisance import BasisSpec, expand_matrix
from ddrkit.solvers import DesignProblem, SparseFit, fit_lasso


def full_data_instance(seed, n=200, p=4):
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((n, p))
    beta = np.zeros(p + 1)
    beta[0] = 1.0
    beta[1] = 2.0
    beta[3] = -1.0
    y = expand_matrix(x, BasisSpec.linear()) @ beta + 0.5 * gen.standard_normal(n)
    data = ObservedDataset(np.ones(n, dtype=int), y, x)
    plan = split(n, RngStream(seed).substream("plan"))
    preds = NuisancePredictions(np.ones(n), np.zeros(n), plan)
    return data, preds, beta


class TestPrecisionDirect:
    def test_identity(self):
        est = precision_direct(np.eye(4))
        assert np.allclose(est.omega, np.eye(4), atol=1e-14)
        assert est.identity_gap <= 1e-8

    def test_diagonal(self):
        est = precision_direct(np.diag([2.0, 4.0]))
        assert np.allclose(est.omega, np.diag([0.5, 0.25]), atol=1e-14)

    def test_rank_deficient_raises(self):
        with pytest.raises(Singular):
            precision_direct(np.array([[1.0, 1.0], [1.0, 1.0]]))

    def test_roundtrip_tolerance_on_random_gram(self):
        gen = np.random.default_rng(0)
        x = gen.standard_normal((500, 20))
        sigma = x.T @ x / 500
        est = precision_direct(sigma)
        assert np.max(np.abs(est.omega @ sigma - np.eye(20))) <= 1e-8


class TestPrecisionNodewise:
    def test_orthogonal_design_recovers_identity(self):
        gen = np.random.default_rng(1)
        n, d = 400, 8
        q, _ = np.linalg.qr(gen.standard_normal((n, d)))
        design = q * np.sqrt(n)  # exactly orthogonal, unit empirical variance
        est = precision_nodewise(design, lam_node=0.2)
        assert np.max(np.abs(est.omega - np.eye(d))) <= 1e-10
        assert np.allclose(est.residual_variances, 1.0)

    def test_exact_collinearity_degenerates(self):
        gen = np.random.default_rng(2)
        col = gen.standard_normal(50)
        design = np.column_stack([col, col])
        with pytest.raises(DegenerateColumn):
            precision_nodewise(design, lam_node=0.0)

    def test_identity_truth_monte_carlo(self):
        gen = np.random.default_rng(3)
        design = gen.standard_normal((2000, 100))
        est = precision_nodewise(design)
        assert np.max(np.abs(est.omega - np.eye(100))) <= 0.15

    def test_identity_gap_nonincreasing_in_lambda(self):
        gen = np.random.default_rng(4)
        design = gen.standard_normal((300, 12))
        lams = [0.5, 0.3, 0.15, 0.05, 0.01]
        gaps = [precision_nodewise(design, lam_node=lam).identity_gap for lam in lams]
        for a, b in zip(gaps, gaps[1:]):
            assert b <= a + 1e-10


class TestDesparsify:
    def test_ols_fit_has_zero_correction(self):
        data, preds, _ = full_data_instance(5)
        fit = fit_lasso(
            DesignProblem(expand_matrix(data.x, BasisSpec.linear()), data.y), 0.0
        )
        features = expand_matrix(data.x, BasisSpec.linear())
        omega = precision_direct(features.T @ features / data.n)
        theta_tilde = desparsify(data, preds, fit, omega)
        assert np.max(np.abs(theta_tilde - fit.coefficients)) <= 1e-6

    def test_zero_fit_gives_ols(self):
        data, preds, _ = full_data_instance(6)
        features = expand_matrix(data.x, BasisSpec.linear())
        fit = SparseFit(np.zeros(features.shape[1]), 0.0, 0, True, 0.0)
        omega = precision_direct(features.T @ features / data.n)
        theta_tilde = desparsify(data, preds, fit, omega)
        ols, *_ = np.linalg.lstsq(features, data.y, rcond=None)
        assert np.max(np.abs(theta_tilde - ols)) <= 1e-8

    def test_full_data_matches_classical_debiased_lasso(self):
        data, preds, _ = full_data_instance(7)
        features = expand_matrix(data.x, BasisSpec.linear())
        fit = fit_lasso(DesignProblem(features, data.y), 0.08)
        omega = precision_direct(features.T @ features / data.n)
        theta_tilde = desparsify(data, preds, fit, omega)
        # classical debiased lasso, written out directly
        classical = fit.coefficients + omega.omega @ (
            features.T @ (data.y - features @ fit.coefficients)
        ) / data.n
        assert np.max(np.abs(theta_tilde - classical)) <= 1e-10


class TestVariance:
    def test_matches_direct_formula(self):
        data, preds, _ = full_data_instance(8)
        features = expand_matrix(data.x, BasisSpec.linear())
        fit = fit_lasso(DesignProblem(features, data.y), 0.05)
        omega = precision_direct(features.T @ features / data.n)
        sigma = variance_estimates(data, preds, fit, omega)
        # independent re-derivation of the plug-in formula
        ytil = pseudo_outcomes(data, preds).y_tilde
        resid = ytil - features @ fit.coefficients
        expected = np.empty(features.shape[1])
        for j in range(features.shape[1]):
            gamma_j = (features * resid[:, None]) @ omega.omega[j]
            expected[j] = np.sqrt(np.mean(gamma_j**2))
        assert np.allclose(sigma, expected, atol=1e-12)

    def test_zero_residuals_give_zero_sigma(self):
        data, preds, _ = full_data_instance(9)
        features = expand_matrix(data.x, BasisSpec.linear())
        exact, *_ = np.linalg.lstsq(features, data.y, rcond=None)
        data_exact = ObservedDataset(data.t, features @ exact, data.x)
        fit = SparseFit(exact, 0.0, 0, True, 0.0)
        omega = precision_direct(features.T @ features / data.n)
        sigma = variance_estimates(data_exact, preds, fit, omega)
        assert np.max(sigma) <= 1e-10

    def test_scaling_leaves_standardized_statistic_invariant(self):
        data, preds, beta = full_data_instance(10)
        features = expand_matrix(data.x, BasisSpec.linear())
        fit = fit_lasso(DesignProblem(features, data.y), 0.05)
        omega = precision_direct(features.T @ features / data.n)
        theta_tilde = desparsify(data, preds, fit, omega)
        sigma = variance_estimates(data, preds, fit, omega)

        c = 3.0
        # scale the features by c, with the fit and precision transformed to
        # keep predictions identical
        scaled_omega = precision_direct((c * features).T @ (c * features) / data.n)
        fit_scaled = SparseFit(fit.coefficients / c, fit.lam, 0, True, 0.0)

        scaled_data = ObservedDataset(data.t, data.y, data.x)  # same rows
        feats_scaled = c * features
        ytil = pseudo_outcomes(scaled_data, preds).y_tilde
        resid = ytil - feats_scaled @ fit_scaled.coefficients
        theta_tilde_scaled = fit_scaled.coefficients + scaled_omega.omega @ (
            feats_scaled.T @ resid
        ) / data.n
        influence = (feats_scaled * resid[:, None]) @ scaled_omega.omega.T
        sigma_scaled = np.sqrt(np.mean(influence**2, axis=0))

        assert np.allclose(sigma_scaled, sigma / c, rtol=1e-8)
        stat = np.sqrt(data.n) * (theta_tilde - beta) / sigma
        stat_scaled = np.sqrt(data.n) * (theta_tilde_scaled - beta / c) / sigma_scaled
        assert np.allclose(stat, stat_scaled, rtol=1e-6)


class TestConfidenceIntervals:
    def test_normal_quantile_value(self):
        assert normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)

    def test_zero_sigma_degenerates(self):
        res = confidence_intervals(np.array([1.0]), np.array([0.0]), 100, 0.05)
        assert res.ci_lower[0] == res.ci_upper[0] == 1.0

    def test_nesting(self):
        theta = np.array([0.5, -1.0])
        sigma = np.array([1.0, 2.0])
        wide = confidence_intervals(theta, sigma, 50, 0.05)
        narrow = confidence_intervals(theta, sigma, 50, 0.10)
        assert np.all(narrow.ci_lower > wide.ci_lower)
        assert np.all(narrow.ci_upper < wide.ci_upper)

    def test_width_formula(self):
        res = confidence_intervals(np.array([0.0]), np.array([2.0]), 400, 0.05)
        width = res.ci_upper[0] - res.ci_lower[0]
        assert width == pytest.approx(2 * 1.959964 * 2.0 / 20.0, abs=1e-5)

    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            confidence_intervals(np.zeros(1), np.ones(1), 10, 1.5)


class TestRunInference:
    def test_auto_selects_direct_for_small_d(self):
        data, preds, _ = full_data_instance(11)
        features = expand_matrix(data.x, BasisSpec.linear())
        fit = fit_lasso(DesignProblem(features, data.y), 0.05)
        res = run_inference(data, preds, fit)
        assert res.precision_method == "direct-inverse"
        assert np.all(res.ci_lower <= res.theta_tilde)
        assert np.all(res.theta_tilde <= res.ci_upper)

    def test_auto_selects_nodewise_for_large_d(self):
        gen = np.random.default_rng(12)
        n, p = 60, 40
        x = gen.standard_normal((n, p))
        y = x[:, 0] + 0.3 * gen.standard_normal(n)
        data = ObservedDataset(np.ones(n, dtype=int), y, x)
        plan = split(n, RngStream(0))
        preds = NuisancePredictions(np.ones(n), np.zeros(n), plan)
        features = expand_matrix(x, BasisSpec.linear())
        fit = fit_lasso(DesignProblem(features, y), 0.1)
        res = run_inference(data, preds, fit)
        assert res.precision_method.startswith("nodewise")
