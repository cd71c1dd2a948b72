import numpy as np
import pytest

from ddrkit.numkit import RngStream
from ddrkit.simulate import (
    DgpSpec,
    build_covariance,
    comparator_fits,
    compute_theta0,
    default_params,
    generate,
    theta0_cache_path,
)
from ddrkit.dataset import ObservedDataset
from ddrkit.simulate import HiddenTruth


class TestBuildCovariance:
    def test_identity(self):
        assert np.array_equal(build_covariance("identity", 3), np.eye(3))

    def test_ar1_entries(self):
        sigma = build_covariance("ar1", 3, 0.2)
        assert sigma[0, 1] == 0.2
        assert sigma[0, 2] == pytest.approx(0.04, rel=1e-15)
        assert np.all(np.diag(sigma) == 1.0)
        assert np.array_equal(sigma, sigma.T)
        # entrywise formula check
        idx = np.arange(3)
        assert np.array_equal(sigma, 0.2 ** np.abs(idx[:, None] - idx[None, :]))

    def test_cs_entries(self):
        sigma = build_covariance("cs", 4, 0.2)
        off = sigma[~np.eye(4, dtype=bool)]
        assert np.all(off == 0.2)
        assert np.all(np.diag(sigma) == 1.0)


class TestDefaultParams:
    def test_p50_sparsities(self):
        params = default_params(DgpSpec(p=50))
        assert np.count_nonzero(params.gamma) == 10
        assert np.count_nonzero(params.alpha) == 5
        assert np.count_nonzero(params.gamma_star) == 5
        assert np.count_nonzero(params.alpha_star) == 2
        assert params.alpha[0] == pytest.approx(1 / np.sqrt(5))
        assert params.alpha0 == 0.5
        assert params.gamma0 == 1.0
        assert params.paper_exact

    def test_p500_sparsities(self):
        params = default_params(DgpSpec(p=500))
        assert np.count_nonzero(params.gamma) == 20
        assert np.count_nonzero(params.alpha) == 10
        assert np.count_nonzero(params.gamma_star) == 5
        assert np.count_nonzero(params.alpha_star) == 4
        assert params.alpha[0] == pytest.approx(1 / np.sqrt(10))
        assert params.paper_exact

    def test_other_p_flagged(self):
        params = default_params(DgpSpec(p=30))
        assert not params.paper_exact
        assert np.count_nonzero(params.gamma) == 10

    def test_sim_constants(self):
        params = default_params(DgpSpec(kind="sim-sim", p=50))
        assert params.c_t == 0.2
        assert params.c_y == pytest.approx(0.3)  # lambda_max(I) = 1
        cs = default_params(DgpSpec(kind="sim-sim", p=50, cov="cs", rho=0.2))
        # lambda_max of CS = 1 + (p - 1) rho
        assert cs.c_y == pytest.approx(0.3 / np.sqrt(1 + 49 * 0.2))


class TestGenerate:
    def test_missing_fraction_and_truncation(self):
        spec = DgpSpec(kind="linear-linear", p=50, seed=0)
        params = default_params(spec)
        data, truth = generate(spec, params, 100_000, RngStream(0, 1))
        missing = 1.0 - data.t.mean()
        assert abs(missing - 0.40) <= 0.02
        trunc_frac = np.mean(truth.pi != truth.pi_raw)
        assert abs(trunc_frac - 0.01) <= 0.01

    def test_noise_independent_of_covariates(self):
        spec = DgpSpec(kind="linear-linear", p=10, seed=1)
        params = default_params(spec)
        data, truth = generate(spec, params, 100_000, RngStream(1, 1))
        eps = truth.y_full - truth.m
        for j in range(3):
            assert abs(np.corrcoef(eps, data.x[:, j])[0, 1]) <= 0.02

    def test_deterministic_per_stream(self):
        spec = DgpSpec(kind="quad-quad", p=12, seed=2)
        params = default_params(spec)
        d1, t1 = generate(spec, params, 500, RngStream(2, 9))
        d2, t2 = generate(spec, params, 500, RngStream(2, 9))
        assert np.array_equal(d1.x, d2.x)
        assert np.array_equal(d1.t, d2.t)
        assert np.array_equal(t1.y_full, t2.y_full)

    def test_masked_outcomes_are_nan(self):
        spec = DgpSpec(p=10, seed=3)
        params = default_params(spec)
        data, _ = generate(spec, params, 300, RngStream(3, 1))
        assert np.all(np.isnan(data.y[data.t == 0]))
        assert np.all(np.isfinite(data.y[data.t == 1]))

    def test_observed_dataset_hides_truth(self):
        spec = DgpSpec(p=10, seed=4)
        params = default_params(spec)
        data, _ = generate(spec, params, 100, RngStream(4, 1))
        assert set(data.__dataclass_fields__) == {"t", "y", "x"}

    def test_sim_dgp_mean_structure(self):
        spec = DgpSpec(kind="sim-sim", p=15, seed=5)
        params = default_params(spec)
        data, truth = generate(spec, params, 1000, RngStream(5, 1))
        u = data.x @ params.gamma
        expected = params.gamma0 + u + params.c_y * u**2
        assert np.allclose(truth.m, expected)


class TestTheta0:
    def test_linear_dgp_recovers_coefficients(self):
        spec = DgpSpec(kind="linear-linear", p=50, seed=6)
        params = default_params(spec)
        m = 200_000
        theta0 = compute_theta0(spec, params, m)
        truth = np.concatenate([[params.gamma0], params.gamma])
        assert np.max(np.abs(theta0 - truth)) <= 3 / np.sqrt(m) * np.sqrt(2)

    def test_quad_dgp_closed_form_intercept(self):
        # with Sigma = I the squares only shift the intercept by sum(gamma*),
        # by the Gaussian moment identities E[X] = E[X^3] = 0, E[X^2] = 1
        spec = DgpSpec(kind="quad-quad", p=50, seed=7)
        params = default_params(spec)
        theta0 = compute_theta0(spec, params, 200_000)
        expected_intercept = params.gamma0 + params.gamma_star.sum()
        assert theta0[0] == pytest.approx(expected_intercept, abs=0.02)
        assert np.max(np.abs(theta0[1:] - params.gamma)) <= 0.03

    def test_repeatable_across_seeds(self):
        params = default_params(DgpSpec(kind="quad-quad", p=20, seed=8))
        a = compute_theta0(DgpSpec(kind="quad-quad", p=20, seed=8), params, 200_000)
        b = compute_theta0(DgpSpec(kind="quad-quad", p=20, seed=9), params, 200_000)
        assert np.max(np.abs(a - b)) <= 0.02

    def test_cache_roundtrip(self, tmp_path):
        spec = DgpSpec(kind="linear-linear", p=12, seed=10)
        params = default_params(spec)
        first = compute_theta0(spec, params, 20_000, cache_dir=str(tmp_path))
        path = theta0_cache_path(str(tmp_path), spec, params, 20_000)
        assert path.startswith(str(tmp_path))
        import os

        assert os.path.exists(path)
        second = compute_theta0(spec, params, 20_000, cache_dir=str(tmp_path))
        assert np.array_equal(first, second)


class TestComparators:
    def test_no_missingness_collapses_all_three(self):
        gen = np.random.default_rng(11)
        n, p = 250, 10
        x = gen.standard_normal((n, p))
        gamma = np.zeros(p)
        gamma[:3] = [1.0, -1.0, 0.5]
        m = 1.0 + x @ gamma
        y = m + gen.standard_normal(n)
        data = ObservedDataset(np.ones(n, dtype=int), y, x)
        spec = DgpSpec(kind="linear-linear", p=p, seed=12)
        truth = HiddenTruth(
            y_full=y, pi=np.ones(n), pi_raw=np.ones(n), m=m,
            spec=spec, params=default_params(spec),
        )
        fits = comparator_fits(data, truth, rng=RngStream(13))
        oracle = fits["oracle"].coefficients
        assert np.max(np.abs(oracle - fits["full"].coefficients)) <= 1e-8
        assert np.max(np.abs(oracle - fits["cc"].coefficients)) <= 1e-8

    def test_requested_subset_only(self):
        spec = DgpSpec(kind="linear-linear", p=10, seed=14)
        params = default_params(spec)
        data, truth = generate(spec, params, 200, RngStream(14, 1))
        fits = comparator_fits(data, truth, rng=RngStream(15), estimators=("cc",))
        assert set(fits) == {"cc"}
