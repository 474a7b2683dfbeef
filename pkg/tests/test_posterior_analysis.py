import numpy as np
import pytest

from mlevidence.data_model import Dataset
from mlevidence.likelihood_core import ThetaPoint, precompute
from mlevidence.analytic_evidence import nig_posterior
from mlevidence.posterior_analysis import (
    AICResult,
    BayesFactor,
    PosteriorGaussian,
    SingularCovarianceError,
    aic,
    bayes_factor,
    beta_posterior_trace,
    conditional_eta_means,
    export_fits,
    mahalanobis,
    recover_beta_posterior,
)
from mlevidence.smc_engine import EvidenceEstimate, run_smc

from conftest import general_spec, lm_spec, make_dataset, nig_spec, simple_spec


class TestRecoverBetaPosterior:
    def test_integrated_mixture_close_to_nig_posterior_mean(self, rng):
        """For the conjugate family the mixture over the variance trace
        should land near the exact posterior mean of the coefficients."""
        data = make_dataset(rng, 120, 2, 0, 2)
        stats = precompute(data)
        spec = nig_spec(2)
        _, cloud = run_smc(stats, spec, "integrated", 600, seed=3)
        post = recover_beta_posterior(cloud, stats, spec, "integrated")
        exact = nig_posterior(stats, spec)
        sd = np.sqrt(np.diag(post.cov))
        assert np.all(np.abs(post.mean - exact.mean) < 4 * sd / np.sqrt(600) + 0.05)
        assert post.source == "mixture-over-trace"

    def test_full_mode_empirical(self, rng):
        data = make_dataset(rng, 60, 2, 0, 2)
        stats = precompute(data)
        spec = lm_spec(2)
        _, cloud = run_smc(stats, spec, "full", 400, seed=5)
        post = recover_beta_posterior(cloud, stats, spec, "full")
        assert post.source == "empirical-from-draws"
        assert post.cov.shape == (2, 2)
        # integrated and full posteriors should roughly agree
        post_i = recover_beta_posterior(
            run_smc(stats, spec, "integrated", 400, seed=5)[1], stats, spec, "integrated"
        )
        assert np.all(np.abs(post.mean - post_i.mean) < 0.25)

    def test_full_mode_degenerate_cloud_raises(self, rng):
        from mlevidence.smc_engine import ParticleCloud

        particles = np.zeros((64, 3))  # all identical draws
        cloud = ParticleCloud(
            particles=particles, log_weights=np.zeros(64), beta_temper=1.0,
            log_z_increments=(), rng_seed=0, stage=0, accept_rate=1.0,
        )
        data = make_dataset(rng, 10, 2, 0, 2)
        stats = precompute(data)
        with pytest.raises(SingularCovarianceError):
            recover_beta_posterior(cloud, stats, lm_spec(2), "full")

    def test_requires_terminal_cloud(self, rng):
        from mlevidence.smc_engine import ParticleCloud

        cloud = ParticleCloud(
            particles=np.zeros((64, 1)), log_weights=np.zeros(64), beta_temper=0.5,
            log_z_increments=(), rng_seed=0, stage=1, accept_rate=1.0,
        )
        data = make_dataset(rng, 10, 2, 0, 2)
        with pytest.raises(ValueError):
            recover_beta_posterior(cloud, precompute(data), lm_spec(2), "integrated")


class TestMahalanobis:
    def test_gaussian_quadratic_form(self):
        post = PosteriorGaussian(
            mean=np.array([1.0, 2.0]), cov=np.diag([4.0, 9.0]), source="empirical-from-draws"
        )
        b = np.array([3.0, 5.0])
        expected = np.sqrt((2.0 / 2.0) ** 2 + (3.0 / 3.0) ** 2)
        assert np.isclose(mahalanobis(b, post), expected)

    def test_trace_averaging(self):
        trace = [
            (0.5, np.zeros(1), np.array([[1.0]])),
            (0.5, np.zeros(1), np.array([[4.0]])),
        ]
        val = mahalanobis(np.array([2.0]), trace)
        assert np.isclose(val, np.sqrt(0.5 * 4.0 + 0.5 * 1.0))

    def test_zero_at_mean(self):
        post = PosteriorGaussian(mean=np.ones(2), cov=np.eye(2), source="x")
        assert mahalanobis(np.ones(2), post) == 0.0


class TestAIC:
    def test_lm_matches_ols_closed_form(self, rng):
        data = make_dataset(rng, 200, 3, 0, 2)
        res = aic(data, lm_spec(3))
        X, y = data.x, data.y
        beta = np.linalg.lstsq(X, y, rcond=None)[0]
        rss = float(np.sum((y - X @ beta) ** 2))
        s2 = rss / 200
        ll = -0.5 * (200 * np.log(2 * np.pi * s2) + 200)
        assert abs(res.max_loglik - ll) < 1e-5
        assert res.k == 3
        assert np.isclose(res.aic, 2 * 3 - 2 * ll, atol=1e-4)

    def test_k_override(self, rng):
        data = make_dataset(rng, 50, 2, 0, 2)
        assert aic(data, lm_spec(2), k=7).k == 7

    def test_multilevel_k_counts_variances(self, rng):
        data = make_dataset(rng, 60, 2, 0, 3)
        assert aic(data, simple_spec(2)).k == 2 + 2

    def test_simple_ml_beats_misspecified_lm_on_grouped_data(self, rng):
        # strong group effects: the multilevel profile likelihood must win
        base = make_dataset(rng, 300, 2, 0, 5)
        shift = np.array([-3.0, -1.5, 0.0, 1.5, 3.0])
        y = base.y + shift[base.group_of - 1]
        data = Dataset(y=y, x=base.x, z=base.z, group_of=base.group_of)
        ll_lm = aic(data, lm_spec(2)).max_loglik
        ll_ml = aic(data, simple_spec(2)).max_loglik
        assert ll_ml > ll_lm + 10

    def test_general_ml_runs_and_converges(self, rng):
        data = make_dataset(rng, 80, 2, 2, 4)
        res = aic(data, general_spec(2, m=2, sampled_rho=True))
        assert isinstance(res, AICResult)
        assert np.isfinite(res.aic)
        assert res.k == 2 + 4


class TestBayesFactor:
    def est(self, mean, std=0.1):
        return EvidenceEstimate(
            runs=(mean,), mean=mean, std=std, draws_per_stage=100,
            likelihood_mode="integrated", single_run=False,
        )

    def test_identical_models_no_evidence(self):
        bf = bayes_factor(self.est(-100.0), self.est(-100.0))
        assert bf.log_bf == 0.0
        assert bf.label == "no evidence"

    def test_sign_and_propagated_std(self):
        bf = bayes_factor(self.est(-100.0, 0.3), self.est(-104.0, 0.4))
        assert bf.log_bf == 4.0
        assert np.isclose(bf.std, 0.5)
        assert bf.label == "strong"

    def test_custom_bands(self):
        bands = ((2.0, "weak"), (np.inf, "decisive"))
        assert bayes_factor(self.est(-1.0), self.est(-2.0), bands=bands).label == "weak"
        assert bayes_factor(self.est(-1.0), self.est(-9.0), bands=bands).label == "decisive"


class TestConditionalEtaMeans:
    def test_simple_shrinkage_toward_zero(self, rng):
        data = make_dataset(rng, 60, 2, 0, 3)
        stats = precompute(data)
        spec = simple_spec(2)
        theta = ThetaPoint(sigma2_y=1.0, sigma2_eta=0.5)
        beta = np.zeros(2)
        eta = conditional_eta_means(stats, spec, theta, beta)
        assert eta.shape == (3, 1)
        # raw group means shrunk by w_j < 1
        for j in range(3):
            idx = data.group_of == j + 1
            raw = data.y[idx].sum()
            w = 0.5 / (1.0 + idx.sum() * 0.5)
            assert np.isclose(eta[j, 0], w * raw)

    def test_lm_has_no_group_effects(self, rng):
        data = make_dataset(rng, 20, 2, 0, 2)
        with pytest.raises(ValueError):
            conditional_eta_means(
                precompute(data), lm_spec(2), ThetaPoint(sigma2_y=1.0), np.zeros(2)
            )


class TestExportFits:
    def _post(self, d):
        return PosteriorGaussian(mean=np.arange(1.0, d + 1), cov=np.eye(d), source="x")

    def test_m0_pooled_fit_identical_across_counties(self, rng):
        data = make_dataset(rng, 20, 2, 0, 4)
        meta = {"x_labels": ["basement", "first_floor"], "county_names": list("ABCD")}
        rows = export_fits(self._post(2), data, lm_spec(2), "M0", meta)
        assert len(rows) == 8
        means_t0 = {r["mean"] for r in rows if r["t"] == 0}
        assert len(means_t0) == 1  # complete pooling
        assert {r["county"] for r in rows} == set("ABCD")

    def test_m3_absent_first_floor_flagged(self, rng):
        data = make_dataset(rng, 20, 3, 0, 2)
        meta = {
            "x_labels": ["basement:A", "basement:B", "first_floor:A"],
            "county_names": ["A", "B"],
            "dropped_columns": ["first_floor:B"],
        }
        rows = export_fits(self._post(3), data, lm_spec(3), "M3", meta)
        missing = [r for r in rows if not r["present"]]
        assert len(missing) == 1
        assert missing[0]["county"] == "B" and missing[0]["t"] == 1
        assert missing[0]["mean"] is None

    def test_m4_includes_group_deviation(self, rng):
        data = make_dataset(rng, 20, 3, 0, 2)
        meta = {
            "x_labels": ["basement", "first_floor", "log_uranium"],
            "county_names": ["A", "B"],
        }
        eta = np.array([[1.0], [-1.0]])
        rows_with = export_fits(
            self._post(3), data, simple_spec(3), "M4", meta, eta_means=eta
        )
        rows_without = export_fits(self._post(3), data, simple_spec(3), "M4", meta)
        a = {(r["county"], r["t"]): r["mean"] for r in rows_with}
        b = {(r["county"], r["t"]): r["mean"] for r in rows_without}
        assert np.isclose(a[("A", 0)] - b[("A", 0)], 1.0)
        assert np.isclose(a[("B", 1)] - b[("B", 1)], -1.0)
