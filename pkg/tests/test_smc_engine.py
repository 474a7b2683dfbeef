import numpy as np
import pytest

from mlevidence.data_model import Dataset
from mlevidence.likelihood_core import precompute
from mlevidence.analytic_evidence import nig_log_evidence
from mlevidence.smc_engine import (
    EvidenceEstimate,
    build_target,
    derive_run_seed,
    estimate_evidence,
    mh_rejuvenate,
    run_smc,
    systematic_resample,
    variance_block_to_natural,
)

from conftest import general_spec, lm_spec, make_dataset, nig_spec, simple_spec


def empty_stats(d=2):
    data = Dataset(
        y=np.zeros(0), x=np.zeros((0, d)), z=np.zeros((0, 0)),
        group_of=np.zeros(0, dtype=int),
    )
    return precompute(data)


class TestSeedSplitting:
    def test_distinct_and_deterministic(self):
        seeds = [derive_run_seed(123, k) for k in range(32)]
        assert len(set(seeds)) == 32
        assert seeds == [derive_run_seed(123, k) for k in range(32)]

    def test_master_seed_changes_streams(self):
        assert derive_run_seed(1, 0) != derive_run_seed(2, 0)


class TestEvidenceEstimate:
    def test_single_run_flagged(self):
        est = EvidenceEstimate.from_runs([1.5], 100, "integrated")
        assert est.single_run and est.std == 0.0

    def test_std_uses_sample_convention(self):
        est = EvidenceEstimate.from_runs([1.0, 3.0], 100, "integrated")
        assert np.isclose(est.std, np.std([1.0, 3.0], ddof=1))
        assert np.isclose(est.mean, 2.0)


class TestSystematicResample:
    def test_uniform_weights_preserve_everything(self, rng):
        idx = systematic_resample(np.full(8, 1.0 / 8), rng)
        assert sorted(idx) == list(range(8))

    def test_degenerate_weight_takes_over(self, rng):
        w = np.zeros(6)
        w[3] = 1.0
        idx = systematic_resample(w, rng)
        assert np.all(idx == 3)

    def test_counts_match_expectation(self, rng):
        w = np.array([0.5, 0.25, 0.25])
        idx = systematic_resample(np.repeat(w / 4, 4) * 4 / 3, rng)  # still sums to 1
        assert len(idx) == 12


class TestConstantLikelihood:
    def test_log_evidence_exactly_zero(self, rng):
        """With no data every integrated likelihood is identically zero, so
        the accumulated evidence must be exactly 0.0, not merely close."""
        stats = empty_stats()
        for spec in (lm_spec(2), simple_spec(2)):
            logz, cloud = run_smc(stats, spec, "integrated", 64, seed=5)
            assert logz == 0.0
            assert cloud.beta_temper == 1.0


class TestDeterminism:
    def test_same_seed_same_everything(self, rng):
        data = make_dataset(rng, 40, 2, 0, 3)
        stats = precompute(data)
        spec = simple_spec(2)
        z1, c1 = run_smc(stats, spec, "integrated", 80, seed=11)
        z2, c2 = run_smc(stats, spec, "integrated", 80, seed=11)
        assert z1 == z2
        assert np.array_equal(c1.particles, c2.particles)
        assert np.array_equal(c1.log_weights, c2.log_weights)

    def test_serial_and_parallel_estimates_identical(self, rng):
        data = make_dataset(rng, 30, 2, 0, 2)
        stats = precompute(data)
        spec = lm_spec(2)
        a = estimate_evidence(stats, spec, "integrated", 3, 64, 7, jobs=1)
        b = estimate_evidence(stats, spec, "integrated", 3, 64, 7, jobs=3)
        assert a.runs == b.runs

    def test_different_seeds_differ(self, rng):
        data = make_dataset(rng, 30, 2, 0, 2)
        stats = precompute(data)
        spec = lm_spec(2)
        z1, _ = run_smc(stats, spec, "integrated", 64, seed=1)
        z2, _ = run_smc(stats, spec, "integrated", 64, seed=2)
        assert z1 != z2


class TestTemperingInvariants:
    def test_ess_floor_and_monotone_schedule(self, rng):
        data = make_dataset(rng, 60, 2, 0, 3)
        stats = precompute(data)
        spec = simple_spec(2)
        logz, cloud = run_smc(stats, spec, "integrated", 100, seed=3)
        assert cloud.beta_temper == 1.0
        assert cloud.ess() >= 100 * 0.5 * 0.99  # floor maintained at the end
        assert np.isfinite(logz)
        assert len(cloud.log_z_increments) == cloud.stage

    def test_minimum_particle_count_enforced(self):
        with pytest.raises(ValueError):
            run_smc(empty_stats(), lm_spec(2), "integrated", 10, seed=0)

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            run_smc(empty_stats(), lm_spec(2), "nonsense", 64, seed=0)


class TestAccuracy:
    def test_recovers_nig_closed_form(self, rng):
        data = make_dataset(rng, 80, 2, 0, 2)
        stats = precompute(data)
        spec = nig_spec(2)
        analytic = nig_log_evidence(stats, spec)
        est = estimate_evidence(stats, spec, "integrated", 4, 400, 19)
        assert abs(est.mean - analytic) < 0.1
        assert est.std < 0.1

    def test_full_mode_agrees_with_integrated(self, rng):
        data = make_dataset(rng, 50, 2, 0, 3)
        stats = precompute(data)
        spec = simple_spec(2)
        a = estimate_evidence(stats, spec, "integrated", 3, 400, 23)
        b = estimate_evidence(stats, spec, "full", 3, 600, 23)
        assert abs(a.mean - b.mean) < 1.0

    def test_general_full_mode_agrees(self, rng):
        data = make_dataset(rng, 40, 2, 2, 3)
        stats = precompute(data)
        spec = general_spec(2, m=2)
        a = estimate_evidence(stats, spec, "integrated", 3, 300, 29)
        b = estimate_evidence(stats, spec, "full", 3, 600, 29)
        assert abs(a.mean - b.mean) < 1.5


class TestRejuvenation:
    def test_zero_sweeps_is_identity(self, rng):
        data = make_dataset(rng, 30, 2, 0, 2)
        stats = precompute(data)
        spec = lm_spec(2)
        _, cloud = run_smc(stats, spec, "integrated", 64, seed=13)
        target = build_target(stats, spec, "integrated")

        def logdensity(U):
            return target.log_prior(U) + target.log_lik(U)

        out = mh_rejuvenate(cloud, logdensity, sweeps=0)
        assert np.array_equal(out.particles, cloud.particles)

    def test_sweeps_preserve_target_moments(self, rng):
        """Rejuvenation must leave the weighted posterior mean roughly in
        place while changing the particle positions."""
        data = make_dataset(rng, 60, 2, 0, 2)
        stats = precompute(data)
        spec = lm_spec(2)
        _, cloud = run_smc(stats, spec, "integrated", 400, seed=17)
        target = build_target(stats, spec, "integrated")

        def logdensity(U):
            return target.log_prior(U) + target.log_lik(U)

        out = mh_rejuvenate(cloud, logdensity, sweeps=5, rng=np.random.default_rng(99))
        assert not np.array_equal(out.particles, cloud.particles)
        w = cloud.normalized_weights()
        m_before = w @ cloud.particles
        m_after = out.normalized_weights() @ out.particles
        sd = np.sqrt(np.average((cloud.particles - m_before) ** 2, weights=w, axis=0))
        assert np.all(np.abs(m_after - m_before) < 5 * sd / np.sqrt(400) * 4 + 0.1)


class TestSamplingScale:
    def test_natural_block_positive(self, rng):
        data = make_dataset(rng, 30, 2, 0, 3)
        stats = precompute(data)
        spec = simple_spec(2)
        _, cloud = run_smc(stats, spec, "integrated", 64, seed=31)
        nat = variance_block_to_natural(spec, cloud.particles)
        assert np.all(nat > 0)

    def test_sampled_rho_stays_in_interval(self, rng):
        data = make_dataset(rng, 30, 2, 2, 3)
        stats = precompute(data)
        spec = general_spec(2, m=2, sampled_rho=True)
        _, cloud = run_smc(stats, spec, "integrated", 64, seed=37)
        nat = variance_block_to_natural(spec, cloud.particles)
        rho = nat[:, -1]
        assert np.all((rho > -1) & (rho < 1))
        assert np.all(nat[:, :-1] > 0)

    def test_prior_only_run_matches_ig_prior_moments(self, rng):
        """With an empty dataset the terminal cloud is a prior sample."""
        stats = empty_stats()
        spec = lm_spec(2)
        _, cloud = run_smc(stats, spec, "integrated", 4000, seed=41)
        nat = variance_block_to_natural(spec, cloud.particles)[:, 0]
        # IG(3, 0.4): mean 0.2
        assert abs(nat.mean() - 0.2) < 0.02
