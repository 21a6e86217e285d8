import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from sicure.fit import FitConfig
from sicure.simulate import (BETA0, DEFAULT_TUNING, GAMMA0, SIEVE_KNOTS, ScenarioSpec, ase, ase_grid, coef_metrics,
                             gen_censoring, gen_covariates, gen_event_time, gen_incidence, generate, lambda0,
                             lambda0_inverse, run_replicates, true_link)
from sicure.transform import Transformation, survival_u


class TestLinks:
    def test_scenario2_midpoint(self):
        assert true_link(2, 0.0) == 0.5

    def test_scenario3_intercept(self):
        assert true_link(3, 0.0) == pytest.approx(expit(0.85))
        assert true_link(3, 0.0) == pytest.approx(0.70057, abs=1e-5)

    def test_scenario1_logistic(self):
        u = np.linspace(-3, 3, 7)
        np.testing.assert_allclose(true_link(1, u), 1 / (1 + np.exp(-u)))

    @pytest.mark.parametrize("scenario", [1, 2, 3])
    def test_in_unit_interval(self, scenario):
        X, _ = gen_covariates(2000, np.random.default_rng(0))
        p = gen_incidence(scenario, X)
        # the scenario-2 tanh saturates to exactly 1.0 in double precision for large u
        assert np.all((p > 0) & (p <= 1))
        assert np.all(p[np.abs(X @ GAMMA0) < 1.0] < 1)

    def test_bad_scenario(self):
        with pytest.raises(ValueError):
            true_link(4, 0.0)

    def test_truth_constants(self):
        assert np.linalg.norm(GAMMA0) == pytest.approx(1.0)
        np.testing.assert_array_equal(BETA0, [1.0, -1.0, 1.0])

    def test_scenario1_cure_fraction(self):
        # Monte-Carlo over covariates; the expected cure fraction does not depend on r
        X, _ = gen_covariates(10 ** 6, np.random.default_rng(1))
        cure = 1.0 - gen_incidence(1, X).mean()
        print(f"scenario-1 cure fraction {cure:.4f}")
        assert abs(cure - 0.38) <= 0.01


class TestEventTimes:
    def test_inverse_cumhaz(self):
        t = lambda0_inverse(np.array([1.0]))
        assert abs(lambda0(t)[0] - 1.0) < 1e-9

    def test_unit_exponential_quantile(self):
        t = gen_event_time(Transformation(0.0), BETA0, np.zeros((1, 3)), np.array([math.exp(-1)]))
        assert lambda0(t)[0] == pytest.approx(1.0, abs=1e-9)

    def test_u_near_one_gives_small_time(self):
        t = gen_event_time(Transformation(1.0), BETA0, np.zeros((1, 3)), np.array([1 - 1e-12]))
        assert 0 <= t[0] < 1e-9

    def test_rejects_bad_uniform(self):
        with pytest.raises(ValueError):
            gen_event_time(Transformation(0.0), BETA0, np.zeros((1, 3)), np.array([1.0]))

    @given(st.floats(0.0, 50.0), st.floats(0.0, 3.0))
    @settings(max_examples=50, deadline=None)
    def test_survival_self_consistency(self, lp, r):
        u = np.array([0.05, 0.3, 0.6, 0.95])
        z = np.array([[lp, 0.0, 0.0]]).repeat(4, axis=0) / 10.0
        t = gen_event_time(Transformation(r), BETA0, z, u)
        s = survival_u(Transformation(r), lambda0(t), z @ BETA0)
        np.testing.assert_allclose(s, u, rtol=1e-7, atol=1e-12)

    @pytest.mark.parametrize("r", [0.0, 1.0, 2.0])
    def test_empirical_survival(self, r):
        rng = np.random.default_rng(7)
        n = 10 ** 5
        z = np.array([[0.5, -0.3, 1.0]])
        t = gen_event_time(Transformation(r), BETA0, np.repeat(z, n, axis=0), rng.uniform(size=n))
        grid = np.quantile(t, np.linspace(0.05, 0.95, 10))
        emp = np.array([(t > g).mean() for g in grid])
        model = survival_u(Transformation(r), lambda0(grid), z @ BETA0)
        assert np.max(np.abs(emp - model)) < 0.01


class TestCensoring:
    def test_cured_right_censored_at_last_exam(self):
        rng = np.random.default_rng(0)
        left, right = gen_censoring(np.array([np.inf]), 5, 2.0, rng)
        V = np.sort(np.random.default_rng(0).uniform(0, 2.0, (1, 5)), axis=1)
        assert right[0] == np.inf and left[0] == V[0, -1]

    def test_event_before_first_exam(self):
        left, right = gen_censoring(np.array([1e-9]), 5, 2.0, np.random.default_rng(0))
        V = np.sort(np.random.default_rng(0).uniform(0, 2.0, (1, 5)), axis=1)
        assert left[0] == 0.0 and right[0] == V[0, 0]

    def test_needs_an_exam(self):
        with pytest.raises(ValueError):
            gen_censoring(np.array([1.0]), 0, 1.0, np.random.default_rng(0))

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 30), st.floats(0.2, 5.0))
    @settings(max_examples=40, deadline=None)
    def test_brackets_and_one_hot(self, seed, n_exams, horizon):
        rng = np.random.default_rng(seed)
        t = np.where(rng.uniform(size=200) < 0.3, np.inf, rng.exponential(horizon / 2, 200))
        left, right = gen_censoring(t, n_exams, horizon, rng)
        finite = np.isfinite(right)
        assert np.all((left[finite] < t[finite]) & (t[finite] <= right[finite]))
        assert np.all(left[~finite] <= t[~finite])
        dl = (left == 0) & finite
        di = (left > 0) & finite
        dr = ~finite
        assert np.all(dl.astype(int) + di + dr == 1)

    @given(st.integers(0, 10 ** 6), st.sampled_from(sorted(DEFAULT_TUNING)))
    @settings(max_examples=15, deadline=None)
    def test_generated_indicators_one_hot(self, seed, key):
        ds, truth = generate(ScenarioSpec(key[0], key[1], 200, seed=seed), return_truth=True)
        assert np.all(ds.dl.astype(int) + ds.di + ds.dr == 1)
        event = ~ds.dr
        assert np.all((ds.left[event] < truth["t"][event]) & (truth["t"][event] <= ds.right[event]))
        assert np.all(ds.dr[truth["cured"]])

    def test_cure_rate_matches_incidence(self):
        ds, truth = generate(ScenarioSpec(2, 1.0, 20000, seed=3), return_truth=True)
        target = 1.0 - truth["p"].mean()
        se = math.sqrt(target * (1 - target) / ds.n)
        assert abs(truth["cured"].mean() - target) < 3 * se


class TestReproducibility:
    def test_seeded_generation_is_bitwise(self):
        a = generate(ScenarioSpec(3, 2.0, 300, seed=42))
        b = generate(ScenarioSpec(3, 2.0, 300, seed=42))
        assert a == b
        np.testing.assert_array_equal(a.right, b.right)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ScenarioSpec(1, 0.0, 5)
        with pytest.raises(ValueError):
            ScenarioSpec(4, 0.0, 100)
        with pytest.raises(ValueError):
            ScenarioSpec(1, -1.0, 100)

    def test_replicates_independent_of_workers(self):
        spec = ScenarioSpec(1, 0.0, 80, seed=5)
        cfg = FitConfig(engine="logistic")
        one = run_replicates(spec, 3, cfg, workers=1)
        two = run_replicates(spec, 3, cfg, workers=2)
        np.testing.assert_array_equal(one.estimates, two.estimates)
        np.testing.assert_array_equal(one.ase_per_replicate, two.ase_per_replicate)


class TestMetrics:
    def test_grid(self):
        g = ase_grid()
        assert g.shape == (31 * 31 * 2, 3)
        assert len(np.unique(g, axis=0)) == 1922
        assert g[:, 0].min() == -1.0 and g[:, 0].max() == 2.0
        assert g[:, 1].min() == -1.5 and g[:, 1].max() == 1.5

    def test_truth_is_perfect(self):
        est = np.tile(BETA0, (10, 1))
        m = coef_metrics(est, BETA0, np.full((10, 3), 0.1))
        np.testing.assert_array_equal(m["bias"], 0.0)
        np.testing.assert_array_equal(m["esd"], 0.0)
        np.testing.assert_array_equal(m["cp"], 1.0)
        p = gen_incidence(3, ase_grid())
        assert ase(p, p) == 0.0

    def test_coverage_counts(self):
        est = np.array([[1.0], [1.5], [0.5], [1.1]])
        m = coef_metrics(est, np.array([1.0]), np.full((4, 1), 0.2))
        assert m["cp"][0] == 0.5
        assert m["ese"][0] == pytest.approx(0.2)

    def test_summary_rates_sum_to_one(self):
        m = run_replicates(ScenarioSpec(1, 0.0, 60, seed=1), 2, FitConfig(engine="logistic"), workers=1)
        assert sum(m.censor_rates) == pytest.approx(1.0)
        assert 0 <= m.cure_rate <= 1
        assert [row["Par"] for row in m.table()] == ["beta1", "beta2", "beta3"]

    def test_needs_two_replicates(self):
        with pytest.raises(ValueError):
            run_replicates(ScenarioSpec(1, 0.0, 60), 1, FitConfig(engine="logistic"))


def test_sieve_knots_cover_every_scenario():
    assert set(SIEVE_KNOTS) == {sc for sc, _ in DEFAULT_TUNING}
    assert SIEVE_KNOTS[1] <= SIEVE_KNOTS[2] <= SIEVE_KNOTS[3]
