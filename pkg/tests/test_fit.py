import json
import math

import numpy as np
import pytest

from sicure import schema
from sicure.data import CureDataset
from sicure.estep import endpoint_design
from sicure.fit import (FitConfig, FitResult, fit_em, fit_r_grid, load_fit, loglik_gradient, n_parameters,
                        observed_loglik, predict_loglik)
from sicure.simulate import ScenarioSpec, generate
from sicure.splines import SplineBasis, make_basis

from oracles import central_gradient


def unit_basis():
    # linear basis on [0, 2] with no interior knots: one column, b(t) = t/2
    return SplineBasis(1, (), (0.0, 2.0))


class TestObservedLoglik:
    def test_right_censored_at_zero_is_uninformative(self):
        ds = CureDataset.from_arrays([0.0], [np.inf], [[0.3]], np.zeros((1, 0)))
        val = observed_loglik(ds, np.array([0.4]), np.zeros(0), np.array([1.0]), 0.0, basis=unit_basis())
        assert val == pytest.approx(0.0, abs=1e-15)

    def test_left_censored_unit_hazard(self):
        # Lambda(R) = 1 at R = 2; p clamped to 1 - 1e-6
        ds = CureDataset.from_arrays([0.0], [2.0], [[0.3]], [[0.0]])
        val = observed_loglik(ds, np.array([1.0]), np.zeros(1), np.array([1.0]), 0.0, basis=unit_basis())
        assert val == pytest.approx(math.log(1 - math.exp(-1)), abs=2e-6)
        assert val == pytest.approx(-0.458675, abs=1e-5)

    def test_interval_factor(self):
        ds = CureDataset.from_arrays([0.5], [1.5], [[0.0]], [[0.0]])
        val = observed_loglik(ds, np.array([0.5]), np.zeros(1), np.array([2.0]), 1.0, basis=unit_basis())
        s = lambda lam: 1 / (1 + lam)  # r = 1: S_u = (1 + Lambda)^-1
        assert val == pytest.approx(math.log(0.5 * (s(0.5) - s(1.5))), rel=1e-12)

    def test_floor_keeps_finite(self):
        ds = CureDataset.from_arrays([0.0], [2.0], [[0.0]], [[0.0]])
        val = observed_loglik(ds, np.array([0.5]), np.zeros(1), np.array([0.0]), 0.0, basis=unit_basis())
        assert np.isfinite(val) and val == pytest.approx(math.log(1e-300))


@pytest.fixture(scope="module")
def s1_data():
    return generate(ScenarioSpec(1, 0.0, 200, seed=11))


@pytest.fixture(scope="module")
def logistic_fit(s1_data):
    return fit_em(s1_data, FitConfig(r=0.0, engine="logistic"))


@pytest.mark.parametrize("r", [0.0, 1.0, 3.0])
def test_loglik_gradient_matches_differences(r):
    ds = generate(ScenarioSpec(1, 1.0, 150, seed=4))
    design = endpoint_design(ds, make_basis(ds.finite_endpoints, 3, 5, "quantile"))
    rng = np.random.default_rng(0)
    b, e, p = rng.normal(size=3) * 0.5, rng.uniform(0.1, 1.0, design[0].shape[1]), rng.uniform(0.2, 0.9, ds.n)
    ll, gb, ge, gp = loglik_gradient(ds, p, b, e, r, design)
    f = lambda bb, ee, pp: observed_loglik(ds, pp, bb, ee, r, design=design)
    assert ll == f(b, e, p)
    np.testing.assert_allclose(gb, central_gradient(lambda v: f(v, e, p), b), atol=1e-6)
    np.testing.assert_allclose(ge, central_gradient(lambda v: f(b, v, p), e), atol=1e-6)
    np.testing.assert_allclose(gp, central_gradient(lambda v: f(b, e, v), p), atol=1e-6)


class TestFitEm:
    def test_logistic_trace_nondecreasing(self, logistic_fit):
        assert np.all(np.diff(logistic_fit.loglik_trace) >= -1e-9)
        assert logistic_fit.converged

    def test_result_invariants(self, logistic_fit, s1_data):
        f = logistic_fit
        assert np.isfinite(f.loglik)
        assert np.all(f.eta >= 0)
        assert f.n_par == n_parameters("logistic", 3, 3, f.basis.k)
        assert f.aic == pytest.approx(-2 * f.loglik + 2 * f.n_par)
        assert f.bic == pytest.approx(-2 * f.loglik + math.log(s1_data.n) * f.n_par)

    def test_fixed_point(self, s1_data):
        # the parameter criterion must be the one that stops the fit; a stop on the
        # loglik criterion leaves steps of the size of the last one
        cfg = FitConfig(r=0.0, engine="logistic", tol_loglik=1e-12)
        first = fit_em(s1_data, cfg)
        again = fit_em(s1_data, cfg, init=first, basis=first.basis)
        assert again.n_iter == 1
        assert np.max(np.abs(again.params.vector() - first.params.vector())) < cfg.tol_param

    def test_acceleration_keeps_the_optimum(self, s1_data):
        tight = dict(r=0.0, engine="logistic", tol_param=1e-7, tol_loglik=1e-13, max_iter=3000)
        plain = fit_em(s1_data, FitConfig(accelerate=False, **tight))
        fast = fit_em(s1_data, FitConfig(**tight))
        assert fast.loglik == pytest.approx(plain.loglik, abs=1e-6)
        assert np.max(np.abs(fast.params.vector() - plain.params.vector())) < 1e-3

    def test_acceleration_at_large_r(self):
        # plain EM crawls when the frailty variance is large
        ds = generate(ScenarioSpec(1, 1.0, 300, seed=1010))
        plain = fit_em(ds, FitConfig(r=4.2, engine="logistic", accelerate=False))
        fast = fit_em(ds, FitConfig(r=4.2, engine="logistic"))
        assert not plain.converged and fast.converged
        assert fast.loglik > plain.loglik
        assert np.all(np.diff(fast.loglik_trace) >= -1e-9)

    @pytest.mark.parametrize("engine", ["logistic", "kernel"])
    def test_permutation_invariance(self, engine):
        ds = generate(ScenarioSpec(1, 0.0, 120, seed=3))
        cfg = FitConfig(engine=engine, max_iter=40)
        a = fit_em(ds, cfg)
        perm = np.random.default_rng(9).permutation(ds.n)
        b = fit_em(ds.subset(perm), cfg)
        assert np.max(np.abs(a.params.vector() - b.params.vector())) < 1e-8
        np.testing.assert_allclose(a.params.incidence.fitted_p[perm], b.params.incidence.fitted_p, atol=1e-8)

    def test_kernel_unit_gamma_and_net_ascent(self):
        ds = generate(ScenarioSpec(2, 0.0, 150, seed=5))
        f = fit_em(ds, FitConfig(engine="kernel"))
        assert np.linalg.norm(f.gamma) == pytest.approx(1.0, abs=1e-12)
        assert f.loglik_trace[-1] >= f.loglik_trace[0]
        assert f.params.h in FitConfig().h_grid

    def test_no_right_censoring_warns(self):
        rng = np.random.default_rng(0)
        n = 40
        left = rng.uniform(0.0, 1.0, n)
        right = left + rng.uniform(0.1, 1.0, n)
        left[:10] = 0.0
        ds = CureDataset.from_arrays(left, right, rng.normal(size=(n, 2)), rng.normal(size=(n, 1)))
        for engine in ("logistic", "kernel"):
            f = fit_em(ds, FitConfig(engine=engine, max_iter=50))
            assert any("no cure signal" in w for w in f.warnings)
            assert np.all(f.params.incidence.fitted_p > 0.99)

    def test_invalid_dataset_rejected(self):
        ds = CureDataset.from_arrays([0.0], [np.inf], [[0.0]], [[0.0]])
        with pytest.raises(ValueError):
            fit_em(ds, FitConfig(engine="logistic"))

    @pytest.mark.parametrize("bad", [dict(r=-1), dict(max_iter=0), dict(tol_param=0), dict(engine="gam"),
                                     dict(accelerate_every=0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            FitConfig(**bad)


class TestSerialization:
    def test_round_trip_and_schema(self, logistic_fit, tmp_path):
        jsonschema = pytest.importorskip("jsonschema")
        path = tmp_path / "fit.json"
        logistic_fit.save(path)
        obj = json.loads(path.read_text())
        jsonschema.validate(obj, schema("fit_result"))
        back = load_fit(obj)
        assert isinstance(back, FitResult)
        np.testing.assert_array_equal(back.params.vector(), logistic_fit.params.vector())
        x = np.array([[0.5, -0.2, 1.0]])
        np.testing.assert_allclose(back.params.incidence.predict(x), logistic_fit.params.incidence.predict(x))
        t = np.linspace(0, 1, 5)
        np.testing.assert_allclose(back.cumhaz(t), logistic_fit.cumhaz(t))

    def test_kernel_round_trip_predict(self, tmp_path):
        ds = generate(ScenarioSpec(1, 0.0, 100, seed=2))
        f = fit_em(ds, FitConfig(engine="kernel", max_iter=20))
        f.save(tmp_path / "k.json")
        back = load_fit(json.loads((tmp_path / "k.json").read_text()))
        np.testing.assert_allclose(predict_loglik(back, ds), predict_loglik(f, ds), rtol=1e-12)


class TestRGrid:
    def test_single_point(self, s1_data):
        tr, va = s1_data.subset(np.arange(150)), s1_data.subset(np.arange(150, 200))
        res = fit_r_grid(tr, va, FitConfig(engine="logistic"), [1.5])
        assert res.best_r == 1.5
        assert len(res.profile) == 1 and not res.failures

    def test_profile_length_and_argmax(self, s1_data):
        tr, va = s1_data.subset(np.arange(150)), s1_data.subset(np.arange(150, 200))
        grid = [0.0, 0.5, 1.0]
        res = fit_r_grid(tr, va, FitConfig(engine="logistic"), grid)
        assert [r for r, _ in res.profile] == grid
        scores = [s for _, s in res.profile]
        assert res.best_r == grid[int(np.argmax(scores))]

    def test_cold_grid_matches_single_fits(self, s1_data):
        tr, va = s1_data.subset(range(150)), s1_data.subset(range(150, 200))
        res = fit_r_grid(tr, va, FitConfig(engine="logistic"), [0.0, 1.0], warm=False)
        single = fit_em(tr, FitConfig(engine="logistic", r=1.0))
        assert res.profile[1][1] == predict_loglik(single, va)

    def test_warm_kernel_grid_is_smooth(self):
        ds = generate(ScenarioSpec(1, 1.0, 150, seed=12))
        tr, va = ds.subset(range(100)), ds.subset(range(100, 150))
        res = fit_r_grid(tr, va, FitConfig(engine="kernel"), [1.0, 1.05, 1.1])
        scores = [s for _, s in res.profile]
        assert max(scores) - min(scores) < 0.5

    def test_in_sample_init_needs_same_rows(self, s1_data):
        f = fit_em(s1_data.subset(range(100)), FitConfig(engine="kernel", max_iter=5))
        with pytest.raises(ValueError):
            fit_em(s1_data, FitConfig(engine="kernel", max_iter=5), init=f, init_in_sample=True)

    def test_empty_grid(self, s1_data):
        with pytest.raises(ValueError):
            fit_r_grid(s1_data, s1_data, FitConfig(engine="logistic"), [])

    @pytest.mark.slow
    def test_proportional_hazards_data_selects_zero(self):
        from sicure.data import train_valid_split

        wins = 0
        for seed in range(20):
            ds = generate(ScenarioSpec(1, 0.0, 400, seed=1000 + seed))
            tr, va = train_valid_split(ds, 0.667, seed)
            wins += fit_r_grid(tr, va, FitConfig(engine="logistic"), [0.0, 1.0, 2.0]).best_r == 0.0
        print(f"r=0 selected in {wins}/20 replicates")
        assert wins > 10
