import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vish.errors import DiagnosticsError, InvalidArgumentError
from vish.kernels import KernelSpec
from vish.svgp import Likelihood, VariationalState, VishModule, build_model, predict_f
from vish.train import (
    FitTrace,
    TrainConfig,
    WarmStart,
    auc,
    evaluate_model,
    exact_gpr_truncated,
    finite_diff_check,
    fit,
    gradient_check,
    mse,
    nlpd_bernoulli,
    nlpd_gaussian,
)

MATERN = KernelSpec("matern", lengthscale=0.15, nu=1.5)


def regression_data(rng, n=60):
    X = rng.uniform(-2, 2, (n, 1))
    return X, np.sin(2 * X[:, 0]) + 0.1 * rng.standard_normal(n)


def random_state(rng, M):
    L = np.tril(rng.standard_normal((M, M)) * 0.1, -1) + np.diag(rng.uniform(0.5, 1.5, M))
    return VariationalState(rng.standard_normal(M), L)


class TestFit:
    def test_zero_iterations(self, rng):
        X, y = regression_data(rng)
        m = build_model(1, KernelSpec("arc_cosine"), 4, Likelihood("gaussian", 0.3))
        out, trace = fit(m, X, y, TrainConfig(iters=0))
        assert len(trace) == 1 and trace.steps == [0]
        np.testing.assert_array_equal(out.variational.mean, m.variational.mean)
        np.testing.assert_array_equal(out.variational.cov_factor, m.variational.cov_factor)
        assert out.kernel == m.kernel and out.likelihood == m.likelihood

    def test_noise_only_model_learns_sample_variance(self, rng):
        y = rng.normal(0, 1.7, 400)
        y -= y.mean()
        X = rng.standard_normal((400, 1))
        m = build_model(1, MATERN, 0, Likelihood("gaussian", 1.0))
        out, _ = fit(m, X, y, TrainConfig(optimizer="lbfgs", collapsed=True, max_iters=200))
        assert out.likelihood.noise == pytest.approx(np.var(y), rel=0.05)

    @pytest.mark.parametrize("optimizer", ["adam", "lbfgs"])
    def test_regression_improves(self, rng, optimizer):
        X, y = regression_data(rng)
        m = build_model(1, KernelSpec("arc_cosine"), 10, Likelihood("gaussian", 0.5))
        cfg = TrainConfig(optimizer=optimizer, iters=300, max_iters=100, eval_every=25)
        out, trace = fit(m, X, y, cfg)
        assert trace.elbo[-1] > trace.elbo[0]
        assert mse(predict_f(out, X)[0], y) < mse(np.zeros_like(y), y)
        assert np.all(np.diff(trace.steps) > 0)

    def test_collapsed_fit_sets_optimal_state(self, rng):
        from vish.svgp import collapsed_gaussian_fit

        X, y = regression_data(rng)
        m = build_model(1, MATERN, 5, Likelihood("gaussian", 0.3))
        out, trace = fit(m, X, y, TrainConfig(optimizer="lbfgs", collapsed=True, max_iters=50))
        state, bound = collapsed_gaussian_fit(out, X, y)
        np.testing.assert_allclose(out.variational.mean, state.mean, rtol=1e-10, atol=1e-12)
        assert trace.elbo[-1] == pytest.approx(bound, rel=1e-9)

    def test_seeded_determinism(self, rng):
        X, y = regression_data(rng, 80)
        m = build_model(1, MATERN, 4, Likelihood("gaussian", 0.3))
        cfg = TrainConfig(iters=40, batch_size=16, seed=5, eval_every=10)
        a = fit(m, X, y, cfg)[1]
        b = fit(m, X, y, cfg)[1]
        assert a.elbo == b.elbo
        c = fit(m, X, y, TrainConfig(iters=40, batch_size=16, seed=6, eval_every=10))[1]
        assert c.elbo != a.elbo

    def test_trainable_flags(self, rng):
        X, y = regression_data(rng)
        m = build_model(1, MATERN, 3, Likelihood("gaussian", 0.3))
        frozen = {k: False for k in ("variance", "lengthscale", "weights", "bias", "noise")}
        out, _ = fit(m, X, y, TrainConfig(iters=20, trainable=frozen))
        assert out.kernel == m.kernel
        assert out.mapping.bias == m.mapping.bias
        assert not np.array_equal(out.variational.mean, m.variational.mean)

    def test_warm_start_phase(self, rng):
        X, y = regression_data(rng, 100)
        m = build_model(1, MATERN, 3, Likelihood("gaussian", 0.3))
        out, trace = fit(m, X, y, TrainConfig(iters=10, warm_start=WarmStart(subset_size=20, iters=15)))
        assert trace.steps[0] == 0 and trace.steps[1] == 16
        assert trace.elbo[-1] > trace.elbo[0]

    def test_bernoulli_training(self, rng):
        X = rng.standard_normal((80, 2))
        y = (X[:, 0] + 0.3 * X[:, 1] > 0).astype(float)
        m = build_model(2, MATERN, 4, Likelihood("bernoulli"))
        out, trace = fit(m, X, y, TrainConfig(iters=150, step=0.05, eval_every=50), X_test=X, y_test=y)
        assert trace.elbo[-1] > trace.elbo[0]
        assert trace.metrics[-1]["auc"] > 0.9

    def test_non_finite_mid_run_aborts_with_trace(self, rng, monkeypatch):
        X, y = regression_data(rng)
        m = build_model(1, MATERN, 2, Likelihood("gaussian", 0.3))
        original = VishModule.elbo
        calls = {"n": 0}

        def flaky(self, *args):
            calls["n"] += 1
            value = original(self, *args)
            return value * math.nan if calls["n"] > 6 else value

        monkeypatch.setattr(VishModule, "elbo", flaky)
        with pytest.raises(DiagnosticsError) as info:
            fit(m, X, y, TrainConfig(iters=20, eval_every=1))
        assert len(info.value.trace) >= 2
        assert info.value.model is not None

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(optimizer="sgd")
        with pytest.raises(InvalidArgumentError):
            TrainConfig(step=0.0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(batch_size=0)
        with pytest.raises(InvalidArgumentError):
            TrainConfig(trainable={"gamma": True})
        with pytest.raises(InvalidArgumentError):
            TrainConfig.from_dict({"momentum": 0.9})
        cfg = TrainConfig(warm_start=WarmStart(10, 5))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_collapsed_needs_gaussian(self, rng):
        m = build_model(1, MATERN, 2, Likelihood("bernoulli"))
        with pytest.raises(InvalidArgumentError):
            fit(m, np.zeros((2, 1)), np.zeros(2), TrainConfig(collapsed=True))


class TestTrace:
    def test_strictly_increasing(self):
        t = FitTrace()
        t.record(0, -1.0, 0.0)
        with pytest.raises(InvalidArgumentError):
            t.record(0, -0.5, 0.1)

    def test_csv(self, tmp_path):
        t = FitTrace()
        t.record(0, -3.25, 0.0, {"mse": 0.5})
        t.record(5, -1.0, 0.1, {"mse": 0.25})
        path = tmp_path / "trace.csv"
        t.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,elbo,seconds,mse"
        assert lines[1] == "0,-3.25,0.0,0.5"


class TestMetrics:
    def test_mse_perfect(self):
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_nlpd_standard_normal(self):
        assert nlpd_gaussian([0.0], [1.0], 0.0, [0.0]) == pytest.approx(0.5 * math.log(2 * math.pi))
        assert nlpd_gaussian([0.0], [0.5], 0.5, [0.0]) == pytest.approx(0.9189385332046727)

    def test_nlpd_bernoulli(self):
        assert nlpd_bernoulli([0.5, 0.5], [0, 1]) == pytest.approx(math.log(2))
        assert nlpd_bernoulli([1.0, 0.0], [1, 0]) == 0.0

    @given(n=st.integers(1, 30))
    def test_uninformative_auc(self, n):
        y = np.array([0, 1] * n, dtype=float)
        assert auc(np.full(2 * n, 0.5), y) == 0.5

    def test_auc_known_values(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
        assert auc([0.1, 0.5, 0.5, 0.9], [0, 1, 0, 1]) == pytest.approx(0.875)

    @given(p=arrays(float, 20, elements=st.floats(0.01, 0.99)), labels=arrays(bool, 20))
    def test_auc_invariant_to_monotone_transform(self, p, labels):
        y = labels.astype(float)
        if y.sum() in (0, 20):
            return
        assert auc(p**3, y) == pytest.approx(auc(p, y), abs=1e-12)

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            mse([], [])
        with pytest.raises(InvalidArgumentError):
            mse([1.0], [1.0, 2.0])
        with pytest.raises(InvalidArgumentError):
            auc([1.5], [1])
        with pytest.raises(InvalidArgumentError):
            auc([0.5, 0.5], [1, 1])
        with pytest.raises(InvalidArgumentError):
            nlpd_bernoulli([0.5], [2])


class TestGradientCheck:
    def test_quadratic(self, rng):
        # central differences carry no truncation error here, so the largest step minimises rounding
        A = rng.standard_normal((6, 6))
        A = A @ A.T
        b = rng.standard_normal(6)
        err = gradient_check(lambda x: 0.5 * x @ A @ x + b @ x, lambda x: A @ x + b, rng.standard_normal(6), 1e-3)
        assert err <= 1e-10

    def test_detects_wrong_gradient(self, rng):
        err = gradient_check(lambda x: np.sum(x**2), lambda x: 3 * x, np.ones(3), 1e-5)
        assert err > 0.4

    def test_step_range(self):
        with pytest.raises(InvalidArgumentError):
            gradient_check(np.sum, np.ones_like, np.ones(2), 1e-2)

    def test_gaussian_model(self, rng):
        m = build_model(2, MATERN, 2, Likelihood("gaussian", 0.2))
        m = m.replace(variational=random_state(rng, m.num_features))
        X, y = rng.standard_normal((20, 2)), rng.standard_normal(20)
        assert finite_diff_check(m, X, y, 1e-5) <= 1e-4

    @pytest.mark.parametrize("link", ["probit", "logit"])
    def test_bernoulli_model(self, rng, link):
        m = build_model(2, MATERN, 2, Likelihood("bernoulli", link=link, quadrature=30))
        m = m.replace(variational=random_state(rng, m.num_features))
        X = rng.standard_normal((20, 2))
        y = (X[:, 0] > 0).astype(float)
        assert finite_diff_check(m, X, y, 1e-5) <= 1e-4


class TestDenseOracle:
    def test_huge_noise_gives_zero_mean(self, rng):
        m = build_model(1, MATERN, 3)
        X, y = regression_data(rng, 10)
        mean_fn, _ = exact_gpr_truncated(m.spectrum, m.mapping, X, y, 1e14)
        assert np.max(np.abs(mean_fn(X))) < 1e-12

    def test_single_point(self):
        m = build_model(1, KernelSpec("arc_cosine"), 6)
        X = np.array([[0.7]])
        mean_fn, var_fn = exact_gpr_truncated(m.spectrum, m.mapping, X, [2.0], 0.3)
        _, r = __import__("vish.sphere_map", fromlist=["x"]).project_batch(m.mapping, X)
        k = r[0] ** 2 * m.spectrum.prior_variance()
        assert mean_fn(X)[0] == pytest.approx(k / (k + 0.3) * 2.0, rel=1e-12)
        assert var_fn(X)[0] == pytest.approx(k - k**2 / (k + 0.3), rel=1e-10)

    def test_oracle_beats_prior_on_held_out(self, rng):
        m = build_model(1, MATERN, 8, Likelihood("gaussian", 0.01))
        X, y = regression_data(rng, 80)
        Xs, ys = regression_data(rng, 40)
        mean_fn, var_fn = exact_gpr_truncated(m.spectrum, m.mapping, X, y, 0.01)
        post = nlpd_gaussian(mean_fn(Xs), var_fn(Xs), 0.01, ys)
        prior = nlpd_gaussian(np.zeros(40), np.full(40, m.spectrum.prior_variance()), 0.01, ys)
        assert post < prior

    def test_size_limit(self):
        m = build_model(1, MATERN, 1)
        with pytest.raises(InvalidArgumentError):
            exact_gpr_truncated(m.spectrum, m.mapping, np.zeros((2001, 1)), np.zeros(2001), 1.0)


def test_evaluate_model_keys(rng):
    X, y = regression_data(rng, 20)
    m = build_model(1, MATERN, 2, Likelihood("gaussian", 0.5))
    assert set(evaluate_model(m, X, y)) == {"mse", "nlpd"}


def test_lbfgs_backs_off_from_unusable_trial_points():
    # noiseless target: the line search probes noise levels that underflow
    X = np.random.default_rng(0).uniform(-2, 2, (200, 1))
    y = np.sin(2 * X[:, 0])
    model = build_model(1, KernelSpec("arc_cosine"), 6, Likelihood("gaussian", 0.01))
    fitted, trace = fit(model, X, y, TrainConfig(optimizer="lbfgs", max_iters=200, collapsed=True))
    assert np.all(np.isfinite(trace.elbo))
    assert trace.elbo[-1] > trace.elbo[0]
    assert np.max(np.abs(predict_f(fitted, X)[0] - y)) < 1e-2
