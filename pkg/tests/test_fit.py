import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beta_irt.core import TAU_MAX, UnconstrainedParams, artanh, icc_expected, sigmoid, softplus_inv
from beta_irt.fit import (
    TAU_MIN,
    FitConfig,
    FitDivergedError,
    LossKind,
    ModelKind,
    UndefinedScoreError,
    analytic_gradients,
    clamp_tau,
    finite_diff_gradients,
    fit,
    init_with_priors,
    init_without_priors,
    loss,
    predict,
    pseudo_r2,
)
from beta_irt.synth import GenConfig, generate_responses, sample_true_params, streams


def random_instance(rng, beta3=False, max_size=10):
    M, N = rng.integers(1, max_size + 1, size=2)
    p = rng.uniform(0.02, 0.98, size=(M, N))
    t, d = rng.uniform(-3, 3, M), rng.uniform(-3, 3, N)
    if beta3:
        return p, UnconstrainedParams(t, d, a=rng.uniform(-3, 3, N))
    return p, UnconstrainedParams(t, d, o=rng.uniform(-2, 2, N), b=rng.uniform(-2, 2, N))


def rel_err(ga, gf):
    scale = np.maximum(np.maximum(np.abs(ga), np.abs(gf)), 1e-6)
    return float(np.max(np.abs(ga - gf) / scale))


@pytest.fixture(scope="module")
def generated():
    cfg = GenConfig(M=40, N=15, seed=5)
    rp, rr = streams(cfg.seed)
    truth = sample_true_params(cfg, rp)
    return truth, generate_responses(truth, cfg, rr)


class TestLoss:

    def test_full_ce_uniform(self):
        p = np.full((2, 2), 0.5)
        assert loss(p, p, LossKind.FULL_CE) == pytest.approx(4 * math.log(2), abs=1e-14)

    def test_one_sided_uniform(self):
        p = np.full((2, 2), 0.5)
        assert loss(p, p, LossKind.ONE_SIDED) == pytest.approx(2 * math.log(2), abs=1e-14)

    def test_default_is_full(self):
        p = np.full((2, 2), 0.5)
        assert loss(p, p) == loss(p, p, "full-ce")

    def test_minimised_at_observed(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.uniform(0.05, 0.95, (4, 6))
            bump = rng.choice([-0.01, 0.01], size=p.shape)
            assert loss(p, p) < loss(p, p + bump)

    def test_one_sided_has_no_interior_minimum(self):
        p = np.full((1, 1), 0.3)
        assert loss(p, np.full((1, 1), 0.99), "one-sided") < loss(p, p, "one-sided")

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss(np.full((2, 2), 0.5), np.full((2, 3), 0.5))


class TestPredict:

    def test_zero_discrimination(self):
        u = UnconstrainedParams(np.zeros(3), np.zeros(4), o=np.full(4, softplus_inv(1.0)),
                                b=np.zeros(4))
        np.testing.assert_array_equal(predict(u), 0.5)

    def test_single_cell(self):
        u = UnconstrainedParams(np.array([math.log(4)]), np.zeros(1), a=np.ones(1))
        assert predict(u)[0, 0] == pytest.approx(0.8, abs=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_open_interval(self, seed):
        _, u = random_instance(np.random.default_rng(seed))
        p_hat = predict(u)
        assert np.all((p_hat > 0) & (p_hat < 1))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_forward_map_shared(self, seed):
        _, u = random_instance(np.random.default_rng(seed), beta3=True)
        expect = icc_expected(sigmoid(u.t)[:, None], sigmoid(u.d)[None, :], u.a[None, :])
        assert np.max(np.abs(predict(u) - expect)) < 1e-12


class TestGradients:

    @pytest.mark.parametrize("kind", list(LossKind))
    @pytest.mark.parametrize("beta3", [False, True])
    def test_agree_with_finite_differences(self, kind, beta3):
        rng = np.random.default_rng(123)
        worst = 0.0
        for _ in range(20):
            p, u = random_instance(rng, beta3)
            worst = max(worst, rel_err(analytic_gradients(p, u, kind).to_vector(),
                                       finite_diff_gradients(p, u, 1e-5, kind).to_vector()))
        assert worst < 1e-5

    def test_five_by_seven(self):
        rng = np.random.default_rng(57)
        p = rng.uniform(0.05, 0.95, (5, 7))
        u = UnconstrainedParams(rng.normal(size=5), rng.normal(size=7),
                                o=rng.normal(size=7), b=rng.normal(size=7))
        assert rel_err(analytic_gradients(p, u).to_vector(),
                       finite_diff_gradients(p, u).to_vector()) < 1e-5

    @pytest.mark.parametrize("beta3", [False, True])
    def test_zero_at_perfect_fit(self, beta3):
        _, u = random_instance(np.random.default_rng(9), beta3)
        g = analytic_gradients(predict(u), u, LossKind.FULL_CE).to_vector()
        assert np.max(np.abs(g)) < 1e-8

    def test_single_cell_sign(self):
        p = np.array([[0.8]])
        u = UnconstrainedParams(np.zeros(1), np.zeros(1), a=np.ones(1))
        assert analytic_gradients(p, u).dH_dt[0] < 0
        assert finite_diff_gradients(p, u).dH_dt[0] < 0

    def test_block_shapes(self):
        p, u = random_instance(np.random.default_rng(2))
        g = analytic_gradients(p, u)
        M, N = p.shape
        assert g.dH_dt.shape == (M,) and g.dH_dd.shape == (N,)
        assert g.dH_do.shape == (N,) and g.dH_db.shape == (N,)
        assert g.dH_da is None

    def test_second_order_convergence(self):
        rng = np.random.default_rng(4)
        p, u = random_instance(rng)
        exact = analytic_gradients(p, u).dH_dt[0]
        errs = [abs(finite_diff_gradients(p, u, h).dH_dt[0] - exact) for h in (1e-2, 5e-3)]
        # halving h should cut the error by roughly four
        assert 3.0 < errs[0] / errs[1] < 5.0

    def test_finite_diff_deterministic(self):
        p, u = random_instance(np.random.default_rng(8))
        a = finite_diff_gradients(p, u).to_vector()
        b = finite_diff_gradients(p, u).to_vector()
        np.testing.assert_array_equal(a, b)

    def test_rejects_bad_step(self):
        p, u = random_instance(np.random.default_rng(8))
        with pytest.raises(ValueError):
            finite_diff_gradients(p, u, h=0.0)


class TestInitialisation:

    def test_uniform_matrix(self):
        u = init_with_priors(np.full((3, 4), 0.5))
        np.testing.assert_array_equal(u.t, 0.0)
        np.testing.assert_array_equal(u.d, 0.0)
        np.testing.assert_allclose(np.tanh(u.b), TAU_MIN, atol=1e-15)

    def test_row_means(self):
        p = np.array([[0.9, 0.9], [0.1, 0.1]])
        u = init_with_priors(p)
        np.testing.assert_allclose(u.t, [math.log(9), -math.log(9)], atol=1e-12)
        np.testing.assert_allclose(u.t, [2.1972, -2.1972], atol=1e-4)

    def test_column_means(self):
        p = np.array([[0.9, 0.2], [0.7, 0.4]])
        u = init_with_priors(p)
        # delta = 1 - column mean
        np.testing.assert_allclose(sigmoid(u.d), [0.2, 0.7], atol=1e-12)

    def test_positive_correlation(self):
        p = np.array([[0.9, 0.2, 0.5], [0.5, 0.5, 0.5], [0.1, 0.8, 0.5]])
        b = init_with_priors(p).b
        # column 0 follows row means, column 1 opposes them
        assert b[0] > 0 and b[1] < 0

    def test_magnitude_starts_at_one(self):
        rng = np.random.default_rng(0)
        u = init_with_priors(rng.uniform(0.1, 0.9, (6, 5)))
        np.testing.assert_allclose(np.log1p(np.exp(u.o)), 1.0, atol=1e-12)

    def test_clamp_tau(self):
        out = clamp_tau([np.nan, 0.0, 0.01, -0.01, 1.0, -1.0, 0.3])
        np.testing.assert_array_equal(
            out, [TAU_MIN, TAU_MIN, TAU_MIN, -TAU_MIN, TAU_MAX, -TAU_MAX, 0.3])

    def test_perfectly_correlated_column_is_finite(self):
        p = np.array([[0.2, 0.3], [0.8, 0.9]])
        assert np.all(np.isfinite(init_with_priors(p).b))

    def test_random_start_deterministic(self):
        a = init_without_priors((5, 4), 11)
        b = init_without_priors((5, 4), 11)
        np.testing.assert_array_equal(a.to_vector(), b.to_vector())
        c = init_without_priors((5, 4), 12)
        assert not np.array_equal(a.t, c.t)

    def test_random_start_magnitude(self):
        u = init_without_priors((5, 4), 0)
        np.testing.assert_allclose(np.log1p(np.exp(u.o)), 1.0, atol=1e-10)
        assert np.all(np.tanh(u.b) > 0)

    def test_baseline_start(self):
        u = init_without_priors((5, 4), 0, single_discrimination=True)
        np.testing.assert_array_equal(u.a, 1.0)

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            init_without_priors((0, 3), 0)


class TestFitConfig:

    def test_defaults(self):
        c = FitConfig()
        assert (c.learning_rate, c.n_epochs, c.n_inits, c.tol) == (1.0, 10000, 1000, 1e-8)
        assert c.loss_kind is LossKind.FULL_CE
        assert c.freeze_tau is True

    def test_freeze_default_per_model(self):
        assert FitConfig(model_kind="beta4-nopriors").freeze_tau is False
        assert FitConfig(model_kind="beta3").freeze_tau is False
        assert FitConfig(model_kind="beta4", freeze_tau=False).freeze_tau is False

    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": 0}, {"n_epochs": 0}, {"n_inits": 20, "n_epochs": 10},
        {"n_inits": -1}, {"tol": -1e-3}, {"model_kind": "beta5"}, {"reduction": "max"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            FitConfig(**kwargs)


class TestFit:

    def test_single_cell(self):
        p = np.array([[0.8]])
        init = UnconstrainedParams(np.zeros(1), np.zeros(1), o=np.full(1, softplus_inv(1.0)),
                                   b=np.full(1, artanh(TAU_MAX)))
        cfg = FitConfig(n_epochs=10000, n_inits=10000, tol=0.0)
        res = fit(p, cfg, init=init)
        assert res.params.omega[0] == pytest.approx(1.0, abs=1e-12)
        assert icc_expected(res.params.theta[0], res.params.delta[0], 1.0) == pytest.approx(
            0.8, abs=1e-3)

    @pytest.mark.parametrize("kind", ["beta4", "beta4-nopriors"])
    def test_phase_discipline(self, generated, kind):
        _, p = generated
        full = FitConfig(n_epochs=60, n_inits=30, tol=0.0, model_kind=kind)
        frozen = FitConfig(n_epochs=30, n_inits=30, tol=0.0, model_kind=kind)
        from beta_irt.fit import initial_params
        from beta_irt.core import clamp_responses
        u0 = initial_params(clamp_responses(p), full)
        mid = fit(p, frozen).raw
        np.testing.assert_array_equal(mid.o, u0.o)
        np.testing.assert_array_equal(mid.b, u0.b)
        end = fit(p, full).raw
        assert not np.array_equal(end.o, u0.o)
        if kind == "beta4":
            np.testing.assert_array_equal(end.b, u0.b)
        else:
            assert not np.array_equal(end.b, u0.b)

    def test_baseline_discrimination_frozen_then_free(self, generated):
        _, p = generated
        mid = fit(p, FitConfig(n_epochs=20, n_inits=20, tol=0.0, model_kind="beta3")).raw
        np.testing.assert_array_equal(mid.a, 1.0)
        end = fit(p, FitConfig(n_epochs=40, n_inits=20, tol=0.0, model_kind="beta3")).raw
        assert not np.array_equal(end.a, 1.0)

    @pytest.mark.parametrize("kind", list(ModelKind))
    def test_descent_trend(self, generated, kind):
        _, p = generated
        n_inits = 100
        res = fit(p, FitConfig(n_epochs=n_inits + 501, n_inits=n_inits, tol=0.0,
                               model_kind=kind))
        losses = res.losses
        assert losses[n_inits + 500] < losses[n_inits]
        assert losses[n_inits] <= losses[0]

    def test_deterministic(self, generated):
        _, p = generated
        cfg = FitConfig(n_epochs=200, n_inits=50, model_kind="beta4-nopriors", seed=3)
        a, b = fit(p, cfg), fit(p, cfg)
        np.testing.assert_array_equal(a.raw.to_vector(), b.raw.to_vector())
        assert a.loss_trace == b.loss_trace
        assert a.pseudo_r2 == b.pseudo_r2

    def test_pseudo_r2_matches_predictions(self, generated):
        _, p = generated
        res = fit(p, FitConfig(n_epochs=300, n_inits=50))
        assert abs(pseudo_r2(p, res.predicted) - res.pseudo_r2) < 1e-10
        assert res.pseudo_r2 <= 1.0

    def test_early_stop(self, generated):
        _, p = generated
        res = fit(p, FitConfig(n_epochs=5000, n_inits=10, tol=1e-3))
        assert res.converged_at is not None
        assert len(res.loss_trace) == res.converged_at + 1
        assert abs(res.losses[-1] - res.losses[-2]) < 1e-3

    def test_no_early_stop_during_frozen_phase(self, generated):
        _, p = generated
        res = fit(p, FitConfig(n_epochs=200, n_inits=150, tol=1.0))
        assert res.converged_at == 151

    def test_recovers_generated_data(self, generated):
        truth, p = generated
        res = fit(p, FitConfig(n_epochs=2000, n_inits=200))
        assert res.pseudo_r2 > 0.8
        assert np.corrcoef(truth.theta, res.params.theta)[0, 1] > 0.9

    def test_init_mismatch(self, generated):
        _, p = generated
        init = init_without_priors(p.shape, 0, single_discrimination=True)
        with pytest.raises(ValueError):
            fit(p, FitConfig(), init=init)

    def test_divergence(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.1, 0.9, (20, 20))
        cfg = FitConfig(learning_rate=1e308, n_epochs=50, n_inits=0, reduction="sum",
                        model_kind="beta3")
        with pytest.raises(FitDivergedError) as info:
            fit(p, cfg)
        assert info.value.epoch is not None
        assert np.all(np.isfinite(info.value.last_state.to_vector()))


class TestPseudoR2:

    def test_perfect(self):
        p = np.array([[0.2, 0.8], [0.4, 0.6]])
        assert pseudo_r2(p, p) == 1.0

    def test_grand_mean(self):
        p = np.array([[0.2, 0.8], [0.4, 0.7]])
        assert pseudo_r2(p, np.full_like(p, p.mean())) == 0.0

    def test_worked_example(self):
        # u = 0.01 + 0.01, v = 0.09 + 0.09
        r2 = pseudo_r2(np.array([[0.2, 0.8]]), np.array([[0.3, 0.7]]))
        assert abs(r2 - 8 / 9) < 1e-12

    def test_constant_observed(self):
        with pytest.raises(UndefinedScoreError):
            pseudo_r2(np.full((2, 2), 0.4), np.full((2, 2), 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pseudo_r2(np.zeros((2, 2)), np.zeros((2, 1)))
