import math

import numpy as np
import pytest
from conftest import random_spd
from hypothesis import given, settings
from hypothesis import strategies as st

from kfac_ws import kfac, net, tasks, train
from kfac_ws.losses import GaussianLoss


def ident(p_in, p_out):
    return kfac.KroneckerFactors(np.eye(p_in), np.eye(p_out), kfac.EXPAND)


def fit_and_select(task, delta=1.0, rounds=30, flavour="expand"):
    """Alternate the exact ridge fit with one selection event at the fitted weights."""
    for _ in range(rounds):
        model = task.make_model(task.map_weights(delta))
        factors = train.laplace_factors(model, task.batch, flavour)
        delta = float(train.marglik_select_decay(model, task.batch, factors, [delta]).deltas[0])
    return delta


def paired_task(X, y):
    return tasks.LinearGaussianTask(X, y, 1.0, net.Batch(X[:, None, :], y[:, None, None]))


class TestSchedule:
    def test_constant(self):
        assert all(train.lr_schedule("constant", t, 0.3) == 0.3 for t in range(50))

    def test_warmup_midpoint(self):
        assert train.lr_schedule("constant", 5, 0.2, warmup=10) == pytest.approx(0.1)
        assert train.lr_schedule("cosine", 0, 0.2, warmup=10, total=100) == 0.0

    def test_cosine_closed_form(self):
        T = 100
        for t in (0, 17, 50, 83, 100, 150):
            p = min(t / T, 1.0)
            assert train.lr_schedule("cosine", t, 0.4, total=T) == pytest.approx(0.4 * 0.5 * (1 + math.cos(math.pi * p)))
        assert train.lr_schedule("cosine", 50, 1.0, total=100) == pytest.approx(0.5)

    def test_cosine_after_warmup_with_floor(self):
        got = train.lr_schedule("cosine", 55, 1.0, warmup=10, total=100, end_factor=0.1)
        assert got == pytest.approx(0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * 0.5)))

    def test_polynomial(self):
        assert train.lr_schedule("polynomial", 25, 2.0, total=100, power=2.0) == pytest.approx(2.0 * 0.75**2)
        assert train.lr_schedule("polynomial", 100, 2.0, total=100) == 0.0

    @given(st.sampled_from(train.SCHEDULES), st.integers(0, 500), st.integers(0, 50))
    def test_deterministic_and_bounded(self, kind, t, warmup):
        a = train.lr_schedule(kind, t, 0.7, warmup, 300, 0.05, 1.5)
        assert a == train.lr_schedule(kind, t, 0.7, warmup, 300, 0.05, 1.5)
        assert 0.0 <= a <= 0.7

    def test_errors(self):
        with pytest.raises(ValueError):
            train.lr_schedule("constant", -1, 0.1)
        with pytest.raises(ValueError):
            train.lr_schedule("step", 0, 0.1)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(lr=0), dict(damping=-1), dict(factor_interval=0),
                                    dict(precond_interval=0), dict(ema_decay=1.0), dict(schedule="x"),
                                    dict(flavour="x"), dict(curvature="x"), dict(mc_samples=0)])
    def test_invalid(self, kw):
        with pytest.raises(net.ConfigurationError):
            train.OptimizerConfig(**kw)


class TestStep:
    def test_identity_factors_is_gd(self, rng):
        W, G = [rng.standard_normal((2, 3))], [rng.standard_normal((2, 3))]
        cfg = train.OptimizerConfig(lr=0.3, damping=0.0)
        np.testing.assert_allclose(train.step(W, G, [ident(3, 2)], cfg)[0], W[0] - 0.3 * G[0], atol=1e-15)
        gd = train.OptimizerConfig(lr=0.3, flavour="gd")
        np.testing.assert_array_equal(train.step(W, G, None, gd)[0], W[0] - 0.3 * G[0])

    @pytest.mark.parametrize("R", [1, 3])
    def test_newton_step_on_quadratic(self, rng, R):
        model = net.ModelSpec([net.DenseWS.init(rng, 4, 3)], GaussianLoss(random_spd(rng, 3)))
        X = rng.standard_normal((6, R, 4))
        batch = net.Batch(X, rng.standard_normal((6, R, 3)))
        _, grads, _, tape = net.loss_and_grads(model, batch)
        factors = train.scale_to_mean(kfac.compute_factors(tape, kfac.ggn_backprops(model, tape), "expand"), 6)
        cfg = train.OptimizerConfig(lr=1.0, damping=0.0)
        (W,) = train.step(model.get_weights(), grads, factors, cfg)
        Xf, Yf = X.reshape(-1, 4), batch.labels.reshape(-1, 3)
        W_star = np.linalg.lstsq(Xf, Yf, rcond=None)[0].T
        np.testing.assert_allclose(W, W_star, rtol=0, atol=1e-10)

    def test_stale_factors(self, rng):
        W, G = [np.zeros((2, 2))], [np.ones((2, 2))]
        cfg = train.OptimizerConfig(factor_interval=2)
        train.step(W, G, [ident(2, 2)], cfg, factors_age=1)
        with pytest.raises(train.StaleFactorsError):
            train.step(W, G, [ident(2, 2)], cfg, factors_age=2)

    def test_schedule_applies(self, rng):
        W, G = [np.zeros((1, 1))], [np.ones((1, 1))]
        cfg = train.OptimizerConfig(lr=1.0, warmup=4, flavour="gd")
        assert train.step(W, G, None, cfg, t=1)[0][0, 0] == -0.25


class TestTrainer:
    def test_kfac_beats_tuned_gd_on_deep_linear(self):
        def run(flavour, lrs):
            task = tasks.deep_linear_regression(np.random.default_rng(0), np.random.default_rng(1))
            cfg = train.OptimizerConfig(damping=1e-2, flavour=flavour, curvature="mc")
            return train.tune_lr(task.make_model, task.batch, cfg, lrs, 1000, task.target,
                                 lambda: np.random.default_rng(2))

        kfac_res = run("expand", [0.1, 0.3, 1.0])
        gd_res = run("gd", [0.03, 0.1, 0.3, 1.0])
        assert kfac_res.steps_to_target is not None
        gd_steps = np.inf if gd_res is None or gd_res.steps_to_target is None else gd_res.steps_to_target
        assert kfac_res.steps_to_target < gd_steps

    def test_intervals_and_ema(self):
        task = tasks.deep_linear_regression(np.random.default_rng(0), np.random.default_rng(1), N=8)
        cfg = train.OptimizerConfig(lr=0.05, damping=0.1, factor_interval=3, precond_interval=3, curvature="ggn",
                                    ema_decay=0.5)
        tr = train.Trainer(task.make_model(), cfg, np.random.default_rng(3))
        for _ in range(7):
            tr.train_step(task.batch)
        assert tr.factors[0].ema_steps == 3  # refreshed at steps 0, 3, 6
        assert tr.age == 1

    def test_run_stops_at_target(self):
        task = tasks.deep_linear_regression(np.random.default_rng(0), np.random.default_rng(1))
        cfg = train.OptimizerConfig(lr=0.5, damping=1e-2, curvature="ggn")
        res = train.Trainer(task.make_model(), cfg).run(task.batch, 500, task.target)
        assert res.steps_to_target == len(res.losses) and res.losses[-1] <= task.target

    def test_divergence_is_reported(self):
        task = tasks.deep_linear_regression(np.random.default_rng(0), np.random.default_rng(1), N=8)
        cfg = train.OptimizerConfig(lr=1e3, flavour="gd")
        with np.errstate(all="ignore"):
            res = train.Trainer(task.make_model(), cfg).run(task.batch, 200)
        assert res.diverged and res.steps_to_target is None

    def test_weight_decay_objective(self, rng):
        model = net.ModelSpec([net.DenseWS.init(rng, 3, 2)], GaussianLoss(np.eye(2)))
        batch = net.Batch(rng.standard_normal((4, 1, 3)), rng.standard_normal((4, 1, 2)))
        tr = train.Trainer(model, train.OptimizerConfig(), deltas=[2.0])
        loss, grads, _ = tr.objective(batch)
        W = model.get_weights()[0]
        base, g0, _, _ = net.loss_and_grads(model, batch)
        assert loss == pytest.approx(base + 2.0 / 8 * np.sum(W**2))
        np.testing.assert_allclose(grads[0], g0[0] + 2.0 / 4 * W)
        assert tr.loss(batch) == pytest.approx(loss)


class TestLogDet:
    def test_identity_factors(self):
        eig = train.factor_eigs([ident(2, 2)])[0]
        assert train.kron_logdet(eig, 1.0) == pytest.approx(4 * math.log(2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4), st.floats(1e-3, 10))
    def test_matches_dense(self, seed, p_in, p_out, delta):
        rng = np.random.default_rng(seed)
        f = kfac.KroneckerFactors(random_spd(rng, p_in, 0.0), random_spd(rng, p_out, 0.0), kfac.EXPAND)
        dense = np.linalg.slogdet(kfac.kron_assemble(f) + delta * np.eye(p_in * p_out))[1]
        assert abs(train.kron_logdet(train.factor_eigs([f])[0], delta) - dense) < 1e-8

    def test_penalty_decreases_in_delta(self, rng):
        f = kfac.KroneckerFactors(random_spd(rng, 3), random_spd(rng, 2), kfac.EXPAND)
        eig = train.factor_eigs([f])[0]
        pen = [-0.5 * train.kron_logdet(eig, d) for d in np.logspace(-3, 3, 13)]
        assert np.all(np.diff(pen) < 0)

    def test_nonpositive_delta(self):
        with pytest.raises(ValueError):
            train.kron_logdet(train.factor_eigs([ident(1, 1)])[0], 0.0)


class TestMarglik:
    def test_laplace_equals_evidence_at_map(self):
        task = tasks.linear_gaussian(np.random.default_rng(0))
        for delta in (0.1, 1.0, 10.0):
            model = task.make_model(task.map_weights(delta))
            for flavour in ("expand", "reduce"):
                factors = train.laplace_factors(model, task.batch, flavour)
                got = train.laplace_log_marglik(model, task.batch, factors, [delta])
                assert got == pytest.approx(task.log_evidence(delta), rel=1e-9)

    def test_nonpositive_delta(self):
        task = tasks.linear_gaussian(np.random.default_rng(0))
        model = task.make_model()
        factors = train.laplace_factors(model, task.batch)
        with pytest.raises(ValueError):
            train.laplace_log_marglik(model, task.batch, factors, [0.0])
        with pytest.raises(ValueError):
            train.marglik_select_decay(model, task.batch, factors, [-1.0])

    @pytest.mark.parametrize("seed", range(3))
    def test_selection_matches_closed_form(self, seed):
        task = tasks.linear_gaussian(np.random.default_rng(seed))
        opt = task.optimal_delta()
        for flavour in ("expand", "reduce"):
            assert fit_and_select(task, 1.0, flavour=flavour) == pytest.approx(opt, rel=0.1)

    def test_fixed_point(self):
        task = tasks.linear_gaussian(np.random.default_rng(1))
        opt = task.optimal_delta()
        for rounds in (1, 3, 10):
            assert fit_and_select(task, opt, rounds) == pytest.approx(opt, rel=0.01)

    @pytest.mark.parametrize("seed", range(5))
    def test_noisy_labels_select_larger_decay(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((20, 30))
        w, e = rng.standard_normal(30), rng.standard_normal(20)
        clean = paired_task(X, X @ w + 0.1 * e)
        noisy = paired_task(X, 0.2 * X @ w + e)
        assert fit_and_select(noisy) > fit_and_select(clean)

    def test_ascent_is_monotone(self, rng):
        task = tasks.linear_gaussian(rng, N=30, D=6)
        model = task.make_model(task.map_weights(0.5))
        factors = train.laplace_factors(model, task.batch)
        for d0 in (1e-4, 1e-1, 1.0, 1e3):
            state = train.marglik_select_decay(model, task.batch, factors, [d0], steps=10)
            values = [v for _, v in state.history]
            assert np.all(np.diff(values) >= 0)
            for d, v in state.history:
                assert v == pytest.approx(train.laplace_log_marglik(model, task.batch, factors, d), rel=1e-12)

    def test_multi_unit_ascent(self, rng):
        model = tasks.deep_linear_model(rng, [3, 4, 2])
        batch = net.Batch(rng.standard_normal((10, 2, 3)), rng.standard_normal((10, 2, 2)))
        factors = train.laplace_factors(model, batch)
        state = train.marglik_select_decay(model, batch, factors, [1.0, 1.0])
        assert state.deltas.shape == (2,) and np.all(state.deltas > 0)
        assert state.log_marglik >= state.history[0][1]

    def test_non_finite_aborts_and_keeps_delta(self, rng):
        task = tasks.linear_gaussian(rng)
        model = task.make_model(np.full(task.X.shape[1], 1e200))
        factors = train.laplace_factors(task.make_model(), task.batch)
        with np.errstate(all="ignore"):
            state = train.marglik_select_decay(model, task.batch, factors, [0.7])
        assert state.aborted
        np.testing.assert_array_equal(state.deltas, [0.7])

    def test_state_validates(self):
        with pytest.raises(ValueError):
            train.LaplaceState([0.0], [], 0.0)
