"""Learner unit tests: update arithmetic, scheduling, convergence, estimator."""

import numpy as np
import pytest

from banditcontrol.bco import (
    BcomParams,
    DelayParams,
    bco_delay_step,
    bcoam_step,
    estimator_mean_check,
    run_bco_delay,
    run_bcoam,
    run_spherical_baseline,
)
from banditcontrol.bco import UpdateTrace, _init_state, _run_streams
from banditcontrol.geometry import EuclideanBall
from banditcontrol.losses import (
    AffineMemoryLoss,
    BcomInstanceConfig,
    Quadratic,
    make_synthetic_bcom_instance,
)


class FixedCoins:
    """Stands in for the Bernoulli stream: .random() yields preset values."""

    def __init__(self, values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


def quadratic_bowl_losses(target, horizon, gain=1.0):
    """f(z) = 1/2 |gain * z - target|^2, identical across time, m = 1."""
    d = target.size
    base = Quadratic(np.eye(d), -target, 0.5 * float(target @ target))
    f = AffineMemoryLoss(base, np.zeros(d), [gain * np.eye(d)], [np.eye(d)])
    return [f] * horizon


class TestStepArithmetic:
    def test_metric_update_rule(self):
        ball = EuclideanBall(np.zeros(2), 1.0)
        params = BcomParams(set_=ball, eta=0.1, m=1, alpha=1.0)
        rng = np.random.default_rng(0)
        state = _init_state(ball, 2, 1.0, rng, t0=1)
        h = 2.0 * np.eye(2)
        new, updated = bcoam_step(state, 0.5, h, params, FixedCoins([0.0]), rng)
        assert updated  # m = 1 always updates
        np.testing.assert_allclose(new.a_hat, 1.1 * np.eye(2), atol=1e-14)

    def test_gradient_estimate_value(self):
        ball = EuclideanBall(np.zeros(2), 1.0)
        params = BcomParams(set_=ball, eta=0.1, m=1, alpha=1.0)
        rng = np.random.default_rng(0)
        state = _init_state(ball, 2, 1.0, rng, t0=1)
        state.v = np.array([1.0, 0.0])  # force the direction; metric is I
        new, _ = bcoam_step(state, 3.0, np.zeros((2, 2)), params, FixedCoins([0.0]), rng)
        np.testing.assert_allclose(new.g_store[1], np.array([6.0, 0.0]), atol=1e-14)

    def test_zero_loss_freezes_o(self):
        ball = EuclideanBall(np.zeros(2), 1.0)
        params = BcomParams(set_=ball, eta=0.5, m=1, alpha=1.0)
        rng = np.random.default_rng(1)
        state = _init_state(ball, 2, 1.0, rng, t0=1)
        for _ in range(5):
            state, _ = bcoam_step(
                state, 0.0, np.eye(2), params, FixedCoins([0.0]), rng
            )
            np.testing.assert_allclose(state.o, np.zeros(2), atol=1e-14)

    def test_forced_coin_spacing(self):
        # b_{t-1} = 1 blocks an update at t even when b_t = 1
        ball = EuclideanBall(np.zeros(2), 1.0)
        params = BcomParams(set_=ball, eta=0.1, m=2, alpha=1.0)
        rng = np.random.default_rng(2)
        state = _init_state(ball, 2, 1.0, rng, t0=1)
        state.bernoulli_history = (True,)
        new, updated = bcoam_step(state, 1.0, np.eye(2), params, FixedCoins([0.0]), rng)
        assert not updated
        # with a clear history the same coin fires
        new.bernoulli_history = (False,)
        _, updated = bcoam_step(new, 1.0, np.eye(2), params, FixedCoins([0.0]), rng)
        assert updated

    def test_delay_step_warmup_then_update(self):
        ball = EuclideanBall(np.zeros(2), 1.0)
        params = DelayParams(set_=ball, eta=0.1, d0=2, alpha=1.0)
        rng = np.random.default_rng(3)
        state = _init_state(ball, 2, 1.0, rng, t0=1)
        o0 = state.o.copy()
        # t = 1: reference index 0, o frozen
        state, _ = bco_delay_step(state, 1.0, np.eye(2), params, rng)
        np.testing.assert_array_equal(state.o, o0)
        np.testing.assert_allclose(state.a_hat, 1.05 * np.eye(2), atol=1e-14)
        # t = 2: reference index 1 exists, o moves against stored estimate
        g1 = state.g_store[1].copy()
        a1 = state.a_store[1].copy()
        state, _ = bco_delay_step(state, 1.0, np.eye(2), params, rng)
        expect = ball.euclidean_project(o0 - 0.1 * np.linalg.solve(a1, g1))
        np.testing.assert_allclose(state.o, expect, atol=1e-9)


class TestScheduling:
    def test_update_frequency_matches_bernoulli_product(self):
        # gate fires iff b_t = 1 and the previous m-1 coins were 0
        ball = EuclideanBall(np.zeros(2), 1.0)
        m = 4
        params = BcomParams(set_=ball, eta=0.01, m=m, alpha=0.5)
        _, bern, sphere = _run_streams(123)
        state = _init_state(ball, 2, 1.0, sphere, t0=m)
        state.bernoulli_history = tuple(bool(bern.random() < 1.0 / m) for _ in range(m - 1))[::-1]
        horizon = 100_000
        hits = 0
        zeros = np.zeros((2, 2))
        for _ in range(horizon - m + 1):
            state, updated = bcoam_step(state, 0.0, zeros, params, bern, sphere)
            hits += updated
        steps = horizon - m + 1
        p = (1.0 / m) * (1.0 - 1.0 / m) ** (m - 1)
        sigma = np.sqrt(p * (1.0 - p) / steps)
        assert abs(hits / steps - p) <= 3.0 * sigma

    def test_trace_spacing_and_budget(self):
        cfg = BcomInstanceConfig(d=2, m=3, horizon=3000, seed=5)
        inst = make_synthetic_bcom_instance(cfg)
        res = run_bcoam(
            inst.losses, inst.set_, eta=1.0 / np.sqrt(3000), m=3,
            alpha=inst.certificates["alpha"], horizon=3000, seed=7,
        )
        gaps = np.diff(res.trace.update_times)
        assert gaps.min() >= 3
        assert res.trace.count() <= 3000 / 3

    def test_frozen_state_between_updates(self):
        cfg = BcomInstanceConfig(d=2, m=3, horizon=400, seed=9)
        inst = make_synthetic_bcom_instance(cfg)
        res = run_bcoam(
            inst.losses, inst.set_, eta=0.05, m=3, alpha=0.5, horizon=400, seed=11
        )
        for t in range(3, 400):
            if not res.updated[t - 1]:
                np.testing.assert_array_equal(res.decisions[t], res.decisions[t - 1])
                assert res.logdets[t - 1] == res.logdets[t - 2]

    def test_window_constant_at_update_times(self):
        cfg = BcomInstanceConfig(d=2, m=4, horizon=600, seed=13)
        inst = make_synthetic_bcom_instance(cfg)
        res = run_bcoam(
            inst.losses, inst.set_, eta=0.05, m=4, alpha=0.5, horizon=600, seed=13
        )
        assert res.trace.count() >= 5
        for t in res.trace.update_times:
            window = res.decisions[t - 4:t]
            for row in window[1:]:
                np.testing.assert_array_equal(row, window[0])

    def test_determinism(self):
        cfg = BcomInstanceConfig(d=2, m=2, horizon=300, seed=17)
        inst = make_synthetic_bcom_instance(cfg)
        a = run_bcoam(inst.losses, inst.set_, eta=0.05, m=2, alpha=0.5, horizon=300, seed=3)
        b = run_bcoam(inst.losses, inst.set_, eta=0.05, m=2, alpha=0.5, horizon=300, seed=3)
        np.testing.assert_array_equal(a.decisions, b.decisions)
        assert a.trace.update_times == b.trace.update_times
        np.testing.assert_array_equal(a.incurred, b.incurred)

    def test_baseline_shares_update_times(self):
        cfg = BcomInstanceConfig(d=2, m=3, horizon=900, seed=19)
        inst = make_synthetic_bcom_instance(cfg)
        newton = run_bcoam(
            inst.losses, inst.set_, eta=0.02, m=3, alpha=0.5, horizon=900, seed=21
        )
        sphere = run_spherical_baseline(
            inst.losses, inst.set_, eta=0.02, delta=0.5, m=3, horizon=900, seed=21
        )
        assert newton.trace.update_times == sphere.trace.update_times

    def test_baseline_delta_one_matches_initial_geometry(self):
        cfg = BcomInstanceConfig(d=2, m=2, horizon=50, seed=23)
        inst = make_synthetic_bcom_instance(cfg)
        newton = run_bcoam(
            inst.losses, inst.set_, eta=0.02, m=2, alpha=0.5, horizon=50, seed=5
        )
        sphere = run_spherical_baseline(
            inst.losses, inst.set_, eta=0.02, delta=1.0, m=2, horizon=50, seed=5
        )
        # before the first update both play center + v with the same stream
        np.testing.assert_allclose(newton.decisions[0], sphere.decisions[0], atol=1e-12)
        np.testing.assert_allclose(newton.decisions[1], sphere.decisions[1], atol=1e-12)

    def test_decorrelation_clocks(self):
        cfg = BcomInstanceConfig(d=2, m=3, horizon=800, seed=29)
        inst = make_synthetic_bcom_instance(cfg)
        res = run_bcoam(
            inst.losses, inst.set_, eta=0.02, m=3, alpha=0.5, horizon=800, seed=31
        )
        assert res.trace.count() >= 10
        for vc, oc in zip(res.trace.v_clocks, res.trace.o_clocks):
            assert vc > oc


class TestMetricInvariants:
    def test_monotone_and_bounded_growth(self):
        cfg = BcomInstanceConfig(d=3, m=3, horizon=1200, seed=37)
        inst = make_synthetic_bcom_instance(cfg)
        eta, alpha = 0.01, inst.certificates["alpha"]
        # m <= 2 / (eta alpha R_H) comfortably: 2 / (0.01 * 0.5 * 4) = 100
        assert 3 <= 2.0 / (eta * alpha * inst.certificates["r_h"])
        ball = inst.set_
        params = BcomParams(set_=ball, eta=eta, m=3, alpha=alpha)
        _, bern, sphere = _run_streams(41)
        state = _init_state(ball, 3, 1.0, sphere, t0=3)
        state.bernoulli_history = (False, False)
        history = [state.a_hat.copy()]
        window = [state.z] * 3
        for t in range(3, 1201):
            f = inst.losses[t - 1].eval(window)
            h = inst.losses[t - 1].hessian_t()
            state, updated = bcoam_step(state, f, h, params, bern, sphere)
            history.append(state.a_hat.copy())
            window = window[1:] + [state.z]
        for prev, cur in zip(history, history[1:]):
            assert float(np.linalg.eigvalsh(cur - prev)[0]) >= -1e-12
        lam0 = float(np.linalg.eigvalsh(history[0])[0])
        assert lam0 >= 1.0 - 1e-12
        for i in range(3, len(history)):
            ratio = np.linalg.eigvals(np.linalg.solve(history[i - 3], history[i]))
            assert float(np.max(ratio.real)) <= 2.0 + 1e-9

    def test_step_size_and_dual_norm_bounds(self):
        cfg = BcomInstanceConfig(d=3, m=3, horizon=2000, seed=43)
        inst = make_synthetic_bcom_instance(cfg)
        g_f = inst.certificates["g_f"]
        diam = inst.certificates["diameter"]
        eta = 0.05
        res = run_bcoam(
            inst.losses, inst.set_, eta=eta, m=3, alpha=0.5, horizon=2000, seed=47
        )
        # the bound's premise: observed values stay below G_f * D
        assert res.incurred.max() <= g_f * diam
        cap = 3.0 * g_f * diam
        for step in res.trace.step_norms:
            assert step <= eta * cap + 1e-9
        for dual in res.trace.dual_norms:
            assert dual <= cap + 1e-9


class TestConvergence:
    def test_memoryless_quadratic_run(self):
        target = np.array([0.3, -0.2])
        horizon = 2**13
        losses = quadratic_bowl_losses(target, horizon)
        ball = EuclideanBall(np.zeros(2), 1.0)
        eta = 1.0 / np.sqrt(horizon)
        res = run_bcoam(losses, ball, eta=eta, m=1, alpha=1.0, horizon=horizon, seed=51)
        dist = np.sum((res.decisions - target) ** 2, axis=1)
        half = horizon // 2
        assert dist[:half].mean() > dist[half:].mean()
        f_star = 0.0
        regret = res.incurred.sum() - f_star * horizon
        assert regret > 0.0
        assert regret < 0.05 * horizon  # o(T) at this horizon

        # full-information projected gradient on the same sequence as reference
        o = ball.center()
        gd_total = 0.0
        for _ in range(horizon):
            gd_total += 0.5 * float((o - target) @ (o - target))
            o = ball.euclidean_project(o - eta * (o - target))
        assert res.incurred.sum() >= gd_total

    def test_delay_runner_converges(self):
        target = np.array([0.4, 0.1])
        horizon = 2**12
        losses = quadratic_bowl_losses(target, horizon)
        ball = EuclideanBall(np.zeros(2), 1.0)
        res = run_bco_delay(
            losses, ball, eta=1.0 / np.sqrt(horizon), d0=2, alpha=1.0,
            horizon=horizon, seed=53,
        )
        dist = np.sum((res.decisions - target) ** 2, axis=1)
        half = horizon // 2
        assert dist[:half].mean() > dist[half:].mean()
        assert res.trace.min_gap() == 1
        # metric grows every step: logdet strictly increasing
        assert np.all(np.diff(res.logdets[: horizon // 4]) > 0)


class TestEstimatorMeanCheck:
    def test_quadratic_sphere_identity(self):
        base = Quadratic(np.eye(2), np.zeros(2), 0.0)
        f = AffineMemoryLoss(base, np.zeros(2), [np.eye(2)], [np.eye(2)])
        report = estimator_mean_check(
            f.unary(), np.array([1.0, 0.0]), np.eye(2), 10**5,
            np.random.default_rng(57),
        )
        assert report.within_band
        assert np.all(np.abs(report.empirical_mean - np.array([1.0, 0.0]))
                      <= report.per_coordinate_band)
        # quadratic smoothing is exact: the analytic gradient is inside too
        assert report.exact_gap <= float(np.linalg.norm(report.per_coordinate_band))

    def test_constant_function_mean_zero(self):
        unary = (lambda z: np.full(np.shape(z)[:-1] or (), 2.5), lambda z: np.zeros_like(z))
        report = estimator_mean_check(
            unary, np.zeros(3), 2.0 * np.eye(3), 10**5, np.random.default_rng(59)
        )
        assert report.within_band
        assert np.all(np.abs(report.empirical_mean) <= report.per_coordinate_band)

    def test_pseudo_huber_within_band(self):
        from banditcontrol.losses import PseudoHuberRegularized

        base = PseudoHuberRegularized(0.5, 1.0, np.array([0.3, -0.4]))
        f = AffineMemoryLoss(base, np.zeros(2), [np.eye(2)], [np.eye(2)])
        report = estimator_mean_check(
            f.unary(), np.array([0.2, 0.1]), np.diag([2.0, 1.0]), 2 * 10**5,
            np.random.default_rng(61),
        )
        assert report.within_band
        assert np.isfinite(report.exact_gap)

    def test_sample_floor(self):
        base = Quadratic(np.eye(2), np.zeros(2), 0.0)
        f = AffineMemoryLoss(base, np.zeros(2), [np.eye(2)], [np.eye(2)])
        with pytest.raises(ValueError, match="1e4"):
            estimator_mean_check(
                f.unary(), np.zeros(2), np.eye(2), 100, np.random.default_rng(0)
            )
