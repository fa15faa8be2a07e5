"""Comparator optimization, regret accounting, bounds, and sweep tests."""

import math

import numpy as np
import pytest

from banditcontrol import harness as H
from banditcontrol.control import (
    CostSchedule,
    comparator_cost,
    make_stabilizable_system,
    unembed,
)
from banditcontrol.geometry import EuclideanBall
from banditcontrol.harness import (
    ComparatorNotConvergedError,
    ControlComparatorProblem,
    base_bound,
    best_fixed_comparator,
    bound_diagnostics,
    compute_regret,
    expected_update_rate,
    fit_loglog,
    memory_bound,
    moving_cost_bound,
    scaling_sweep,
)
from banditcontrol.losses import (
    AdversarySchedule,
    AffineMemoryLoss,
    BcomInstanceConfig,
    Quadratic,
    make_synthetic_bcom_instance,
    stack_unary,
)


def shifted_bowl(target):
    """1/2 |v - target|^2 as a certified quadratic."""
    target = np.asarray(target, dtype=float)
    n = target.size
    return Quadratic(np.eye(n), -target, 0.5 * float(target @ target))


def identity_channel_loss(target):
    """m=1 loss whose unary form is 1/2 |z - target|^2."""
    n = np.asarray(target).size
    eye = np.eye(n)
    return AffineMemoryLoss(shifted_bowl(target), np.zeros(n), [eye], [eye])


class TestAcceleratedPgd:
    def test_unconstrained_quadratic_exact(self):
        a = np.array([0.4, -0.7])
        set_ = EuclideanBall(np.zeros(2), 2.0)
        value = lambda z: 0.5 * float(np.sum((z - a) ** 2))
        grad = lambda z: z - a
        x, f, residual, its = H._accelerated_pgd(value, grad, set_, set_.center(),
                                                 tol=1e-10, max_iter=1000)
        assert np.linalg.norm(x - a) < 1e-8
        assert residual < 1e-10
        assert its < 1000

    def test_boundary_solution(self):
        # minimum outside the ball lands on the boundary along the ray
        a = np.array([3.0, 0.0])
        set_ = EuclideanBall(np.zeros(2), 1.0)
        value = lambda z: 0.5 * float(np.sum((z - a) ** 2))
        grad = lambda z: z - a
        x, _, _, _ = H._accelerated_pgd(value, grad, set_, set_.center(),
                                        tol=1e-10, max_iter=1000)
        assert np.allclose(x, [1.0, 0.0], atol=1e-8)

    def test_budget_exhaustion_raises(self):
        a = np.array([0.9, 0.1])
        scale = np.array([1.0, 30.0])
        set_ = EuclideanBall(np.zeros(2), 2.0)
        value = lambda z: 0.5 * float(np.sum(scale * (z - a) ** 2))
        grad = lambda z: scale * (z - a)
        with pytest.raises(ComparatorNotConvergedError) as err:
            H._accelerated_pgd(value, grad, set_, set_.center(),
                               tol=1e-14, max_iter=2)
        assert err.value.residual > 0.0


class TestProbeOptimality:
    def test_true_optimum_passes(self):
        set_ = EuclideanBall(np.zeros(2), 1.0)
        value = lambda z: 0.5 * float(np.sum(np.square(z)))
        rng = np.random.default_rng(0)
        ok, worst = H._probe_optimality(value, set_, np.zeros(2), 0.0,
                                        tol=1e-8, probes=300, rng=rng)
        assert ok
        assert worst <= 1e-8

    def test_displaced_point_fails(self):
        set_ = EuclideanBall(np.zeros(2), 1.0)
        value = lambda z: 0.5 * float(np.sum(np.square(z)))
        x_bad = np.array([0.9, 0.0])
        rng = np.random.default_rng(0)
        ok, worst = H._probe_optimality(value, set_, x_bad, value(x_bad),
                                        tol=1e-8, probes=300, rng=rng)
        assert not ok
        assert worst > 0.1


class TestBestFixedComparator:
    def test_identical_losses_return_interior_minimizer(self):
        target = np.array([0.3, -0.4])
        losses = [identity_channel_loss(target) for _ in range(12)]
        set_ = EuclideanBall(np.zeros(2), 2.0)
        z_star, total = best_fixed_comparator(losses, set_)
        assert np.max(np.abs(z_star - target)) <= 1e-6
        assert 0.0 <= total <= 12 * 0.5 * 1e-11

    def test_two_quadratics_average(self):
        a = np.array([0.5, 0.0])
        b = np.array([-0.1, 0.8])
        losses = [identity_channel_loss(a), identity_channel_loss(b)]
        set_ = EuclideanBall(np.zeros(2), 3.0)
        z_star, total = best_fixed_comparator(losses, set_)
        assert np.max(np.abs(z_star - (a + b) / 2)) <= 1e-6
        expected = 0.5 * float(np.sum((z_star - a) ** 2) + np.sum((z_star - b) ** 2))
        assert abs(total - expected) <= 1e-9

    def test_boundary_comparator(self):
        target = np.array([3.0, 0.0])
        losses = [identity_channel_loss(target) for _ in range(4)]
        set_ = EuclideanBall(np.zeros(2), 1.0)
        z_star, _ = best_fixed_comparator(losses, set_)
        assert np.max(np.abs(z_star - [1.0, 0.0])) <= 1e-6

    def test_beats_random_feasible_points(self):
        cfg = BcomInstanceConfig(d=3, m=2, horizon=60, seed=11)
        inst = make_synthetic_bcom_instance(cfg)
        z_star, total = best_fixed_comparator(inst.losses, inst.set_, seed=1)
        stacked = stack_unary(inst.losses[cfg.m - 1:])
        rng = np.random.default_rng(99)
        for _ in range(1000):
            p = inst.set_.random_point(rng)
            assert total <= stacked.sum_value(p) + 1e-9 * max(1.0, abs(total))

    def test_deterministic(self):
        cfg = BcomInstanceConfig(d=2, m=2, horizon=40, seed=5)
        inst = make_synthetic_bcom_instance(cfg)
        z1, v1 = best_fixed_comparator(inst.losses, inst.set_, seed=3)
        z2, v2 = best_fixed_comparator(inst.losses, inst.set_, seed=3)
        assert np.array_equal(z1, z2)
        assert v1 == v2

    def test_set_type_checked(self):
        with pytest.raises(TypeError):
            best_fixed_comparator([identity_channel_loss(np.zeros(2))], None)


class TestControlComparator:
    def _problem(self, horizon=60, m=3):
        inst, ctrl = make_stabilizable_system(2, 1, 1, kappa=2.0, gamma=0.5,
                                              kappa_sys=1.5, seed=0)
        cost = CostSchedule("quadratic", dim=2, alpha=0.5, beta=2.0, seed=7)
        w_sched = AdversarySchedule("sinusoidal", dim=2, seed=11, radius=0.5,
                                    period=13)
        e_sched = AdversarySchedule("seeded_bounded", dim=1, seed=12, radius=0.5)
        return ControlComparatorProblem(
            instance=inst, controller=ctrl, cost=cost, w_schedule=w_sched,
            e_schedule=e_sched, m=m, horizon=horizon,
        )

    def test_dual_route_consistency_and_optimality(self):
        problem = self._problem()
        m, horizon = problem.m, problem.horizon
        set_ = EuclideanBall(np.zeros(m), math.sqrt(m) * 1.0)
        w_star, total = best_fixed_comparator(problem, set_)

        # the affine-map objective must equal a fresh re-simulation
        policy = unembed(w_star, m, 1, 1)
        resim = comparator_cost(problem.instance, problem.controller,
                                problem.cost, problem.w_schedule,
                                problem.e_schedule, policy, horizon)
        assert abs(resim - total) <= 1e-9 * max(1.0, abs(total))

        # feasible alternatives cannot beat it: zero policy and local moves
        zero_cost = comparator_cost(problem.instance, problem.controller,
                                    problem.cost, problem.w_schedule,
                                    problem.e_schedule, unembed(np.zeros(m), m, 1, 1),
                                    horizon)
        assert total <= zero_cost + 1e-9
        for k in range(m):
            for sign in (-1.0, 1.0):
                probe = np.array(w_star)
                probe[k] += sign * 0.01
                probe = set_.euclidean_project(probe)
                alt = comparator_cost(problem.instance, problem.controller,
                                      problem.cost, problem.w_schedule,
                                      problem.e_schedule, unembed(probe, m, 1, 1),
                                      horizon)
                assert alt >= total - 1e-6 * horizon

    def test_nontrivial_policy_helps(self):
        # under persistent sinusoidal noise the best fixed policy is not zero
        problem = self._problem()
        set_ = EuclideanBall(np.zeros(problem.m), math.sqrt(problem.m))
        w_star, _ = best_fixed_comparator(problem, set_)
        assert np.linalg.norm(w_star) > 1e-4


class TestComputeRegret:
    def test_identical_series_zero(self):
        series = np.linspace(1.0, 2.0, 30)
        record = compute_regret(series, series.copy(), start=4)
        assert np.array_equal(record.cum_regret, np.zeros(30))
        assert record.final_regret == 0.0

    def test_unit_gap_counts_effective_steps(self):
        comp = np.full(12, 0.25)
        record = compute_regret(comp + 1.0, comp, start=3)
        assert record.final_regret == 10.0
        assert record.cum_regret[1] == 0.0
        assert record.cum_regret[2] == 1.0
        assert record.comparator_value == pytest.approx(0.25 * 10)

    def test_streamed_equals_batch(self):
        rng = np.random.default_rng(42)
        incurred = rng.uniform(0.0, 3.0, size=200)
        comp = rng.uniform(0.0, 3.0, size=200)
        record = compute_regret(incurred, comp, start=5)
        running = 0.0
        for t in range(1, 201):
            if t >= 5:
                running += incurred[t - 1] - comp[t - 1]
            assert abs(running - record.cum_regret[t - 1]) <= 1e-9

    def test_horizon_mismatch_rejected(self):
        with pytest.raises(ValueError):
            compute_regret(np.zeros(5), np.zeros(6), start=1)


class TestBoundFormulas:
    def test_expected_update_rate(self):
        assert expected_update_rate(4) == 27.0 / 256.0
        assert expected_update_rate(1) == 1.0

    def test_base_bound_frozen_oracle(self):
        got = base_bound(100, d=2, eta=0.1, alpha=1.0, beta=2.0, g=1.0,
                         diameter=2.0, r_h=1.2, d0=2)
        assert got == pytest.approx(1413.1959485969232, rel=1e-12)

    def test_memory_bound_is_scaled_base(self):
        got = memory_bound(100, m=4, d=2, eta=0.1, alpha=1.0, beta=2.0,
                           g=1.0, diameter=2.0, r_h=1.2)
        assert got == pytest.approx(5458.842586675096, rel=1e-12)
        direct = 3 * 4 * base_bound(25.0, 2, 0.1, 1.0, 2.0, 1.0, 2.0, 1.2, d0=2)
        assert got == pytest.approx(direct, rel=1e-14)

    def test_moving_cost_frozen_oracle(self):
        got = moving_cost_bound(16, m=2, d=2, eta=0.1, alpha=1.0, beta=2.0,
                                g=1.0, diameter=2.0, r_h=1.2, modulus=0.5)
        assert got == pytest.approx(13161.300655157367, rel=1e-12)


class TestBoundDiagnostics:
    def _zero_record(self, eta=0.05, m=3, horizon=120, extra_certs=None):
        certs = {"alpha": 0.5, "beta": 2.0, "g_unary": 1.5, "diameter": 2.0,
                 "r_h": 1.2}
        certs.update(extra_certs or {})
        return compute_regret(
            np.zeros(horizon), np.zeros(horizon), start=m,
            certificates=certs, metadata={"eta": eta, "m": m, "d": 4},
        )

    def test_zero_loss_run_is_within_any_bound(self):
        record = self._zero_record(extra_certs={"kappa_proxy": 0.3})
        report = bound_diagnostics(record)
        assert report["measured_regret"] == 0.0
        assert report["ok"]
        assert report["margin"] == report["memory_bound"]
        assert report["moving_cost_bound"] > 0.0
        assert report["total_bound"] == pytest.approx(
            report["memory_bound"] + report["moving_cost_bound"]
        )
        assert report["delay_feasible"]  # 3 <= 2/(0.05*0.5*1.2) = 66.6

    def test_missing_modulus_reports_nan(self):
        report = bound_diagnostics(self._zero_record())
        assert math.isnan(report["moving_cost_bound"])
        assert report["total_bound"] == report["memory_bound"]

    def test_delay_feasibility_flag(self):
        report = bound_diagnostics(self._zero_record(eta=40.0))
        assert not report["delay_feasible"]  # 2/(40*0.5*1.2) < 1

    def test_update_rate_cell(self):
        m, horizon = 4, 10_000
        steps = horizon - m + 1
        p = expected_update_rate(m)
        updated = np.zeros(horizon, dtype=bool)
        updated[: round(p * steps)] = True
        report = bound_diagnostics(self._zero_record(m=m, horizon=horizon),
                                   updated=updated)
        assert report["update_rate_ok"]
        assert report["update_rate_expected"] == 27.0 / 256.0
        report_bad = bound_diagnostics(self._zero_record(m=m, horizon=horizon),
                                       updated=np.ones(horizon, dtype=bool))
        assert not report_bad["update_rate_ok"]


class TestFitLoglog:
    def test_sqrt_series_recovers_half(self):
        grid = [2 ** k for k in range(10, 15)]
        means = [3.7 * math.sqrt(t) for t in grid]
        slope, intercept, stderr, residuals = fit_loglog(grid, means)
        assert abs(slope - 0.5) <= 1e-12
        assert abs(intercept - math.log(3.7)) <= 1e-10
        assert stderr <= 1e-12
        assert np.max(np.abs(residuals)) <= 1e-12

    def test_two_thirds_series(self):
        grid = [2 ** k for k in range(10, 15)]
        means = [0.9 * t ** (2.0 / 3.0) for t in grid]
        slope, _, _, _ = fit_loglog(grid, means)
        assert abs(slope - 2.0 / 3.0) <= 1e-12

    def test_nonpositive_mean_rejected(self):
        with pytest.raises(ValueError):
            fit_loglog([10, 20, 30, 40], [1.0, -0.5, 2.0, 3.0])


class TestScalingSweep:
    def test_grid_and_seed_validation(self):
        with pytest.raises(ValueError, match="at least 4"):
            scaling_sweep("bcom", (64, 96, 128), seeds=5)
        with pytest.raises(ValueError, match="at least 5"):
            scaling_sweep("bcom", (64, 96, 128, 192), seeds=4)
        with pytest.raises(ValueError, match="family"):
            scaling_sweep("nope", (64, 96, 128, 192), seeds=5)
        with pytest.raises(ValueError, match="arm"):
            scaling_sweep("bcom", (64, 96, 128, 192), seeds=5, arm="mystery")

    def test_small_bcom_sweep_paired_and_deterministic(self):
        kwargs = dict(d=2, m=2)
        sweep = scaling_sweep("bcom", (64, 96, 128, 192), seeds=5, arm="both",
                              **kwargs)
        assert len(sweep.points) == 4 * 5 * 2
        assert set(sweep.fits) == {"newton", "spherical"}
        for fit in sweep.fits.values():
            assert np.all(fit.means > 0.0)
            assert fit.t_grid.tolist() == [64.0, 96.0, 128.0, 192.0]
        newton_rows = sweep.finals("newton")
        assert [(r["t"], r["seed"]) for r in newton_rows] == [
            (t, s) for t in (64, 96, 128, 192) for s in range(5)
        ]
        again = scaling_sweep("bcom", (64, 96, 128, 192), seeds=5, arm="both",
                              **kwargs)
        assert [p["final_regret"] for p in again.points] == [
            p["final_regret"] for p in sweep.points
        ]
        assert again.fits["newton"].slope == sweep.fits["newton"].slope

    def test_parallel_matches_sequential(self):
        kwargs = dict(d=2, m=2)
        seq = scaling_sweep("bcom", (64, 96, 128, 192), seeds=5, **kwargs)
        par = scaling_sweep("bcom", (64, 96, 128, 192), seeds=5, jobs=2,
                            **kwargs)
        assert [p["final_regret"] for p in par.points] == [
            p["final_regret"] for p in seq.points
        ]

    def test_cell_failure_carries_identity(self):
        with pytest.raises(RuntimeError, match=r"T=64 seed=0"):
            scaling_sweep("bcom", (64, 96, 128, 192), seeds=5, d=2, m=2,
                          base_kind="not-a-kind")


class TestControlCell:
    def test_single_cell_row(self):
        rows = H._control_cell(({}, 96, 0, ("newton",)))
        assert len(rows) == 1
        row = rows[0]
        assert row["t"] == 96 and row["seed"] == 0 and row["arm"] == "newton"
        assert math.isfinite(row["final_regret"])
        assert 0.0 <= row["discrepancy_total"] <= row["reduction_slack"]
        assert row["wall_clock"] > 0.0

    def test_rejects_spherical_arm(self):
        with pytest.raises(ValueError, match="newton"):
            H._control_cell(({}, 96, 0, ("newton", "spherical")))

    def test_rejects_unknown_family_key(self):
        with pytest.raises(ValueError, match="unknown control family"):
            H._control_cell(({"surprise": 1}, 96, 0, ("newton",)))
