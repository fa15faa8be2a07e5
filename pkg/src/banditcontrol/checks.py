"""Fast invariant suites behind the ``check`` subcommand.

Each suite is a cheap, deterministic re-verification of one module's core
contracts, registered under the module it guards.  Every package module
with runtime invariants must contribute at least one suite; the registry
is enforced so a silently dropped suite fails the build, not the run.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from .bco import estimator_mean_check, run_bcoam
from .control import (
    CostSchedule,
    default_memory,
    make_stabilizable_system,
    markov_operator,
    random_drc_rollout,
    reduce_to_bcom,
    run_control,
)
from .geometry import EuclideanBall, OperatorL1Ball, PsdMatrix, logdet, \
    mahalanobis_project, matrix_entries, sample_unit_sphere
from .harness import best_fixed_comparator, compute_regret, expected_update_rate, \
    fit_loglog
from .losses import (
    AdversarySchedule,
    AffineMemoryLoss,
    BcomInstanceConfig,
    Quadratic,
    make_synthetic_bcom_instance,
    verify_kappa_convexity,
)

REQUIRED_MODULES = ("geometry", "losses", "bco", "control", "harness")

_REGISTRY = []  # (module, name, fn) in registration order


@dataclass
class CheckResult:
    module: str
    name: str
    ok: bool
    detail: str
    wall_clock: float


def register(module, name):
    def wrap(fn):
        _REGISTRY.append((module, name, fn))
        return fn

    return wrap


def registered_suites():
    return [(module, name) for module, name, _ in _REGISTRY]


def verify_registry():
    """Build failure when a required module has no registered suite."""
    covered = {module for module, _, _ in _REGISTRY}
    missing = [m for m in REQUIRED_MODULES if m not in covered]
    if missing:
        raise RuntimeError(f"modules without invariant suites: {missing}")


def run_checks(seed=0):
    """Run every registered suite; all randomness derives from ``seed``."""
    verify_registry()
    results = []
    for idx, (module, name, fn) in enumerate(_REGISTRY):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=int(seed), spawn_key=(200 + idx,))
        )
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng, int(seed) + idx)
        except Exception as exc:  # a crashed suite is a failed suite
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(module, name, bool(ok),
                                   str(detail), time.perf_counter() - t0))
    return results


def summary_table(results):
    width = max(len(f"{r.module}.{r.name}") for r in results)
    lines = []
    for r in results:
        tag = "PASS" if r.ok else "FAIL"
        lines.append(
            f"{tag}  {f'{r.module}.{r.name}':<{width}}  "
            f"{r.wall_clock:7.3f}s  {r.detail}"
        )
    n_fail = sum(not r.ok for r in results)
    lines.append(
        f"{len(results) - n_fail}/{len(results)} suites passed"
        + (f", {n_fail} FAILED" if n_fail else "")
    )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# geometry

@register("geometry", "projection_stationarity")
def _check_projection(rng, seed):
    """Metric projections satisfy the variational inequality on every set."""
    worst = 0.0
    for d, set_ in (
        (3, EuclideanBall(np.zeros(3), 1.3)),
        (4, OperatorL1Ball(2, 1, 2, 1.1)),
    ):
        w = rng.standard_normal((d, d))
        metric = PsdMatrix(w.T @ w + 0.3 * np.eye(d))
        a = matrix_entries(metric)
        for _ in range(20):
            point = 2.0 * rng.standard_normal(d)
            proj = mahalanobis_project(set_, metric, point)
            gap = a @ (point - proj)
            for _ in range(40):
                q = set_.random_point(rng)
                worst = max(worst, float((q - proj) @ gap))
    return worst <= 1e-7, f"worst VI violation {worst:.2e}"


@register("geometry", "logdet_cross_check")
def _check_logdet(rng, seed):
    w = rng.standard_normal((5, 5))
    a = w.T @ w + np.eye(5)
    got = logdet(a)
    sign, ref = np.linalg.slogdet(a)
    err = abs(got - ref)
    return (sign > 0 and err <= 1e-9), f"|logdet gap| {err:.2e}"


@register("geometry", "sphere_moments")
def _check_sphere(rng, seed):
    d, n = 4, 20_000
    draws = np.stack([sample_unit_sphere(d, rng) for _ in range(n)])
    mean_err = float(np.max(np.abs(draws.mean(axis=0))))
    second = draws.T @ draws / n
    second_err = float(np.max(np.abs(second - np.eye(d) / d)))
    tol = 5.0 / math.sqrt(n)
    ok = mean_err <= tol and second_err <= tol
    return ok, f"mean {mean_err:.2e}, second moment {second_err:.2e} (tol {tol:.1e})"


# ---------------------------------------------------------------------------
# losses

@register("losses", "kappa_sandwich")
def _check_kappa(rng, seed):
    worst = 0.0
    for kind in ("quadratic", "pseudo_huber"):
        cfg = BcomInstanceConfig(d=3, m=2, horizon=24, base_kind=kind, seed=seed)
        inst = make_synthetic_bcom_instance(cfg)
        for t in rng.choice(24, size=4, replace=False):
            report = verify_kappa_convexity(inst.losses[int(t)], probes=25,
                                            tol=1e-8, seed=seed)
            if not report.ok:
                return False, f"{kind} t={t} violation {report.worst_violation:.2e}"
            worst = max(worst, report.worst_violation)
    return True, f"worst sandwich violation {worst:.2e}"


@register("losses", "unary_consistency")
def _check_unary(rng, seed):
    cfg = BcomInstanceConfig(d=3, m=3, horizon=12, seed=seed)
    inst = make_synthetic_bcom_instance(cfg)
    worst = 0.0
    for f in inst.losses[:8]:
        eval_u, _, _ = f.unary()
        for _ in range(5):
            z = inst.set_.random_point(rng)
            worst = max(worst, abs(float(eval_u(z)) - f.eval([z] * f.m)))
    return worst <= 1e-12, f"max |unary - unrolled| {worst:.2e}"


# ---------------------------------------------------------------------------
# bco

@register("bco", "update_cadence")
def _check_cadence(rng, seed):
    m, horizon = 3, 4000
    cfg = BcomInstanceConfig(d=2, m=m, horizon=horizon, seed=seed)
    inst = make_synthetic_bcom_instance(cfg)
    run = run_bcoam(inst.losses, inst.set_, eta=0.05, m=m,
                    alpha=inst.certificates["alpha"], horizon=horizon, seed=seed)
    times = run.trace.update_times
    gaps = np.diff(times)
    if len(gaps) and gaps.min() < m:
        return False, f"update gap {gaps.min()} < m = {m}"
    steps = horizon - m + 1
    p = expected_update_rate(m)
    sigma = math.sqrt(p * (1.0 - p) / steps)
    freq = len(times) / steps
    ok = abs(freq - p) <= 3.0 * sigma
    if ok and np.any(np.diff(run.logdets[m - 1:]) < -1e-12):
        return False, "metric log-determinant decreased"
    return ok, f"rate {freq:.4f} vs {p:.4f} (3 sigma {3 * sigma:.4f})"


@register("bco", "estimator_mean")
def _check_estimator(rng, seed):
    q = Quadratic(np.diag([1.0, 2.0]), np.zeros(2), 1.0)
    f = AffineMemoryLoss(q, np.zeros(2), [np.eye(2)], [np.eye(2)])
    metric = PsdMatrix(np.diag([2.0, 0.7]))
    report = estimator_mean_check(f.unary(), np.array([0.3, -0.2]), metric,
                                  40_000, rng)
    return report.within_band, (
        f"gap {report.gap:.3e} within band {report.band:.3e}"
    )


# ---------------------------------------------------------------------------
# control

@register("control", "signal_reconstruction")
def _check_signals(rng, seed):
    inst, ctrl = make_stabilizable_system(3, 2, 2, kappa=3.0, gamma=0.3,
                                          kappa_sys=2.0, seed=seed)
    w = AdversarySchedule("seeded_bounded", dim=3, seed=seed + 1, radius=0.5)
    e = AdversarySchedule("seeded_bounded", dim=2, seed=seed + 2, radius=0.5)
    _, _, recon, twin, tail = random_drc_rollout(inst, ctrl, m=3, r_m=1.0,
                                                 horizon=120, w_schedule=w,
                                                 e_schedule=e, seed=seed)
    err = float(np.max(np.abs(recon - twin)))
    budget = 1e-8 + tail
    return err <= budget, f"max reconstruction error {err:.2e} (tail {tail:.1e})"


@register("control", "markov_decay")
def _check_markov(rng, seed):
    inst, ctrl = make_stabilizable_system(3, 2, 2, kappa=2.5, gamma=0.4,
                                          kappa_sys=1.8, seed=seed)
    markov = markov_operator(inst, ctrl, 30)
    worst = -np.inf
    for i in range(1, 31):
        norm = float(np.linalg.norm(markov.blocks[i], 2))
        worst = max(worst, norm - markov.decay_bound(i))
    return worst <= 1e-9, f"worst envelope excess {worst:.2e}"


@register("control", "reduction_identity")
def _check_reduction(rng, seed):
    # untruncated scalar run: realized cost equals the reduced loss exactly
    inst, ctrl = make_stabilizable_system(1, 1, 1, kappa=2.0, gamma=0.5,
                                          kappa_sys=1.5, seed=seed)
    cost = CostSchedule("quadratic", dim=2, alpha=0.5, beta=2.0, seed=seed)
    w = AdversarySchedule("seeded_bounded", dim=1, seed=seed + 1, radius=0.5)
    e = AdversarySchedule("seeded_bounded", dim=1, seed=seed + 2, radius=0.5)
    horizon = 8
    run = run_control(inst, ctrl, cost, w, e, m=horizon, r_m=1.0, eta=0.05,
                      horizon=horizon, seed=seed, n_truncation=horizon)
    t = horizon
    f_t = reduce_to_bcom(cost.at(t), run.signals[:t], t, horizon,
                         markov_operator(inst, ctrl, horizon), ctrl)
    gap = abs(run.incurred[t - 1] - f_t.eval(run.decisions[t - horizon:t]))
    return gap <= 1e-12, f"|c_t - f_t| = {gap:.2e} untruncated"


@register("control", "improper_play_membership")
def _check_membership(rng, seed):
    run = _membership_run(seed)
    r_m = run.metadata["r_m"]
    ok = run.metadata["l1op_max"] <= 2.0 * r_m + 1e-9
    slack_ok = run.metadata["discrepancy_total"] <= run.metadata["reduction_slack"]
    detail = (
        f"l1op max {run.metadata['l1op_max']:.3f} <= {2 * r_m:.1f}; "
        f"discrepancy {run.metadata['discrepancy_total']:.2e}"
        f" <= slack {run.metadata['reduction_slack']:.2e}"
    )
    return ok and slack_ok, detail


def _membership_run(seed):
    inst, ctrl = make_stabilizable_system(2, 1, 1, kappa=2.0, gamma=0.5,
                                          kappa_sys=1.5, seed=seed)
    cost = CostSchedule("quadratic", dim=2, alpha=0.5, beta=2.0, seed=seed)
    w = AdversarySchedule("sinusoidal", dim=2, seed=seed + 1, radius=0.5,
                          period=23)
    e = AdversarySchedule("seeded_bounded", dim=1, seed=seed + 2, radius=0.5)
    m = default_memory(150, 0.5)
    return run_control(inst, ctrl, cost, w, e, m=m, r_m=2.5, eta=0.05,
                       horizon=150, seed=seed, set_kind="l1op")


# ---------------------------------------------------------------------------
# harness

@register("harness", "regret_dual_path")
def _check_regret(rng, seed):
    incurred = rng.uniform(0.0, 2.0, size=300)
    comp = rng.uniform(0.0, 2.0, size=300)
    record = compute_regret(incurred, comp, start=7)
    running, worst = 0.0, 0.0
    for t in range(1, 301):
        if t >= 7:
            running += incurred[t - 1] - comp[t - 1]
        worst = max(worst, abs(running - record.cum_regret[t - 1]))
    return worst <= 1e-9, f"max streamed/batch gap {worst:.2e}"


@register("harness", "planted_comparator")
def _check_comparator(rng, seed):
    target = np.array([0.25, -0.55])
    base = Quadratic(np.eye(2), -target, 0.5 * float(target @ target))
    eye = np.eye(2)
    losses = [AffineMemoryLoss(base, np.zeros(2), [eye], [eye]) for _ in range(9)]
    z_star, _ = best_fixed_comparator(losses, EuclideanBall(np.zeros(2), 2.0),
                                      seed=seed)
    err = float(np.max(np.abs(z_star - target)))
    return err <= 1e-6, f"planted minimizer recovered to {err:.1e}"


@register("harness", "loglog_fit_exact")
def _check_fit(rng, seed):
    grid = [256, 512, 1024, 2048]
    slope, _, _, _ = fit_loglog(grid, [1.7 * math.sqrt(t) for t in grid])
    err = abs(slope - 0.5)
    return err <= 1e-12, f"|slope - 1/2| = {err:.1e}"
