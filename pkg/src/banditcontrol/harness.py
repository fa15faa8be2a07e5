"""Regret measurement, comparator optimization, sweeps, and bound checks.

Everything here is offline, full-information machinery: it may see the
entire loss sequence or re-simulate trajectories, which the learners never
do.  Regret is always reported against the computed best fixed comparator
over the learner's own decision set.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bco import run_bcoam, run_spherical_baseline
from .control import (
    CostSchedule,
    comparator_cost,
    default_memory,
    default_truncation,
    embed_signals,
    make_stabilizable_system,
    markov_operator,
    run_control,
    simulate_drc,
    simulate_pure_k,
    unembed,
)
from .geometry import ConvexSet, EuclideanBall
from .losses import (
    AdversarySchedule,
    BcomInstanceConfig,
    make_synthetic_bcom_instance,
    stack_unary,
)


class ComparatorNotConvergedError(RuntimeError):
    """Comparator optimization missed its tolerance within the budget."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass
class RegretRecord:
    """Per-run regret series against a fixed comparator."""

    incurred: np.ndarray
    comparator: np.ndarray  # raw per-step comparator loss series
    cum_regret: np.ndarray
    final_regret: float
    start: int  # first 1-based step entering the sum
    comparator_value: float
    comparator_point: np.ndarray
    seed: int
    config_hash: str
    wall_clock: float
    certificates: dict
    metadata: dict


@dataclass
class ArmFit:
    """Log-log slope fit for one algorithm arm."""

    t_grid: np.ndarray
    means: np.ndarray
    stderrs: np.ndarray
    slope: float
    intercept: float
    slope_ci: float  # 1.96 standard errors
    residuals: np.ndarray


@dataclass
class SweepResult:
    """All sweep cells plus per-arm scaling fits."""

    points: list  # dicts: {t, seed, arm, final_regret, wall_clock}
    fits: dict  # arm -> ArmFit
    metadata: dict

    def finals(self, arm):
        rows = [p for p in self.points if p["arm"] == arm]
        return sorted(rows, key=lambda p: (p["t"], p["seed"]))


@dataclass
class ControlComparatorProblem:
    """Inputs needed to optimize a fixed policy by re-simulation geometry."""

    instance: object
    controller: object
    cost: CostSchedule
    w_schedule: object
    e_schedule: object
    m: int
    horizon: int


def _project_step(set_, x, grad, step):
    return set_.euclidean_project(x - step * grad)


def _accelerated_pgd(value, grad, set_, x0, tol, max_iter):
    """Projected gradient with backtracking and momentum restarts.

    Returns (x, value, residual, iterations); residual is the norm of the
    projected-gradient mapping at the returned point.
    """
    x = np.array(x0, dtype=float)
    y = x.copy()
    f_x = value(x)
    step = 1.0
    t_momentum = 1.0

    def backtracked(pt, f_pt, g_pt):
        # shrink the step until the local quadratic upper bound holds at pt
        nonlocal step
        while True:
            cand = _project_step(set_, pt, g_pt, step)
            delta = cand - pt
            quad = f_pt + g_pt @ delta + 0.5 * (delta @ delta) / step
            f_cand = value(cand)
            if f_cand <= quad + 1e-15 * max(1.0, abs(quad)):
                return cand, f_cand
            step *= 0.5
            if step < 1e-18:
                raise ComparatorNotConvergedError(
                    "backtracking underflow", float(np.linalg.norm(delta))
                )

    for it in range(1, max_iter + 1):
        cand, f_cand = backtracked(y, value(y), grad(y))
        if f_cand > f_x:  # momentum overshoot: restart from the plain iterate
            y = x.copy()
            t_momentum = 1.0
            cand, f_cand = backtracked(y, f_x, grad(y))
        # convergence is judged on the plain projected-gradient mapping
        g_cand = grad(cand)
        mapped = (cand - _project_step(set_, cand, g_cand, step)) / step
        residual = float(np.linalg.norm(mapped))
        x_prev, x, f_x = x, cand, f_cand
        if residual < tol:
            return x, f_x, residual, it
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_momentum**2))
        y = x + ((t_momentum - 1.0) / t_next) * (x - x_prev)
        t_momentum = t_next
        step *= 1.3
    raise ComparatorNotConvergedError(
        f"no convergence in {max_iter} iterations (residual {residual:.3g})",
        residual,
    )


def _probe_optimality(value, set_, x_star, f_star, tol, probes, rng):
    """Best probe must not beat the solution by more than tol (per step)."""
    worst = 0.0
    d = set_.dim
    for j in range(probes):
        if j % 3 == 0:
            p = set_.euclidean_project(
                x_star + 0.01 * set_.diameter() * rng.standard_normal(d)
            )
        else:
            p = set_.random_point(rng)
        worst = max(worst, f_star - value(p))
    return worst <= tol, worst


def best_fixed_comparator(target, set_, tol=1e-8, max_iter=100_000,
                          probes=1000, seed=0):
    """Best fixed decision in hindsight, with probe-verified optimality.

    ``target`` is either a sequence of affine-memory losses (the unary sum
    from the first full window is minimized) or a ControlComparatorProblem
    (the exact trajectory cost of a fixed policy is minimized by
    differentiating through the affine noise-to-cost map).  Returns
    (point, total value).  The optimizer works on the per-step mean, so
    ``tol`` is a per-step tolerance.
    """
    if not isinstance(set_, ConvexSet):
        raise TypeError("set_ must be a ConvexSet")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
    if isinstance(target, ControlComparatorProblem):
        mean_value, mean_grad, count, check = _control_objective(target, set_)
    else:
        losses = list(target)
        m = losses[0].m
        stacked = stack_unary(losses[m - 1:])
        count = stacked.count
        mean_value = lambda z: stacked.sum_value(z) / count
        mean_grad = lambda z: stacked.sum_grad(z) / count
        check = None

    x0 = set_.center()
    x, f_mean, residual, _ = _accelerated_pgd(
        mean_value, mean_grad, set_, x0, tol, max_iter
    )
    ok, worst = _probe_optimality(mean_value, set_, x, f_mean, tol, probes, rng)
    if not ok:
        raise ComparatorNotConvergedError(
            f"a probe improved the comparator by {worst:.3g}", worst
        )
    total = f_mean * count
    if check is not None:
        resim = check(x)
        scale = max(1.0, abs(total))
        if abs(resim - total) > 1e-9 * scale:
            raise ComparatorNotConvergedError(
                f"affine objective {total:.12g} disagrees with re-simulation "
                f"{resim:.12g}",
                abs(resim - total),
            )
    return x, total


def _control_objective(problem, set_):
    """Mean trajectory cost of a fixed embedded policy, plus its gradient.

    (y_t, u_t) is affine in the embedded policy w: offset_t + Ghat_t w,
    where Ghat_t sums lag blocks against the pure-K signal embeddings.
    Lags with certified tail below 1e-14 are dropped.  Also returns a
    re-simulation closure for the dual-route consistency check.
    """
    inst, ctrl = problem.instance, problem.controller
    horizon, m = problem.horizon, problem.m
    d_u, d_y = inst.d_u, inst.d_y
    d = m * d_u * d_y
    signals = simulate_pure_k(inst, ctrl, problem.w_schedule,
                              problem.e_schedule, horizon)
    n_lags = min(
        horizon - 1,
        default_truncation(inst, ctrl, horizon, budget=1e-14),
    )
    n_lags = max(n_lags, 1)
    markov = markov_operator(inst, ctrl, max(n_lags, m))

    def window(t):
        return [
            signals[s - 1] if s >= 1 else np.zeros(d_y)
            for s in range(t - m + 1, t + 1)
        ]

    y_embed = np.stack([embed_signals(window(t), d_u) for t in range(1, horizon + 1)])
    ghat = np.zeros((horizon, d_y + d_u, d))
    for i in range(0, n_lags + 1):
        ghat[i:] += np.einsum("np,tpd->tnd", markov.blocks[i], y_embed[: horizon - i])
    offsets = np.concatenate([signals, signals @ ctrl.k.T], axis=1)
    batch = _StackedCost(problem.cost, horizon)

    if batch.kind == "quadratic":
        # quadratic cost through an affine map: assemble the normal form
        # once so every solver iteration costs O(d^2) instead of O(T d)
        q_ghat = np.einsum("tnm,tmd->tnd", batch.q_all, ghat)
        p_mat = np.einsum("tnd,tne->de", ghat, q_ghat) / horizon
        p_mat = (p_mat + p_mat.T) / 2.0
        q_vec = np.einsum("tn,tnd->d", offsets, q_ghat) / horizon
        c0 = 0.5 * float(
            np.einsum("tn,tnm,tm->", offsets, batch.q_all, offsets)
        ) / horizon

        def mean_value(w):
            w = np.asarray(w, dtype=float)
            return float(0.5 * w @ p_mat @ w + q_vec @ w + c0)

        def mean_grad(w):
            return p_mat @ np.asarray(w, dtype=float) + q_vec
    else:
        def mean_value(w):
            pts = offsets + ghat @ np.asarray(w, dtype=float)
            return float(batch.values(pts).sum()) / horizon

        def mean_grad(w):
            pts = offsets + ghat @ np.asarray(w, dtype=float)
            return np.einsum("tnd,tn->d", ghat, batch.grads(pts)) / horizon

    def check(w):
        return comparator_cost(
            inst, ctrl, problem.cost, problem.w_schedule, problem.e_schedule,
            unembed(w, m, d_u, d_y), horizon,
        )

    return mean_value, mean_grad, horizon, check


class _StackedCost:
    """Batched values/gradients of a time-varying cost schedule."""

    def __init__(self, cost, horizon):
        self.kind = cost.kind
        self.dim = cost.dim
        bases = [cost.at(t) for t in range(1, horizon + 1)]
        if cost.kind == "quadratic":
            self.q_all = np.stack([b.q for b in bases])
        else:
            self.alpha = cost.alpha
            self.s_all = np.array([b.s for b in bases])

    def values(self, pts):
        if self.kind == "quadratic":
            return 0.5 * np.einsum("tn,tnm,tm->t", pts, self.q_all, pts)
        ph = np.sqrt(1.0 + pts * pts) - 1.0
        return 0.5 * self.alpha * np.sum(pts * pts, axis=1) + self.s_all * ph.sum(
            axis=1
        )

    def grads(self, pts):
        if self.kind == "quadratic":
            return np.einsum("tnm,tm->tn", self.q_all, pts)
        return self.alpha * pts + self.s_all[:, None] * pts / np.sqrt(1.0 + pts * pts)


def compute_regret(incurred, comparator, start, comparator_point=None,
                   seed=0, config_hash="", certificates=None, metadata=None,
                   wall_clock=0.0):
    """Prefix-sum regret series; entries before ``start`` contribute zero."""
    incurred = np.asarray(incurred, dtype=float)
    comparator = np.asarray(comparator, dtype=float)
    if incurred.shape != comparator.shape:
        raise ValueError(
            f"horizon mismatch: {incurred.shape} vs {comparator.shape}"
        )
    diff = incurred - comparator
    diff[: start - 1] = 0.0
    cum = np.cumsum(diff)
    return RegretRecord(
        incurred=incurred,
        comparator=comparator,
        cum_regret=cum,
        final_regret=float(cum[-1]),
        start=start,
        comparator_value=float(comparator[start - 1:].sum()),
        comparator_point=(
            np.array([]) if comparator_point is None
            else np.asarray(comparator_point, dtype=float)
        ),
        seed=int(seed),
        config_hash=config_hash,
        wall_clock=wall_clock,
        certificates=dict(certificates or {}),
        metadata=dict(metadata or {}),
    )


def expected_update_rate(m):
    """Chance a step fires the Bernoulli gate: (1/m)(1 - 1/m)^(m-1)."""
    return (1.0 / m) * (1.0 - 1.0 / m) ** (m - 1)


def base_bound(horizon, d, eta, alpha, beta, g, diameter, r_h, d0):
    """Printed no-memory regret bound; valid when d0 <= 2/(eta alpha r_h)."""
    return (
        (2.0 * beta * d / (eta * alpha)) * math.log(eta * r_h * horizon + 1.0)
        + 2.0 * d0 * g * diameter
        + diameter**2 * d0 * r_h / (2.0 * eta)
        + 3.0 * eta * d0 * d**2 * g**2 * diameter**2 * r_h * horizon
    )


def memory_bound(horizon, m, d, eta, alpha, beta, g, diameter, r_h):
    """Gate for memory runs: 3m times the base bound at horizon T/m, d0=2."""
    return 3.0 * m * base_bound(
        horizon / m, d, eta, alpha, beta, g, diameter, r_h, d0=2
    )


def moving_cost_bound(horizon, m, d, eta, alpha, beta, g, diameter, r_h, modulus):
    """Printed window-movement bound; needs m <= 2/(eta alpha r_h)."""
    modulus = max(modulus, 1e-12)
    root_t = math.sqrt(horizon)
    return (
        12.0 * m**4 * beta * r_h * d * max(2.0, eta * alpha * r_h * root_t)
        / (eta * alpha * modulus) * math.log(eta * alpha * r_h + 1.0)
        + 10.0 * m**4 * beta * r_h**3 * d * root_t / modulus
        + m**2 * beta * d * r_h**3 * root_t
        + eta * d * g * diameter**2 * beta * horizon
    )


def bound_diagnostics(record, updated=None):
    """Measured regret against the evaluated printed bounds.

    ``record.metadata`` must carry eta, m, d plus the certificate constants
    (alpha, beta, g_unary, diameter, r_h, and optionally kappa_proxy).  The
    unary-gradient constant g_unary already includes the sqrt(m) factor.
    Returns a report dict; ``ok`` fails only on the memory-bound gate.
    """
    meta = record.metadata
    certs = record.certificates
    eta, m, d = meta["eta"], meta["m"], meta["d"]
    horizon = len(record.incurred)
    g_unary = certs["g_unary"]
    args = (
        d, eta, certs["alpha"], certs["beta"], g_unary,
        certs["diameter"], certs["r_h"],
    )
    gate = memory_bound(horizon, m, *args)
    moving = (
        moving_cost_bound(horizon, m, *args, certs["kappa_proxy"])
        if "kappa_proxy" in certs
        else float("nan")
    )
    report = {
        "measured_regret": record.final_regret,
        "memory_bound": gate,
        "moving_cost_bound": moving,
        "total_bound": gate + (0.0 if math.isnan(moving) else moving),
        "margin": gate - record.final_regret,
        "ok": record.final_regret <= gate,
        "delay_feasible": m <= 2.0 / (eta * certs["alpha"] * certs["r_h"]),
    }
    if updated is not None:
        updated = np.asarray(updated, dtype=bool)
        steps = max(len(updated) - m + 1, 1)
        p = expected_update_rate(m)
        sigma = math.sqrt(p * (1.0 - p) / steps)
        freq = float(updated.sum()) / steps
        report["update_rate"] = freq
        report["update_rate_expected"] = p
        report["update_rate_sigma"] = sigma
        report["update_rate_ok"] = abs(freq - p) <= 3.0 * sigma
    return report


def fit_loglog(t_values, means):
    """Closed-form least squares of log(mean) on log(T).

    Returns (slope, intercept, slope stderr, residuals).
    """
    t_values = np.asarray(t_values, dtype=float)
    means = np.asarray(means, dtype=float)
    if np.any(means <= 0.0):
        raise ValueError("scaling fits need positive mean regrets")
    x = np.log(t_values)
    y = np.log(means)
    xc = x - x.mean()
    slope = float(xc @ y / (xc @ xc))
    intercept = float(y.mean() - slope * x.mean())
    residuals = y - (intercept + slope * x)
    dof = max(len(x) - 2, 1)
    stderr = math.sqrt(float(residuals @ residuals) / dof / float(xc @ xc))
    return slope, intercept, stderr, residuals


# ---------------------------------------------------------------------------
# sweep cells (module level so process pools can pickle them)

def _bcom_cell(args):
    family_kwargs, horizon, seed, arms = args
    fk = dict(family_kwargs)
    c_eta = fk.pop("c_eta", 1.0)
    delta_scale = fk.pop("delta_scale", 1.0)
    instance_seed = fk.pop("instance_seed", 0) + 1_000_003 * seed + horizon
    cfg = BcomInstanceConfig(horizon=horizon, seed=instance_seed, **fk)
    inst = make_synthetic_bcom_instance(cfg)
    eta = c_eta / math.sqrt(horizon)
    alpha = inst.certificates["alpha"]
    z_star, _ = best_fixed_comparator(inst.losses, inst.set_, seed=seed)
    stacked = stack_unary(inst.losses[cfg.m - 1:])
    comp_series = np.zeros(horizon)
    comp_series[cfg.m - 1:] = stacked.per_step_values(z_star)
    out = []
    for arm in arms:
        t0 = time.perf_counter()
        if arm == "newton":
            run = run_bcoam(inst.losses, inst.set_, eta=eta, m=cfg.m,
                            alpha=alpha, horizon=horizon, seed=seed)
        else:
            delta = min(1.0, delta_scale * horizon ** -0.25)
            run = run_spherical_baseline(inst.losses, inst.set_, eta=eta,
                                         delta=delta, m=cfg.m,
                                         horizon=horizon, seed=seed)
        record = compute_regret(run.incurred, comp_series, start=cfg.m,
                                comparator_point=z_star, seed=seed)
        certs = inst.certificates
        mb = memory_bound(horizon, cfg.m, cfg.d, eta, certs["alpha"],
                          certs["beta"], math.sqrt(cfg.m) * certs["g_f"],
                          certs["diameter"], certs["r_h"])
        out.append({
            "t": horizon,
            "seed": seed,
            "arm": arm,
            "final_regret": record.final_regret,
            "memory_bound": mb,
            "bound_ok": bool(record.final_regret <= mb),
            "wall_clock": time.perf_counter() - t0,
        })
    return out


def _control_cell(args):
    family_kwargs, horizon, seed, arms = args
    fk = dict(family_kwargs)
    if set(arms) - {"newton"}:
        raise ValueError("control sweeps support only the newton arm")
    c_eta = fk.pop("c_eta", 1.0)
    gamma = fk.pop("gamma", 0.5)
    system_seed = fk.pop("system_seed", 0)
    r_m = fk.pop("r_m", 1.0)
    r_we = fk.pop("r_we", 0.5)
    cost_kind = fk.pop("cost_kind", "quadratic")
    alpha_c = fk.pop("alpha", 0.5)
    beta_c = fk.pop("beta", 2.0)
    d_x = fk.pop("d_x", 2)
    d_u = fk.pop("d_u", 1)
    d_y = fk.pop("d_y", 1)
    kappa = fk.pop("kappa", 2.0)
    kappa_sys = fk.pop("kappa_sys", 1.5)
    w_kind = fk.pop("w_kind", "sinusoidal")
    w_period = fk.pop("w_period", 61)
    e_kind = fk.pop("e_kind", "seeded_bounded")
    e_period = fk.pop("e_period", 47)
    if fk:
        raise ValueError(f"unknown control family keys {sorted(fk)}")
    inst, ctrl = make_stabilizable_system(
        d_x, d_u, d_y, kappa=kappa, gamma=gamma, kappa_sys=kappa_sys,
        seed=system_seed,
    )
    cost = CostSchedule(cost_kind, dim=d_y + d_u, alpha=alpha_c, beta=beta_c,
                        seed=1000 + seed)
    w_sched = AdversarySchedule(w_kind, dim=d_x, seed=2000 + seed,
                                radius=r_we, period=w_period)
    e_sched = AdversarySchedule(e_kind, dim=d_y, seed=3000 + seed,
                                radius=r_we, period=e_period)
    m = default_memory(horizon, gamma)
    eta = c_eta / math.sqrt(horizon)
    t0 = time.perf_counter()
    run = run_control(inst, ctrl, cost, w_sched, e_sched, m=m, r_m=r_m,
                      eta=eta, horizon=horizon, seed=seed)
    problem = ControlComparatorProblem(
        instance=inst, controller=ctrl, cost=cost, w_schedule=w_sched,
        e_schedule=e_sched, m=m, horizon=horizon,
    )
    d = m * d_u * d_y
    set_ = EuclideanBall(np.zeros(d), run.metadata["set_radius"])
    w_star, _ = best_fixed_comparator(problem, set_, max_iter=300_000, seed=seed)
    comp_series = _fixed_policy_costs(problem, w_star)
    record = compute_regret(run.incurred, comp_series, start=1,
                            comparator_point=w_star, seed=seed)
    meta = run.metadata
    mb = memory_bound(horizon, m, d, eta, cost.alpha, cost.beta,
                      meta["g_unary_cert"], 2.0 * meta["set_radius"],
                      meta["r_h_measured"])
    return [{
        "t": horizon,
        "seed": seed,
        "arm": "newton",
        "final_regret": record.final_regret,
        "memory_bound": mb,
        "bound_ok": bool(record.final_regret <= mb),
        "discrepancy_total": meta["discrepancy_total"],
        "reduction_slack": meta["reduction_slack"],
        "wall_clock": time.perf_counter() - t0,
    }]


def _fixed_policy_costs(problem, w_star):
    policy = unembed(w_star, problem.m, problem.instance.d_u,
                     problem.instance.d_y)
    _, _, costs, _ = simulate_drc(
        problem.instance, problem.controller, problem.cost,
        problem.w_schedule, problem.e_schedule, policy, problem.horizon,
    )
    return costs


_FAMILIES = {"bcom": _bcom_cell, "control": _control_cell}


def scaling_sweep(family, t_grid, seeds, arm="newton", jobs=1, **family_kwargs):
    """Run the (T, seed) grid, average, and fit the log-log slope.

    ``arm`` is "newton", "spherical", or "both" (bcom only; both arms of a
    cell share the instance, comparator, and seed).  Any cell failure
    aborts with the cell identity attached.
    """
    t_grid = sorted(int(t) for t in t_grid)
    if len(t_grid) < 4:
        raise ValueError(f"need at least 4 grid points, got {len(t_grid)}")
    if seeds < 5:
        raise ValueError(f"need at least 5 seeds per grid point, got {seeds}")
    if family not in _FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if arm not in ("newton", "spherical", "both"):
        raise ValueError(f"unknown arm {arm!r}")
    arms = {"newton": ("newton",), "spherical": ("spherical",),
            "both": ("newton", "spherical")}[arm]
    runner = _FAMILIES[family]
    cells = [
        (family_kwargs, horizon, seed, arms)
        for horizon in t_grid
        for seed in range(seeds)
    ]
    points = []
    t0 = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(cell, pool.submit(runner, cell)) for cell in cells]
            for cell, fut in futures:
                try:
                    points.extend(fut.result())
                except Exception as exc:
                    raise RuntimeError(
                        f"sweep cell T={cell[1]} seed={cell[2]} failed: {exc}"
                    ) from exc
    else:
        for cell in cells:
            try:
                points.extend(runner(cell))
            except Exception as exc:
                raise RuntimeError(
                    f"sweep cell T={cell[1]} seed={cell[2]} failed: {exc}"
                ) from exc
    points.sort(key=lambda p: (p["arm"], p["t"], p["seed"]))

    fits = {}
    for arm_name in arms:
        means, errs = [], []
        for horizon in t_grid:
            finals = np.array([
                p["final_regret"] for p in points
                if p["arm"] == arm_name and p["t"] == horizon
            ])
            means.append(finals.mean())
            errs.append(finals.std(ddof=1) / math.sqrt(len(finals)))
        slope, intercept, stderr, residuals = fit_loglog(t_grid, means)
        fits[arm_name] = ArmFit(
            t_grid=np.array(t_grid, dtype=float),
            means=np.array(means),
            stderrs=np.array(errs),
            slope=slope,
            intercept=intercept,
            slope_ci=1.96 * stderr,
            residuals=residuals,
        )
    metadata = {
        "family": family,
        "seeds": seeds,
        "arm": arm,
        "jobs": jobs,
        "family_kwargs": dict(family_kwargs),
        "wall_clock": time.perf_counter() - t0,
    }
    return SweepResult(points=points, fits=fits, metadata=metadata)
