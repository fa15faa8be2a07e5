"""Bandit learners: occasional-update Newton steps under a growing metric.

Two second-order variants share the same machinery.  The memory learner
updates only at randomly spaced epochs (at least m steps apart) and
applies each gradient estimate one epoch late; the delayed no-memory
learner updates its metric every step and applies estimates a fixed
number of steps late.  A first-order spherical-smoothing baseline rides
the same update schedule for paired comparisons.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    ConvexSet,
    logdet,
    mahalanobis_project,
    matrix_entries,
    sample_unit_sphere,
)

__all__ = [
    "BcomParams",
    "DelayParams",
    "BaselineParams",
    "BcomState",
    "UpdateTrace",
    "RunResult",
    "EstimatorReport",
    "bcoam_step",
    "bco_delay_step",
    "run_bcoam",
    "run_bco_delay",
    "run_spherical_baseline",
    "estimator_mean_check",
]


@dataclass
class BcomParams:
    """Inputs of the memory learner: decision set, step size, memory, curvature."""

    set_: ConvexSet
    eta: float
    m: int
    alpha: float
    metric_scale: float = 1.0  # initial metric = scale * I

    def __post_init__(self):
        if self.eta <= 0 or self.alpha <= 0:
            raise ValueError("eta and alpha must be positive")
        if self.m < 1:
            raise ValueError("memory must be at least 1")
        if self.metric_scale <= 0:
            raise ValueError("metric scale must be positive")


@dataclass
class DelayParams:
    """Inputs of the delayed no-memory learner."""

    set_: ConvexSet
    eta: float
    d0: int
    alpha: float
    metric_scale: float = 1.0

    def __post_init__(self):
        if self.eta <= 0 or self.alpha <= 0:
            raise ValueError("eta and alpha must be positive")
        if self.d0 < 1:
            raise ValueError("delay must be at least 1")


@dataclass
class BaselineParams:
    """Inputs of the spherical-smoothing baseline."""

    set_: ConvexSet
    eta: float
    delta: float
    m: int

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise ValueError("delta must lie in (0, 1]")
        if self.eta <= 0 or self.m < 1:
            raise ValueError("eta must be positive and memory at least 1")


def _sym_powers(a):
    lam, vec = np.linalg.eigh(a)
    if float(lam[0]) <= 0.0:
        raise ValueError(f"metric lost positive definiteness (lambda_min={lam[0]:.3e})")
    sqrt = (vec * np.sqrt(lam)) @ vec.T
    isqrt = (vec / np.sqrt(lam)) @ vec.T
    return (sqrt + sqrt.T) / 2.0, (isqrt + isqrt.T) / 2.0, float(np.sum(np.log(lam)))


@dataclass
class BcomState:
    """Learner state after step t; ``z`` is the point to play at t+1."""

    t: int
    o: np.ndarray
    a_hat: np.ndarray
    a_sqrt: np.ndarray
    a_isqrt: np.ndarray
    a_logdet: float
    v: np.ndarray
    z: np.ndarray
    g_store: dict
    a_store: dict
    epoch: int
    bernoulli_history: tuple
    clock: int
    v_clock: int
    o_clock: int


@dataclass
class UpdateTrace:
    """Update times with per-update step norms and metric volumes."""

    horizon: int
    m: int
    update_times: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    logdets: list = field(default_factory=list)
    dual_norms: list = field(default_factory=list)
    v_clocks: list = field(default_factory=list)
    o_clocks: list = field(default_factory=list)

    def count(self):
        return len(self.update_times)

    def min_gap(self):
        s = self.update_times
        if len(s) < 2:
            return None
        return int(min(b - a for a, b in zip(s, s[1:])))


@dataclass
class RunResult:
    """Trajectory of one run: decisions, observed values, update trace."""

    decisions: np.ndarray
    incurred: np.ndarray
    start: int
    trace: UpdateTrace
    updated: np.ndarray
    o_norms: np.ndarray
    logdets: np.ndarray
    metadata: dict


def _init_state(set_, dim, scale, sphere_rng, t0):
    o = set_.center()
    a_hat = scale * np.eye(dim)
    a_sqrt, a_isqrt, a_ld = _sym_powers(a_hat)
    clock = 1  # o fixed at clock 1
    v = sample_unit_sphere(dim, sphere_rng)
    clock += 1
    return BcomState(
        t=t0,
        o=o,
        a_hat=a_hat,
        a_sqrt=a_sqrt,
        a_isqrt=a_isqrt,
        a_logdet=a_ld,
        v=v,
        z=o + a_isqrt @ v,
        g_store={},
        a_store={},
        epoch=1,
        bernoulli_history=(),
        clock=clock,
        v_clock=clock,
        o_clock=1,
    )


def _delayed_o_update(state, params, epoch_key):
    """Projected step using the stored gradient and metric of ``epoch_key``."""
    a_ref = state.a_store.get(epoch_key)
    g_ref = state.g_store.get(epoch_key)
    if a_ref is None or g_ref is None:
        return state.o, 0.0  # warm-up: nothing stored yet, freeze o
    target = state.o - params.eta * np.linalg.solve(a_ref, g_ref)
    o_new = mahalanobis_project(params.set_, a_ref, target)
    return o_new, float(np.linalg.norm(o_new - state.o))


def bcoam_step(state, f_value, h_t, params, bernoulli_rng, sphere_rng, trace=None):
    """One step of the memory learner at time t = state.t.

    Draws the update coin; on an update epoch accumulates the metric,
    forms the one-point gradient estimate from ``f_value``, applies the
    previous epoch's estimate through a metric projection, and resamples
    the exploration direction.  Otherwise the state is frozen.

    Returns (new_state, updated).
    """
    t = state.t
    m = params.m
    b = bool(bernoulli_rng.random() < 1.0 / m)
    gate = b and not any(state.bernoulli_history[: m - 1])
    history = ((b,) + state.bernoulli_history)[: max(m - 1, 0)]

    if not gate:
        return (
            BcomState(
                t=t + 1,
                o=state.o,
                a_hat=state.a_hat,
                a_sqrt=state.a_sqrt,
                a_isqrt=state.a_isqrt,
                a_logdet=state.a_logdet,
                v=state.v,
                z=state.z,
                g_store=state.g_store,
                a_store=state.a_store,
                epoch=state.epoch,
                bernoulli_history=history,
                clock=state.clock,
                v_clock=state.v_clock,
                o_clock=state.o_clock,
            ),
            False,
        )

    tau = state.epoch
    a_new = state.a_hat + (params.eta * params.alpha / 2.0) * matrix_entries(h_t)
    g_new = float(len(state.o)) * float(f_value) * (state.a_sqrt @ state.v)
    a_sqrt, a_isqrt, a_ld = _sym_powers(a_new)

    g_store = {tau: g_new}
    a_store = {tau: a_new}
    if tau - 1 in state.g_store:
        g_store[tau - 1] = state.g_store[tau - 1]
        a_store[tau - 1] = state.a_store[tau - 1]

    o_new, step_norm = _delayed_o_update(state, params, tau - 1)
    clock = state.clock + 1
    o_clock = clock
    v_new = sample_unit_sphere(len(state.o), sphere_rng)
    clock += 1
    v_clock = clock

    if trace is not None:
        trace.update_times.append(t)
        trace.step_norms.append(step_norm)
        trace.logdets.append(a_ld)
        dual = float(np.sqrt(g_new @ np.linalg.solve(a_new, g_new)))
        trace.dual_norms.append(dual)
        trace.v_clocks.append(state.v_clock)  # clock of the v used at this epoch
        trace.o_clocks.append(state.o_clock)  # clock at which that o was fixed

    return (
        BcomState(
            t=t + 1,
            o=o_new,
            a_hat=a_new,
            a_sqrt=a_sqrt,
            a_isqrt=a_isqrt,
            a_logdet=a_ld,
            v=v_new,
            z=o_new + a_isqrt @ v_new,
            g_store=g_store,
            a_store=a_store,
            epoch=tau + 1,
            bernoulli_history=history,
            clock=clock,
            v_clock=v_clock,
            o_clock=o_clock,
        ),
        True,
    )


def bco_delay_step(state, loss_value, h_t, params, sphere_rng, trace=None):
    """One step of the delayed no-memory learner at time t = state.t.

    Every step accumulates the metric, forms the gradient estimate, and
    applies the estimate from ``d0 - 1`` steps back (skipping the update
    while that index is still non-positive), then resamples the direction.
    """
    t = state.t
    a_new = state.a_hat + (params.eta * params.alpha / 2.0) * matrix_entries(h_t)
    g_new = float(len(state.o)) * float(loss_value) * (state.a_sqrt @ state.v)
    a_sqrt, a_isqrt, a_ld = _sym_powers(a_new)

    g_store = dict(state.g_store)
    a_store = dict(state.a_store)
    g_store[t] = g_new
    a_store[t] = a_new

    ref = t - params.d0 + 1
    if ref >= 1:
        # stores are keyed by absolute time for the delayed variant
        target = state.o - params.eta * np.linalg.solve(a_store[ref], g_store[ref])
        o_new = mahalanobis_project(params.set_, a_store[ref], target)
        step_norm = float(np.linalg.norm(o_new - state.o))
    else:
        o_new, step_norm = state.o, 0.0
    for s in list(g_store):
        if s <= ref:
            del g_store[s], a_store[s]

    clock = state.clock + 1
    o_clock = clock
    v_new = sample_unit_sphere(len(state.o), sphere_rng)
    clock += 1

    if trace is not None:
        trace.update_times.append(t)
        trace.step_norms.append(step_norm)
        trace.logdets.append(a_ld)
        dual = float(np.sqrt(g_new @ np.linalg.solve(a_new, g_new)))
        trace.dual_norms.append(dual)
        trace.v_clocks.append(state.v_clock)
        trace.o_clocks.append(state.o_clock)

    return (
        BcomState(
            t=t + 1,
            o=o_new,
            a_hat=a_new,
            a_sqrt=a_sqrt,
            a_isqrt=a_isqrt,
            a_logdet=a_ld,
            v=v_new,
            z=o_new + a_isqrt @ v_new,
            g_store=g_store,
            a_store=a_store,
            epoch=state.epoch + 1,
            bernoulli_history=(),
            clock=clock,
            v_clock=clock,
            o_clock=o_clock,
        ),
        True,
    )


def _run_streams(seed):
    root = np.random.SeedSequence(entropy=int(seed))
    bern = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(0,)))
    sphere = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(1,)))
    return root, bern, sphere


def init_memory_learner(set_, m, metric_scale, bern_rng, sphere_rng):
    """Warm-started learner state plus the m exploration plays z_1..z_m.

    Draws m sphere directions and the m-1 warm-up coins so that paired runs
    consume both streams identically regardless of who drives the loop.
    """
    d = set_.dim
    state = _init_state(set_, d, metric_scale, sphere_rng, t0=1)
    plays = np.empty((m, d))
    plays[0] = state.z
    for t in range(2, m + 1):
        v = sample_unit_sphere(d, sphere_rng)
        state.clock += 1
        state = BcomState(
            **{
                **state.__dict__,
                "t": t,
                "v": v,
                "z": state.o + state.a_isqrt @ v,
                "v_clock": state.clock,
            }
        )
        plays[t - 1] = state.z
    # warm-up coins b_1..b_{m-1}; the caller's loop draws b_t for t >= m
    warmup = tuple(bool(bern_rng.random() < 1.0 / m) for _ in range(m - 1))
    state.bernoulli_history = warmup[::-1][: max(m - 1, 0)]
    return state, plays


def run_bcoam(losses, set_, eta, m, alpha, horizon, seed=0, metric_scale=1.0):
    """Full memory-learner run over ``losses``; deterministic in ``seed``.

    Losses are evaluated on the actually played windows starting at t = m.
    Returns a RunResult whose ``incurred`` entries before the start index
    are zero.
    """
    t_start = time.perf_counter()
    if len(losses) < horizon:
        raise ValueError(f"need {horizon} losses, got {len(losses)}")
    params = BcomParams(set_=set_, eta=eta, m=m, alpha=alpha, metric_scale=metric_scale)
    _, bern_rng, sphere_rng = _run_streams(seed)
    d = set_.dim

    state, init_plays = init_memory_learner(set_, m, metric_scale, bern_rng, sphere_rng)
    decisions = np.empty((horizon, d))
    decisions[:m] = init_plays

    incurred = np.zeros(horizon)
    updated = np.zeros(horizon, dtype=bool)
    o_norms = np.zeros(horizon)
    logdets = np.zeros(horizon)
    o_norms[: m - 1] = np.linalg.norm(state.o)
    logdets[: m - 1] = state.a_logdet
    trace = UpdateTrace(horizon=horizon, m=m)

    for t in range(m, horizon + 1):
        window = decisions[t - m:t]
        f_value = losses[t - 1].eval(window)
        h_t = losses[t - 1].hessian_t()
        state, did = bcoam_step(state, f_value, h_t, params, bern_rng, sphere_rng, trace)
        incurred[t - 1] = f_value
        updated[t - 1] = did
        o_norms[t - 1] = float(np.linalg.norm(state.o))
        logdets[t - 1] = state.a_logdet
        if t < horizon:
            decisions[t] = state.z

    metadata = {
        "algorithm": "bcoam",
        "eta": eta,
        "m": m,
        "alpha": alpha,
        "horizon": horizon,
        "seed": int(seed),
        "metric_scale": metric_scale,
        "wall_clock": time.perf_counter() - t_start,
    }
    return RunResult(
        decisions=decisions,
        incurred=incurred,
        start=m,
        trace=trace,
        updated=updated,
        o_norms=o_norms,
        logdets=logdets,
        metadata=metadata,
    )


def run_bco_delay(losses, set_, eta, d0, alpha, horizon, seed=0, metric_scale=1.0):
    """Full delayed no-memory run; losses are evaluated at single points."""
    t_start = time.perf_counter()
    if len(losses) < horizon:
        raise ValueError(f"need {horizon} losses, got {len(losses)}")
    params = DelayParams(set_=set_, eta=eta, d0=d0, alpha=alpha, metric_scale=metric_scale)
    _, _, sphere_rng = _run_streams(seed)
    d = set_.dim

    state = _init_state(set_, d, metric_scale, sphere_rng, t0=1)
    decisions = np.empty((horizon, d))
    decisions[0] = state.z
    incurred = np.zeros(horizon)
    updated = np.zeros(horizon, dtype=bool)
    o_norms = np.zeros(horizon)
    logdets = np.zeros(horizon)
    trace = UpdateTrace(horizon=horizon, m=1)

    for t in range(1, horizon + 1):
        z_t = decisions[t - 1]
        f_value = losses[t - 1].eval([z_t])
        h_t = losses[t - 1].hessian_t()
        state, _ = bco_delay_step(state, f_value, h_t, params, sphere_rng, trace)
        incurred[t - 1] = f_value
        updated[t - 1] = True
        o_norms[t - 1] = float(np.linalg.norm(state.o))
        logdets[t - 1] = state.a_logdet
        if t < horizon:
            decisions[t] = state.z

    metadata = {
        "algorithm": "bco_delay",
        "eta": eta,
        "d0": d0,
        "alpha": alpha,
        "horizon": horizon,
        "seed": int(seed),
        "metric_scale": metric_scale,
        "wall_clock": time.perf_counter() - t_start,
    }
    return RunResult(
        decisions=decisions,
        incurred=incurred,
        start=1,
        trace=trace,
        updated=updated,
        o_norms=o_norms,
        logdets=logdets,
        metadata=metadata,
    )


def run_spherical_baseline(losses, set_, eta, delta, m, horizon, seed=0):
    """First-order smoothing baseline on the memory learner's schedule.

    Fixed exploration metric (radius ``delta``), plain projected gradient
    step with the current estimate.  Consumes the Bernoulli and sphere
    streams exactly like ``run_bcoam`` so update times pair across arms.
    """
    t_start = time.perf_counter()
    if len(losses) < horizon:
        raise ValueError(f"need {horizon} losses, got {len(losses)}")
    params = BaselineParams(set_=set_, eta=eta, delta=delta, m=m)
    _, bern_rng, sphere_rng = _run_streams(seed)
    d = set_.dim

    o = set_.center()
    vs = [sample_unit_sphere(d, sphere_rng) for _ in range(m)]
    decisions = np.empty((horizon, d))
    for t in range(1, m + 1):
        decisions[t - 1] = o + delta * vs[t - 1]
    v = vs[-1]
    history = tuple(bool(bern_rng.random() < 1.0 / m) for _ in range(m - 1))[::-1]

    incurred = np.zeros(horizon)
    updated = np.zeros(horizon, dtype=bool)
    o_norms = np.zeros(horizon)
    logdets = np.full(horizon, -2.0 * d * np.log(delta))
    o_norms[: m - 1] = np.linalg.norm(o)
    trace = UpdateTrace(horizon=horizon, m=m)

    z = decisions[m - 1]
    for t in range(m, horizon + 1):
        window = decisions[t - m:t]
        f_value = losses[t - 1].eval(window)
        incurred[t - 1] = f_value
        b = bool(bern_rng.random() < 1.0 / m)
        gate = b and not any(history[: m - 1])
        history = ((b,) + history)[: max(m - 1, 0)]
        if gate:
            g = (d / delta) * f_value * v
            o_new = set_.euclidean_project(o - eta * g)
            trace.update_times.append(t)
            trace.step_norms.append(float(np.linalg.norm(o_new - o)))
            trace.logdets.append(float(logdets[t - 1]))
            trace.dual_norms.append(float(delta * np.linalg.norm(g)))
            o = o_new
            v = sample_unit_sphere(d, sphere_rng)
            z = o + delta * v
            updated[t - 1] = True
        o_norms[t - 1] = float(np.linalg.norm(o))
        if t < horizon:
            decisions[t] = z

    metadata = {
        "algorithm": "spherical_baseline",
        "eta": eta,
        "delta": delta,
        "m": m,
        "horizon": horizon,
        "seed": int(seed),
        "wall_clock": time.perf_counter() - t_start,
    }
    return RunResult(
        decisions=decisions,
        incurred=incurred,
        start=m,
        trace=trace,
        updated=updated,
        o_norms=o_norms,
        logdets=logdets,
        metadata=metadata,
    )


@dataclass
class EstimatorReport:
    """Two-route check of the one-point gradient estimator's mean."""

    empirical_mean: np.ndarray
    smoothed_gradient: np.ndarray
    gap: float
    band: float
    within_band: bool
    exact_gradient: np.ndarray
    exact_gap: float
    per_coordinate_gap: np.ndarray
    per_coordinate_band: np.ndarray


def estimator_mean_check(unary, o, metric, n_samples, rng):
    """Monte-Carlo check that the estimator's mean is the smoothed gradient.

    The estimator route averages ``d * f(o + A^{-1/2} v) A^{1/2} v`` over
    sphere draws.  The oracle route averages the analytic gradient over
    ball draws, which is the gradient of the ellipsoidal smoothing of f.
    The two use independent substreams; the per-coordinate band is three
    combined standard errors.  For quadratics the exact gradient at o is
    an additional reference (the smoothing bias vanishes).
    """
    n_samples = int(n_samples)
    if n_samples < 10_000:
        raise ValueError(f"need at least 1e4 samples, got {n_samples}")
    eval_u, grad_u = unary[0], unary[1]
    o = np.asarray(o, dtype=float).ravel()
    d = o.size
    a = matrix_entries(metric)
    a_sqrt, a_isqrt, _ = _sym_powers(a)

    seeds = rng.integers(0, 2**63 - 1, size=2)
    rng_est = np.random.default_rng(int(seeds[0]))
    rng_ora = np.random.default_rng(int(seeds[1]))

    vs = rng_est.standard_normal((n_samples, d))
    vs /= np.linalg.norm(vs, axis=1, keepdims=True)
    values = np.asarray(eval_u(o + vs @ a_isqrt), dtype=float)
    terms = d * values[:, None] * (vs @ a_sqrt)
    empirical = terms.mean(axis=0)
    se_est = terms.std(axis=0, ddof=1) / np.sqrt(n_samples)

    us = rng_ora.standard_normal((n_samples, d))
    us /= np.linalg.norm(us, axis=1, keepdims=True)
    us *= rng_ora.random((n_samples, 1)) ** (1.0 / d)
    grads = np.asarray(grad_u(o + us @ a_isqrt), dtype=float)
    smoothed = grads.mean(axis=0)
    se_ora = grads.std(axis=0, ddof=1) / np.sqrt(n_samples)

    per_gap = empirical - smoothed
    per_band = 3.0 * np.sqrt(se_est**2 + se_ora**2)
    exact = np.asarray(grad_u(o), dtype=float)
    return EstimatorReport(
        empirical_mean=empirical,
        smoothed_gradient=smoothed,
        gap=float(np.linalg.norm(per_gap)),
        band=float(np.linalg.norm(per_band)),
        within_band=bool(np.all(np.abs(per_gap) <= per_band)),
        exact_gradient=exact,
        exact_gap=float(np.linalg.norm(empirical - exact)),
        per_coordinate_gap=per_gap,
        per_coordinate_band=per_band,
    )
