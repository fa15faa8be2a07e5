"""Partially observed linear control and its reduction to memory losses.

Systems evolve as x' = Ax + Bu + w with observations y = Cx + e.  A
stabilizing output-feedback gain K with a certified similarity contraction
induces a Markov operator whose blocks decay geometrically; disturbance
response policies act on the counterfactual signals y_t(K) reconstructed
from that operator.  ``reduce_to_bcom`` packages each step's cost as an
affine-memory loss over embedded policies, and ``run_control`` wires the
whole loop to the Bernoulli-gated Newton learner.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bco import BcomParams, UpdateTrace, _run_streams, bcoam_step, init_memory_learner
from .geometry import EuclideanBall, OperatorL1Ball
from .losses import (
    AffineMemoryLoss,
    PseudoHuberRegularized,
    Quadratic,
    convolution_modulus_lower_bound,
)


class ShapeError(ValueError):
    """Operands whose dimensions cannot compose."""


class HistoryError(ValueError):
    """Misaligned observation/policy histories."""


class ConstructionError(RuntimeError):
    """System sampling failed to meet its certificates within retries."""


class TruncationBudgetError(ValueError):
    """Requested memory too short for the discrepancy budget."""


def _op_norm(mat):
    return float(np.linalg.norm(mat, 2))


@dataclass(frozen=True)
class LdsInstance:
    """System matrices plus the norm cap they are certified under."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    x1: np.ndarray
    kappa_sys: float

    def __post_init__(self):
        object.__setattr__(self, "a", np.array(self.a, dtype=float))
        object.__setattr__(self, "b", np.array(self.b, dtype=float))
        object.__setattr__(self, "c", np.array(self.c, dtype=float))
        object.__setattr__(self, "x1", np.array(self.x1, dtype=float).ravel())
        d_x = self.a.shape[0]
        if self.a.shape != (d_x, d_x):
            raise ShapeError(f"state matrix must be square, got {self.a.shape}")
        if self.b.shape[0] != d_x or self.b.ndim != 2:
            raise ShapeError(f"input matrix rows {self.b.shape} do not match state dim {d_x}")
        if self.c.shape[1] != d_x or self.c.ndim != 2:
            raise ShapeError(f"output matrix cols {self.c.shape} do not match state dim {d_x}")
        if self.x1.size != d_x:
            raise ShapeError(f"initial state has size {self.x1.size}, expected {d_x}")
        worst = max(_op_norm(self.a), _op_norm(self.b), _op_norm(self.c))
        if worst > self.kappa_sys + 1e-9:
            raise ConstructionError(
                f"operator norm {worst:.6g} exceeds the system cap {self.kappa_sys:.6g}"
            )

    @property
    def d_x(self):
        return self.a.shape[0]

    @property
    def d_u(self):
        return self.b.shape[1]

    @property
    def d_y(self):
        return self.c.shape[0]


@dataclass(frozen=True)
class StabilizingController:
    """Output-feedback gain with a similarity-contraction certificate.

    The closed loop A + BKC must equal H L H^{-1} entrywise to 1e-9, with
    max{|K|, |H|, |H^{-1}|} <= kappa and |L| <= 1 - gamma.
    """

    k: np.ndarray
    h: np.ndarray
    l: np.ndarray
    kappa: float
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "k", np.array(self.k, dtype=float))
        object.__setattr__(self, "h", np.array(self.h, dtype=float))
        object.__setattr__(self, "l", np.array(self.l, dtype=float))
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"decay rate must be in (0, 1], got {self.gamma}")
        if self.kappa < 1.0:
            raise ValueError(f"conditioning bound must be >= 1, got {self.kappa}")

    def h_inv(self):
        return np.linalg.inv(self.h)

    def verify(self, instance):
        """Raise ConstructionError if any certificate clause fails."""
        closed = instance.a + instance.b @ self.k @ instance.c
        similar = self.h @ self.l @ self.h_inv()
        gap = float(np.max(np.abs(closed - similar)))
        if gap > 1e-9:
            raise ConstructionError(f"similarity identity off by {gap:.3g}")
        cond = max(_op_norm(self.k), _op_norm(self.h), _op_norm(self.h_inv()))
        if cond > self.kappa + 1e-9:
            raise ConstructionError(
                f"conditioning {cond:.6g} exceeds certificate {self.kappa:.6g}"
            )
        if _op_norm(self.l) > 1.0 - self.gamma + 1e-9:
            raise ConstructionError(
                f"contraction norm {_op_norm(self.l):.6g} exceeds {1.0 - self.gamma:.6g}"
            )


def make_stabilizable_system(
    d_x, d_u, d_y, kappa, gamma, kappa_sys, seed=0, retries=64
):
    """Sample an (instance, controller) pair passing every certificate.

    H is drawn well conditioned, L contracting at rate gamma, K and B, C
    bounded; A is back-solved from the similarity identity and the whole
    draw is shrunk geometrically until A fits under kappa_sys.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"decay rate must be in (0, 1], got {gamma}")
    if kappa < 1.0:
        raise ValueError(f"conditioning bound must be >= 1, got {kappa}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))

    # fixed random shapes; only amplitudes shrink across retries.  H stays
    # mildly conditioned and L keeps slack under 1 - gamma so the lag-decay
    # envelope (which ignores the conditioning of H) still holds.
    frame_q, _ = np.linalg.qr(rng.standard_normal((d_x, d_x)))
    frame_r, _ = np.linalg.qr(rng.standard_normal((d_x, d_x)))
    eig_span = min(kappa, 1.15)
    eigs = np.exp(rng.uniform(np.log(1.0 / eig_span), np.log(eig_span), size=d_x))
    h = frame_q @ np.diag(eigs) @ frame_r.T
    l_raw = rng.standard_normal((d_x, d_x))
    k_raw = rng.standard_normal((d_u, d_y))
    b_raw = rng.standard_normal((d_x, d_u))
    c_raw = rng.standard_normal((d_y, d_x))

    l_target = 0.7 * (1.0 - gamma)
    l_mat = l_raw * (l_target / _op_norm(l_raw)) if l_target > 0 else np.zeros_like(l_raw)
    shrink = 1.0
    cap = 0.9 * min(kappa_sys, kappa)
    for _ in range(retries):
        k_mat = k_raw * (shrink * 0.5 * cap / _op_norm(k_raw))
        b_mat = b_raw * (shrink * 0.9 * kappa_sys / _op_norm(b_raw))
        c_mat = c_raw * (shrink * 0.9 * kappa_sys / _op_norm(c_raw))
        a_mat = h @ l_mat @ np.linalg.inv(h) - b_mat @ k_mat @ c_mat
        if _op_norm(a_mat) <= kappa_sys:
            instance = LdsInstance(
                a=a_mat, b=b_mat, c=c_mat, x1=np.zeros(d_x), kappa_sys=kappa_sys
            )
            controller = StabilizingController(
                k=k_mat, h=h, l=l_mat, kappa=kappa, gamma=gamma
            )
            controller.verify(instance)
            return instance, controller
        shrink *= 0.8
    raise ConstructionError(
        f"could not fit the state matrix under {kappa_sys} in {retries} retries"
    )


def lds_step(x, u, w, instance):
    """One exact state transition x' = Ax + Bu + w."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    if x.size != instance.d_x or u.size != instance.d_u or w.size != instance.d_x:
        raise ShapeError(
            f"got sizes x={x.size}, u={u.size}, w={w.size} for dims "
            f"({instance.d_x}, {instance.d_u})"
        )
    return instance.a @ x + instance.b @ u + w


def observe(x, e, instance):
    """Observation y = Cx + e."""
    x = np.asarray(x, dtype=float).ravel()
    e = np.asarray(e, dtype=float).ravel()
    if x.size != instance.d_x or e.size != instance.d_y:
        raise ShapeError(f"got sizes x={x.size}, e={e.size}")
    return instance.c @ x + e


@dataclass(frozen=True)
class MarkovOperator:
    """Closed-loop impulse response from policy corrections to (y, u) pairs.

    ``blocks[i]`` maps the control correction injected i steps ago to
    today's deviation; block 0 is [0; I] and blocks decay geometrically
    at the certified contraction rate.
    """

    blocks: tuple
    d_y: int
    d_u: int
    kappa: float
    gamma: float
    decay_scale: float  # prefactor of the (1 - gamma)^{i-1} envelope

    @property
    def n_blocks(self):
        return len(self.blocks) - 1  # truncation length N; blocks run 0..N

    def decay_bound(self, i):
        if i < 1:
            raise ValueError("the envelope covers lags >= 1")
        return self.decay_scale * (1.0 - self.gamma) ** (i - 1)

    def tail_bound(self, from_i):
        """Upper bound on sum of operator norms for lags >= from_i."""
        if from_i < 1:
            raise ValueError("the envelope covers lags >= 1")
        return self.decay_scale * (1.0 - self.gamma) ** (from_i - 1) / self.gamma

    def y_block(self, i):
        return self.blocks[i][: self.d_y]

    def sum_norm_bound(self):
        return 1.0 + self.tail_bound(1)


def markov_operator(instance, controller, n):
    """Blocks 0..n by iterated closed-loop multiplication.

    Each measured operator norm is checked against the certificate
    envelope sqrt(d_x (1 + kappa^2)) kappa_sys^2 (1 - gamma)^{i-1}.
    """
    if n < 1:
        raise ValueError(f"need at least one lag, got {n}")
    d_y, d_u, d_x = instance.d_y, instance.d_u, instance.d_x
    k = controller.k
    closed = instance.a + instance.b @ k @ instance.c
    blocks = [np.vstack([np.zeros((d_y, d_u)), np.eye(d_u)])]
    scale = (
        math.sqrt(d_x * (1.0 + controller.kappa**2)) * instance.kappa_sys**2
    )
    cur = instance.b  # (A + BKC)^{i-1} B, built by one product per lag
    for i in range(1, n + 1):
        top = instance.c @ cur
        blocks.append(np.vstack([top, k @ top]))
        bound = scale * (1.0 - controller.gamma) ** (i - 1)
        measured = _op_norm(blocks[-1])
        if measured > bound * (1.0 + 1e-9) + 1e-12:
            raise ConstructionError(
                f"lag-{i} block norm {measured:.6g} breaks the envelope {bound:.6g}"
            )
        cur = closed @ cur
    return MarkovOperator(
        blocks=tuple(blocks),
        d_y=d_y,
        d_u=d_u,
        kappa=controller.kappa,
        gamma=controller.gamma,
        decay_scale=scale,
    )


def default_truncation(instance, controller, horizon, budget=None):
    """Smallest lag count whose certified tail drops below the budget."""
    if budget is None:
        budget = min(1e-10, 1.0 / horizon**2)
    scale = (
        math.sqrt(instance.d_x * (1.0 + controller.kappa**2))
        * instance.kappa_sys**2
    )
    if controller.gamma >= 1.0:
        return 1
    n = 1
    while scale * (1.0 - controller.gamma) ** n / controller.gamma >= budget:
        n += 1
        if n > 100_000:
            raise TruncationBudgetError(
                f"tail budget {budget:.3g} needs more than 1e5 lags"
            )
    return n


def default_memory(horizon, gamma):
    """Window length matching the log-horizon truncation rule."""
    if gamma >= 1.0:
        return 1
    return max(1, math.ceil(math.log(horizon) / math.log(1.0 / (1.0 - gamma))))


def policy_correction(policy, signals, t):
    """sum_j M^[j] y_{t-j}(K); signals is the full 1-based history array."""
    m = policy.shape[0]
    out = np.zeros(policy.shape[1])
    for j in range(m):
        s = t - j
        if s >= 1:
            out += policy[j] @ signals[s - 1]
    return out


def counterfactual_signals(observations, policies, markov, controller):
    """Recover y_t(K) for every prefix of an observed trajectory.

    ``observations`` holds y_1..y_T (row per step); ``policies`` holds the
    played M_1..M_{T-1} (entries may be None for the zero policy).  The
    recursion is strictly triangular: today's signal needs only past
    corrections.  Returns (signals, tail_report) where the report bounds
    the reconstruction error due to lag truncation.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    horizon = obs.shape[0]
    if len(policies) != horizon - 1:
        raise HistoryError(
            f"{horizon} observations need {horizon - 1} policies, got {len(policies)}"
        )
    if obs.shape[1] != markov.d_y:
        raise ShapeError(f"observations are {obs.shape[1]}-dim, operator wants {markov.d_y}")
    n = markov.n_blocks
    signals = np.zeros_like(obs)
    corrections = np.zeros((horizon, markov.d_u))
    max_corr = 0.0
    for t in range(1, horizon + 1):
        acc = obs[t - 1].copy()
        for i in range(1, min(t - 1, n) + 1):
            acc -= markov.y_block(i) @ corrections[t - i - 1]
        signals[t - 1] = acc
        if t < horizon and policies[t - 1] is not None:
            corrections[t - 1] = policy_correction(
                np.asarray(policies[t - 1], dtype=float), signals, t
            )
            max_corr = max(max_corr, float(np.linalg.norm(corrections[t - 1])))
    tail_report = markov.tail_bound(n + 1) * max_corr if n + 1 <= horizon else 0.0
    return signals, tail_report


def embed(policy):
    """Flatten an (m, d_u, d_y) policy block-major, rows contiguous."""
    policy = np.asarray(policy, dtype=float)
    if policy.ndim != 3:
        raise ShapeError(f"policy must be (m, d_u, d_y), got shape {policy.shape}")
    return policy.ravel()


def unembed(vec, m, d_u, d_y):
    vec = np.asarray(vec, dtype=float).ravel()
    if vec.size != m * d_u * d_y:
        raise ShapeError(f"vector of size {vec.size} is not {m}*{d_u}*{d_y}")
    return vec.reshape(m, d_u, d_y)


def embed_signals(window, d_u):
    """Signal matrix Y_t with Y_t @ embed(M) = sum_k M^[k] y_{t-k}.

    ``window`` lists y_{t-m+1}..y_t oldest first; lag block k carries
    window[m-1-k] replicated across the d_u control rows.
    """
    window = [np.asarray(y, dtype=float).ravel() for y in window]
    m = len(window)
    if m < 1:
        raise ShapeError("empty signal window")
    d_y = window[0].size
    if any(y.size != d_y for y in window):
        raise ShapeError("ragged signal window")
    eye = np.eye(d_u)
    parts = [np.kron(eye, window[m - 1 - k][None, :]) for k in range(m)]
    return np.hstack(parts)


def reduce_to_bcom(cost, signal_history, t, m, markov, controller):
    """Affine-memory loss for step t from the cost and signal history.

    ``signal_history`` is the 1-based array of reconstructed y_s(K) up to
    s = t.  The offset keeps only the policy-free part (y_t(K), K y_t(K));
    lag blocks beyond the window are dropped, which is the truncation the
    memory budget pays for.
    """
    if t < m:
        raise TruncationBudgetError(f"step {t} precedes the first full window of {m}")
    if markov.n_blocks < m - 1:
        raise TruncationBudgetError(
            f"operator truncated at {markov.n_blocks} lags cannot fill memory {m}"
        )
    sig = np.asarray(signal_history, dtype=float)
    d_y = markov.d_y

    def sig_at(s):
        return sig[s - 1] if s >= 1 else np.zeros(d_y)

    y_t = sig_at(t)
    offset = np.concatenate([y_t, controller.k @ y_t])
    blocks = [markov.blocks[i] for i in range(m)]
    signals = [
        embed_signals([sig_at(s - m + 1 + j) for j in range(m)], markov.d_u)
        for s in range(t - m + 1, t + 1)
    ]
    return AffineMemoryLoss(cost, offset, blocks, signals)


@dataclass(frozen=True)
class CostSchedule:
    """Oblivious per-step cost over (y, u) pairs, stationary at the origin.

    Quadratic kind: c_t(v) = v' Q_t v / 2 with eigenvalues swept inside
    [alpha, beta].  Pseudo-Huber kind: alpha/2 |v|^2 plus a smoothed-abs
    term whose weight sweeps inside (0, beta - alpha].  Both have zero
    gradient at the origin, so |grad c(v)| <= beta |v| certifies G_c = beta.
    """

    kind: str
    dim: int
    alpha: float
    beta: float
    seed: int = 0
    period: int = 97
    _frame: np.ndarray = field(init=False, repr=False)
    _phases: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("quadratic", "pseudo_huber"):
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if not 0.0 < self.alpha <= 1.0 <= self.beta:
            raise ValueError(
                f"curvature band ({self.alpha}, {self.beta}) must straddle 1"
            )
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed))
        frame, _ = np.linalg.qr(rng.standard_normal((self.dim, self.dim)))
        object.__setattr__(self, "_frame", frame)
        object.__setattr__(
            self, "_phases", rng.uniform(0.0, 2.0 * np.pi, size=self.dim)
        )

    @property
    def g_c(self):
        return self.beta

    def at(self, t):
        """BaseLoss for step t; a pure function of (t, seed)."""
        sweep = 0.5 + 0.5 * np.sin(2.0 * np.pi * t / self.period + self._phases)
        if self.kind == "quadratic":
            eigs = self.alpha + (self.beta - self.alpha) * sweep
            q = (self._frame * eigs) @ self._frame.T
            return Quadratic(q, np.zeros(self.dim), 0.0, alpha=self.alpha, beta=self.beta)
        # keep the certified band: alpha + weight must stay inside [1, beta]
        weight = (1.0 - self.alpha) + (self.beta - 1.0) * (0.25 + 0.75 * float(sweep[0]))
        weight = max(weight, 1e-12)
        return PseudoHuberRegularized(self.alpha, weight, np.zeros(self.dim))


def certified_radius(instance, controller, r_m, r_we):
    """Printed norm cap on (y_t, u_t) under improper play with slack 2 R_M."""
    d_x = instance.d_x
    kappa, gamma = controller.kappa, controller.gamma
    signal_cap = r_we * (1.0 + math.sqrt(d_x) * instance.kappa_sys / gamma)
    op_sum = 1.0 + math.sqrt(d_x * (1.0 + kappa**2)) * instance.kappa_sys**2 / gamma
    return signal_cap * (math.sqrt(1.0 + kappa**2) + 2.0 * r_m * op_sum)


def reduction_slack(instance, controller, cost, m, r_m):
    """Cumulative truncation budget printed in the reduction analysis."""
    kappa, gamma = controller.kappa, controller.gamma
    return (
        cost.g_c
        * m
        * instance.d_y
        * instance.d_u**2
        * instance.d_x
        * kappa**2
        * instance.kappa_sys**4
        * r_m
        / gamma**2
    )


@dataclass
class ControlRunResult:
    """Trajectory, bandit-side records, and certificate diagnostics."""

    observations: np.ndarray  # (T, d_y)
    controls: np.ndarray  # (T, d_u)
    incurred: np.ndarray  # (T,) realized costs
    signals: np.ndarray  # (T, d_y) reconstructed y_t(K)
    decisions: np.ndarray  # (T, m*d_u*d_y) embedded played policies
    discrepancies: np.ndarray  # (T,) |c_t - f_t(window)| from t = m
    updated: np.ndarray
    logdets: np.ndarray
    trace: UpdateTrace
    start: int
    metadata: dict


def run_control(
    instance,
    controller,
    cost,
    w_schedule,
    e_schedule,
    m,
    r_m,
    eta,
    horizon,
    alpha=None,
    seed=0,
    set_kind="ball",
    metric_scale=1.0,
    n_truncation=None,
):
    """Bandit control loop: pure-K warmup, then learner-driven DRC play.

    The learner sees only the realized cost c_t(y_t, u_t) and the lag
    structure H_t; its decisions are embedded policies constrained to the
    chosen set.  Deterministic in ``seed``.
    """
    t_start = time.perf_counter()
    d_y, d_u = instance.d_y, instance.d_u
    if cost.dim != d_y + d_u:
        raise ShapeError(f"cost dimension {cost.dim} is not d_y + d_u = {d_y + d_u}")
    if alpha is None:
        alpha = cost.alpha
    d = m * d_u * d_y
    radius = math.sqrt(m * max(d_u, d_y)) * r_m
    if set_kind == "ball":
        set_ = EuclideanBall(np.zeros(d), radius)
    elif set_kind == "l1op":
        set_ = OperatorL1Ball(m, d_u, d_y, r_m)
    else:
        raise ValueError(f"unknown set kind {set_kind!r}")
    n_trunc = n_truncation or default_truncation(instance, controller, horizon)
    n_trunc = max(n_trunc, m - 1) if m > 1 else n_trunc
    markov = markov_operator(instance, controller, n_trunc)

    params = BcomParams(set_=set_, eta=eta, m=m, alpha=alpha, metric_scale=metric_scale)
    _, bern_rng, sphere_rng = _run_streams(seed)
    state, _ = init_memory_learner(set_, m, metric_scale, bern_rng, sphere_rng)

    obs = np.zeros((horizon, d_y))
    controls = np.zeros((horizon, d_u))
    incurred = np.zeros(horizon)
    signals = np.zeros((horizon, d_y))
    decisions = np.zeros((horizon, d))
    discrepancies = np.zeros(horizon)
    updated = np.zeros(horizon, dtype=bool)
    logdets = np.zeros(horizon)
    corrections = np.zeros((horizon, d_u))
    trace = UpdateTrace(horizon=horizon, m=m)
    l1op_max = 0.0
    pair_norm_max = 0.0
    r_h_measured = 1.0
    g_unary_cert = 0.0

    x = instance.x1.copy()
    policy = np.zeros((m, d_u, d_y))  # M_t; zero through t = m
    for t in range(1, horizon + 1):
        y_t = observe(x, e_schedule.element(t), instance)
        obs[t - 1] = y_t
        # triangular reconstruction: only corrections before t enter
        acc = y_t.copy()
        for i in range(1, min(t - 1, markov.n_blocks) + 1):
            acc -= markov.y_block(i) @ corrections[t - i - 1]
        signals[t - 1] = acc

        if t > m:
            policy = unembed(state.z, m, d_u, d_y)
        du = policy_correction(policy, signals, t)
        corrections[t - 1] = du
        u_t = controller.k @ y_t + du
        controls[t - 1] = u_t
        decisions[t - 1] = embed(policy)
        l1op_max = max(l1op_max, float(sum(_op_norm(blk) for blk in policy)))
        pair = np.concatenate([y_t, u_t])
        pair_norm_max = max(pair_norm_max, float(np.linalg.norm(pair)))
        c_t = cost.at(t).value(pair)
        incurred[t - 1] = c_t

        if t >= m:
            f_t = reduce_to_bcom(cost.at(t), signals[:t], t, m, markov, controller)
            window = decisions[t - m : t]
            discrepancies[t - 1] = abs(c_t - f_t.eval(window))
            # running norm certificates for the printed-bound evaluation
            g_norm = float(np.linalg.norm(f_t.combined_map(), 2))
            y_norm = float(np.linalg.norm(f_t.signals[-1], 2))
            r_h_measured = max(r_h_measured, g_norm, y_norm, g_norm * g_norm)
            reach = float(np.linalg.norm(f_t.offset)) + g_norm * radius
            g_unary_cert = max(g_unary_cert, g_norm * cost.g_c * reach)
            state, did = bcoam_step(
                state, c_t, f_t.hessian_t(), params, bern_rng, sphere_rng, trace
            )
            updated[t - 1] = did
        logdets[t - 1] = state.a_logdet
        x = lds_step(x, u_t, w_schedule.element(t), instance)

    r_we = max(getattr(w_schedule, "radius", 0.0), getattr(e_schedule, "radius", 0.0))
    metadata = {
        "algorithm": "control",
        "m": m,
        "r_m": r_m,
        "eta": eta,
        "alpha": alpha,
        "horizon": horizon,
        "seed": int(seed),
        "set_kind": set_kind,
        "set_radius": radius,
        "metric_scale": metric_scale,
        "n_truncation": n_trunc,
        "tail_bound": markov.tail_bound(n_trunc + 1),
        "memory_tail_bound": markov.tail_bound(m + 1) if m + 1 >= 1 else 0.0,
        "l1op_max": l1op_max,
        "pair_norm_max": pair_norm_max,
        "r_h_measured": r_h_measured,
        "g_unary_cert": g_unary_cert,
        "kappa_proxy": convolution_modulus_lower_bound(
            [markov.blocks[i] for i in range(m)], 3 * m
        ),
        "d": d,
        "certified_radius": certified_radius(instance, controller, r_m, r_we),
        "reduction_slack": reduction_slack(instance, controller, cost, m, r_m),
        "discrepancy_total": float(discrepancies.sum()),
        "wall_clock": time.perf_counter() - t_start,
    }
    return ControlRunResult(
        observations=obs,
        controls=controls,
        incurred=incurred,
        signals=signals,
        decisions=decisions,
        discrepancies=discrepancies,
        updated=updated,
        logdets=logdets,
        trace=trace,
        start=m,
        metadata=metadata,
    )


def simulate_pure_k(instance, controller, w_schedule, e_schedule, horizon):
    """Counterfactual twin: the trajectory had K alone run from step 1."""
    x = instance.x1.copy()
    sig = np.zeros((horizon, instance.d_y))
    for t in range(1, horizon + 1):
        y_t = observe(x, e_schedule.element(t), instance)
        sig[t - 1] = y_t
        x = lds_step(x, controller.k @ y_t, w_schedule.element(t), instance)
    return sig


def simulate_drc(
    instance, controller, cost, w_schedule, e_schedule, policies, horizon
):
    """Roll the system forward under given per-step policies.

    ``policies`` maps step t (1-based) to an (m, d_u, d_y) array; a single
    array is broadcast to every step.  Signals come from the exact twin
    simulation, not reconstruction.  Returns (observations, controls,
    costs, signals).
    """
    fixed = None
    if isinstance(policies, np.ndarray):
        fixed = policies

    signals = simulate_pure_k(instance, controller, w_schedule, e_schedule, horizon)
    x = instance.x1.copy()
    obs = np.zeros((horizon, instance.d_y))
    controls = np.zeros((horizon, instance.d_u))
    costs = np.zeros(horizon)
    for t in range(1, horizon + 1):
        y_t = observe(x, e_schedule.element(t), instance)
        obs[t - 1] = y_t
        policy = fixed if fixed is not None else policies[t - 1]
        if policy is None:
            du = np.zeros(instance.d_u)
        else:
            du = policy_correction(np.asarray(policy, dtype=float), signals, t)
        u_t = controller.k @ y_t + du
        controls[t - 1] = u_t
        costs[t - 1] = cost.at(t).value(np.concatenate([y_t, u_t]))
        x = lds_step(x, u_t, w_schedule.element(t), instance)
    return obs, controls, costs, signals


def comparator_cost(
    instance, controller, cost, w_schedule, e_schedule, policy, horizon
):
    """Total cost of one fixed DRC policy on the identical schedules."""
    _, _, costs, _ = simulate_drc(
        instance, controller, cost, w_schedule, e_schedule,
        np.asarray(policy, dtype=float), horizon,
    )
    return float(costs.sum())


def random_drc_rollout(
    instance, controller, m, r_m, horizon, w_schedule, e_schedule, seed=0
):
    """Drive the system with fresh random policies each step.

    Returns (observations, policies, reconstructed signals, twin signals,
    tail report).  Exercises reconstruction against the exact twin.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(9,)))
    n = default_truncation(instance, controller, horizon)
    markov = markov_operator(instance, controller, max(n, m))
    x = instance.x1.copy()
    obs = np.zeros((horizon, instance.d_y))
    policies = []
    # signals reconstructed on the fly so each policy can act causally
    signals = np.zeros((horizon, instance.d_y))
    corrections = np.zeros((horizon, instance.d_u))
    for t in range(1, horizon + 1):
        y_t = observe(x, e_schedule.element(t), instance)
        obs[t - 1] = y_t
        acc = y_t.copy()
        for i in range(1, min(t - 1, markov.n_blocks) + 1):
            acc -= markov.y_block(i) @ corrections[t - i - 1]
        signals[t - 1] = acc
        policy = rng.standard_normal((m, instance.d_u, instance.d_y))
        total = sum(_op_norm(blk) for blk in policy)
        policy *= r_m / max(total, 1e-12)
        policies.append(policy)
        corrections[t - 1] = policy_correction(policy, signals, t)
        u_t = controller.k @ y_t + corrections[t - 1]
        x = lds_step(x, u_t, w_schedule.element(t), instance)
    recon, tail = counterfactual_signals(obs, policies[:-1], markov, controller)
    twin = simulate_pure_k(instance, controller, w_schedule, e_schedule, horizon)
    return obs, policies, recon, twin, tail
