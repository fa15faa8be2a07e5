"""Affine-memory losses with certified curvature.

A loss at time t maps a window of the last m decisions through a sum of
fixed mixing blocks and time-varying signal matrices into a strongly
convex, smooth base loss.  Everything carries explicit certificates so
the learners' assumptions can be checked numerically instead of trusted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ConvexSet, EuclideanBall, PsdMatrix

__all__ = [
    "ArityError",
    "InstanceConfigError",
    "BaseLoss",
    "Quadratic",
    "PseudoHuberRegularized",
    "AffineMemoryLoss",
    "AdversarySchedule",
    "KappaReport",
    "BcomInstanceConfig",
    "SyntheticBcomInstance",
    "verify_kappa_convexity",
    "convolution_modulus_lower_bound",
    "make_synthetic_bcom_instance",
    "stack_unary",
]

CERT_SLACK = 1e-9


class ArityError(ValueError):
    """A decision window had the wrong number of entries."""


class InstanceConfigError(ValueError):
    """An instance generator config is infeasible."""


class BaseLoss:
    """Strongly convex, smooth scalar loss with certificate (alpha, beta).

    Subclasses evaluate on single vectors of length n or on batches of
    shape (N, n).  Certificates satisfy 0 < alpha <= 1 <= beta and
    ``alpha I <= hess <= beta I`` everywhere on the declared domain.
    """

    alpha: float
    beta: float

    def _check_certificate(self, alpha, beta):
        alpha, beta = float(alpha), float(beta)
        if not (0.0 < alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        if not beta >= 1.0:
            raise ValueError(f"beta must be at least 1, got {beta}")
        if beta < alpha:
            raise ValueError(f"beta {beta} is below alpha {alpha}")
        self.alpha, self.beta = alpha, beta

    def value(self, v):
        raise NotImplementedError

    def grad(self, v):
        raise NotImplementedError

    def hess(self, v):
        raise NotImplementedError


class Quadratic(BaseLoss):
    """l(v) = 1/2 v^T Q v + b^T v + c with alpha I <= Q <= beta I.

    The minimum value must be nonnegative so the loss stays a cost.
    """

    def __init__(self, q, b, c, alpha=None, beta=None):
        q = np.array(q, dtype=float)
        self.b = np.array(b, dtype=float).ravel()
        self.c = float(c)
        n = self.b.size
        if q.shape != (n, n):
            raise ValueError(f"Q shape {q.shape} does not match b length {n}")
        self.q = (q + q.T) / 2.0
        lam = np.linalg.eigvalsh(self.q)
        self._check_certificate(
            alpha if alpha is not None else min(1.0, float(lam[0])),
            beta if beta is not None else max(1.0, float(lam[-1])),
        )
        if float(lam[0]) < self.alpha - CERT_SLACK or float(lam[-1]) > self.beta + CERT_SLACK:
            raise ValueError(
                f"eigenvalues [{lam[0]:.6g}, {lam[-1]:.6g}] violate the certificate "
                f"({self.alpha:.6g}, {self.beta:.6g})"
            )
        minimum = self.c - 0.5 * float(self.b @ np.linalg.solve(self.q, self.b))
        if minimum < -CERT_SLACK:
            raise ValueError(f"loss minimum {minimum:.3e} is negative")

    def value(self, v):
        v = np.asarray(v, dtype=float)
        quad = 0.5 * np.einsum("...i,ij,...j->...", v, self.q, v)
        return quad + v @ self.b + self.c

    def grad(self, v):
        v = np.asarray(v, dtype=float)
        return v @ self.q.T + self.b

    def hess(self, v):
        return self.q.copy()


class PseudoHuberRegularized(BaseLoss):
    """Quadratic plus a coordinatewise pseudo-Huber term.

    l(v) = alpha/2 |v - center|^2 + s * sum_i (sqrt(1 + (v_i - center_i)^2) - 1)

    The pseudo-Huber term has per-coordinate curvature in (0, 1], so the
    Hessian eigenvalues stay inside [alpha, alpha + s] everywhere.
    """

    def __init__(self, alpha, s, center):
        s = float(s)
        if s < 0:
            raise ValueError(f"s must be nonnegative, got {s}")
        self.s = s
        self.center = np.array(center, dtype=float).ravel()
        self._check_certificate(alpha, float(alpha) + s)

    def value(self, v):
        w = np.asarray(v, dtype=float) - self.center
        sq = np.sum(w * w, axis=-1)
        return 0.5 * self.alpha * sq + self.s * np.sum(np.sqrt(1.0 + w * w) - 1.0, axis=-1)

    def grad(self, v):
        w = np.asarray(v, dtype=float) - self.center
        return self.alpha * w + self.s * w / np.sqrt(1.0 + w * w)

    def hess(self, v):
        w = np.asarray(v, dtype=float).ravel() - self.center
        return np.diag(self.alpha + self.s * (1.0 + w * w) ** -1.5)


class AffineMemoryLoss:
    """Loss of a decision window through an affine memory channel.

    ``eval`` applies ``base`` to ``offset + sum_i blocks[i] @ signals[-1-i]
    @ window[-1-i]`` where ``window[-1]`` is the current decision.  Blocks
    are fixed mixing matrices (n x p); signals are the time-varying
    matrices (p x d) aligned with the window, oldest first.

    Parameters
    ----------
    base : BaseLoss
    offset : array_like, length n
    blocks : sequence of m arrays, each n x p
    signals : sequence of m arrays, each p x d, oldest first
    r_h : float, optional
        Norm certificate; when given, ``max(1, |G_t|, |Y_t|, |H_t|) <= r_h``
        is validated at construction.
    """

    def __init__(self, base, offset, blocks, signals, r_h=None):
        self.base = base
        self.offset = np.array(offset, dtype=float).ravel()
        self.blocks = [np.array(g, dtype=float) for g in blocks]
        self.signals = [np.array(y, dtype=float) for y in signals]
        if len(self.blocks) != len(self.signals):
            raise ArityError(
                f"{len(self.blocks)} blocks but {len(self.signals)} signals"
            )
        self.m = len(self.blocks)
        if self.m < 1:
            raise ArityError("memory must be at least 1")
        n = self.offset.size
        p = self.blocks[0].shape[1]
        d = self.signals[0].shape[1]
        for g in self.blocks:
            if g.shape != (n, p):
                raise ValueError(f"block shape {g.shape} is not ({n}, {p})")
        for y in self.signals:
            if y.shape != (p, d):
                raise ValueError(f"signal shape {y.shape} is not ({p}, {d})")
        self.dims = (n, p, d)
        # window-aligned maps: stacked[k] multiplies window[k]
        self.stacked_maps = np.stack(
            [self.blocks[self.m - 1 - k] @ self.signals[k] for k in range(self.m)]
        )
        self._combined = self.stacked_maps.sum(axis=0)
        self._hessian = None
        self.r_h = None if r_h is None else float(r_h)
        if self.r_h is not None:
            worst = max(
                1.0,
                float(np.linalg.norm(self._combined, 2)),
                float(np.linalg.norm(self.signals[-1], 2)),
                float(np.linalg.norm(self._combined, 2)) ** 2,
            )
            if worst > self.r_h:
                raise ValueError(
                    f"norm certificate violated: {worst:.6g} > r_h = {self.r_h:.6g}"
                )

    def _window_array(self, window):
        if len(window) != self.m:
            raise ArityError(f"window has {len(window)} entries, expected {self.m}")
        w = np.asarray(window, dtype=float)
        if w.shape != (self.m, self.dims[2]):
            raise ValueError(f"window shape {w.shape} is not ({self.m}, {self.dims[2]})")
        return w

    def inner_point(self, window):
        """The base-loss argument for this window."""
        w = self._window_array(window)
        return self.offset + np.einsum("knd,kd->n", self.stacked_maps, w)

    def eval(self, window):
        """f(window), nonnegative."""
        return float(self.base.value(self.inner_point(window)))

    def grad_window(self, window):
        """Gradient with respect to each window entry, shape (m, d)."""
        g = self.base.grad(self.inner_point(window))
        return np.einsum("knd,n->kd", self.stacked_maps, g)

    def combined_map(self):
        """G_t, the sum of the window-aligned maps (n x d)."""
        return self._combined.copy()

    def hessian_t(self):
        """H_t = G_t^T G_t as a validated PSD matrix."""
        if self._hessian is None:
            g = self._combined
            self._hessian = PsdMatrix(g.T @ g)
        return self._hessian

    def unary(self):
        """Callables (eval_u, grad_u, hess_u) for the repeated-window form."""
        g = self._combined

        def eval_u(z):
            z = np.asarray(z, dtype=float)
            if z.ndim == 1:
                return self.eval([z] * self.m)
            return self.base.value(self.offset + z @ g.T)

        def grad_u(z):
            z = np.asarray(z, dtype=float)
            return self.base.grad(self.offset + z @ g.T) @ g

        def hess_u(z):
            z = np.asarray(z, dtype=float).ravel()
            return g.T @ self.base.hess(self.offset + g @ z) @ g

        return eval_u, grad_u, hess_u


class AdversarySchedule:
    """Oblivious parameter sequence: a pure function of (t, seed).

    Kinds: ``constant``, ``sinusoidal`` (needs ``period``),
    ``sign_alternating``, ``seeded_bounded``.  Every element has Euclidean
    norm at most ``radius``.
    """

    KINDS = ("constant", "sinusoidal", "sign_alternating", "seeded_bounded")

    def __init__(self, kind, dim, seed, radius=1.0, period=None, horizon=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown schedule kind {kind!r}")
        self.kind = kind
        self.dim = int(dim)
        if self.dim < 1:
            raise ValueError("schedule dimension must be positive")
        self.seed = int(seed)
        self.radius = float(radius)
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        self.period = None if period is None else float(period)
        if kind == "sinusoidal" and not (self.period and self.period > 0):
            raise ValueError("sinusoidal schedule needs a positive period")
        self.horizon = None if horizon is None else int(horizon)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed))
        raw = rng.standard_normal(self.dim)
        self._direction = raw / max(float(np.linalg.norm(raw)), 1e-12)
        self._phases = rng.uniform(0.0, 2.0 * np.pi, self.dim)

    def element(self, t):
        """Element at step t (1-based), norm at most ``radius``."""
        t = int(t)
        if self.kind == "constant":
            return self.radius * self._direction.copy()
        if self.kind == "sinusoidal":
            wave = np.sin(2.0 * np.pi * t / self.period + self._phases)
            return (self.radius / np.sqrt(self.dim)) * wave
        if self.kind == "sign_alternating":
            sign = -1.0 if t % 2 else 1.0
            return sign * (self.radius / np.sqrt(self.dim)) * np.ones(self.dim)
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(t,))
        )
        u = rng.standard_normal(self.dim)
        u /= max(float(np.linalg.norm(u)), 1e-12)
        return self.radius * rng.random() ** (1.0 / self.dim) * u

    def unit_components(self, t):
        """Element rescaled coordinatewise into [-1, 1]."""
        e = self.element(t)
        if self.radius == 0.0:
            return np.zeros(self.dim)
        if self.kind == "seeded_bounded":
            return np.clip(e / self.radius, -1.0, 1.0)
        return np.clip(e * np.sqrt(self.dim) / self.radius, -1.0, 1.0)


@dataclass
class KappaReport:
    """Outcome of the curvature-sandwich verification."""

    ok: bool
    worst_violation: float
    fd_rel_worst: float
    probes: int


def verify_kappa_convexity(f, probes, tol, set_=None, seed=0):
    """Check alpha H_t <= hess_u(z) <= beta H_t at random probe points.

    Probes are drawn from ``set_`` inflated by a unit ball (default: the
    unit ball at the origin).  The analytic ``hess_u`` is also compared
    against a central finite-difference Hessian of ``eval_u`` (step 1e-4,
    relative agreement 1e-4).  Violations are reported, never raised.
    """
    probes = int(probes)
    if probes < 1:
        raise ValueError("probes must be at least 1")
    d = f.dims[2]
    if set_ is None:
        set_ = EuclideanBall(np.zeros(d), 1.0)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    eval_u, _, hess_u = f.unary()
    h_t = f.hessian_t().mat
    alpha, beta = f.base.alpha, f.base.beta
    worst = -np.inf
    fd_worst = 0.0
    step = 1e-4
    for _ in range(probes):
        u = rng.standard_normal(d)
        nu = float(np.linalg.norm(u))
        z = set_.random_point(rng) + (rng.random() ** (1.0 / d) / max(nu, 1e-12)) * u
        h = hess_u(z)
        lo = float(np.linalg.eigvalsh(h - alpha * h_t)[0])
        hi = float(np.linalg.eigvalsh(beta * h_t - h)[0])
        worst = max(worst, -lo, -hi)
        fd = np.zeros((d, d))
        for i in range(d):
            for j in range(i + 1):
                ei = np.zeros(d)
                ej = np.zeros(d)
                ei[i] = step
                ej[j] = step
                val = (
                    eval_u(z + ei + ej)
                    - eval_u(z + ei - ej)
                    - eval_u(z - ei + ej)
                    + eval_u(z - ei - ej)
                ) / (4.0 * step * step)
                fd[i, j] = fd[j, i] = val
        scale = max(1.0, float(np.max(np.abs(h))))
        fd_worst = max(fd_worst, float(np.max(np.abs(fd - h))) / scale)
    ok = bool(worst <= tol and fd_worst <= 1e-4)
    return KappaReport(ok=ok, worst_violation=float(worst), fd_rel_worst=fd_worst, probes=probes)


def convolution_modulus_lower_bound(blocks, horizon):
    """Smallest eigenvalue of T_n^T T_n for the block convolution operator.

    T_n is the block lower-triangular Toeplitz matrix of the sequence
    (blocks[0], ..., blocks[m-1], 0, 0, ...) over ``horizon`` steps.  A
    finite-horizon proxy for the invertibility modulus of the channel.
    """
    horizon = int(horizon)
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    blocks = [np.atleast_2d(np.asarray(g, dtype=float)) for g in blocks]
    n_out, n_in = blocks[0].shape
    m = len(blocks)
    t_mat = np.zeros((horizon * n_out, horizon * n_in))
    for r in range(horizon):
        for c in range(max(0, r - m + 1), r + 1):
            t_mat[r * n_out:(r + 1) * n_out, c * n_in:(c + 1) * n_in] = blocks[r - c]
    return float(np.linalg.eigvalsh(t_mat.T @ t_mat)[0])


@dataclass
class BcomInstanceConfig:
    """Generator knobs for a synthetic affine-memory instance."""

    d: int
    m: int
    horizon: int
    alpha: float = 0.5
    beta: float = 2.0
    r_h: float = 4.0
    base_kind: str = "pseudo_huber"  # or "quadratic"
    schedule_kind: str = "sinusoidal"
    schedule_period: float = 64.0
    set_radius: float = 1.0
    offset_scale: float = 0.3
    target_scale: float = 0.7
    well_conditioned: bool = False
    seed: int = 0
    n: int | None = None
    p: int | None = None


@dataclass
class SyntheticBcomInstance:
    """Loss sequence plus the decision set and certified constants."""

    losses: list
    set_: ConvexSet
    config: BcomInstanceConfig
    certificates: dict = field(default_factory=dict)

    @property
    def horizon(self):
        return len(self.losses)


def _child_seed(seed, tag):
    return int(np.random.SeedSequence(entropy=int(seed), spawn_key=(tag,)).generate_state(1)[0])


def make_synthetic_bcom_instance(config):
    """Generate a horizon-long sequence of affine-memory losses.

    Mixing blocks are fixed across time; signal matrices and base-loss
    parameters drift per the adversary schedule.  Norm certificates hold
    with at least a 5 percent margin, and the gradient bound and diameter
    are computed from the construction and attached.
    """
    c = config
    if not (0.0 < c.alpha <= 1.0 <= c.beta):
        raise InstanceConfigError(
            f"need 0 < alpha <= 1 <= beta, got ({c.alpha}, {c.beta})"
        )
    if min(c.d, c.m, c.horizon) < 1:
        raise InstanceConfigError("d, m, horizon must all be positive")
    if c.r_h < 1.2:
        raise InstanceConfigError(
            f"r_h = {c.r_h} leaves no margin; the generator requires r_h >= 1.2"
        )
    if c.base_kind not in ("quadratic", "pseudo_huber"):
        raise InstanceConfigError(f"unknown base kind {c.base_kind!r}")

    n = c.n or c.d
    p = c.p or c.d
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(c.seed), spawn_key=(100,)))

    # fixed mixing blocks, leading block well conditioned, geometric decay;
    # the flagged variant keeps the lag-0 map orthogonal and shrinks the
    # tail so the curvature H_t = G_t^T G_t stays bounded below
    if c.well_conditioned:
        if n >= p:
            lead = np.linalg.qr(rng.standard_normal((n, p)))[0]
        else:
            lead = np.linalg.qr(rng.standard_normal((p, n)))[0].T
        blocks = [lead]
        for i in range(1, c.m):
            blocks.append(0.25**i * rng.standard_normal((n, p)) / np.sqrt(p))
    else:
        blocks = [np.eye(n, p) + 0.25 * rng.standard_normal((n, p)) / np.sqrt(p)]
        for i in range(1, c.m):
            blocks.append(0.5**i * rng.standard_normal((n, p)) / np.sqrt(p))

    margin = c.r_h / 1.05
    y_cap = min(1.0, margin)
    g_budget = np.sqrt(margin)  # |G_t| <= sqrt(margin) keeps |H_t| inside too
    total = sum(float(np.linalg.norm(g, 2)) for g in blocks)
    scale = g_budget / (total * y_cap)
    blocks = [g * scale for g in blocks]

    sched_y = AdversarySchedule(
        c.schedule_kind, dim=p * c.d, seed=_child_seed(c.seed, 1),
        radius=1.0, period=c.schedule_period,
    )
    sched_target = AdversarySchedule(
        c.schedule_kind, dim=n, seed=_child_seed(c.seed, 2),
        radius=1.0, period=c.schedule_period,
    )
    sched_offset = AdversarySchedule(
        c.schedule_kind, dim=n, seed=_child_seed(c.seed, 3),
        radius=1.0, period=c.schedule_period,
    )
    sched_eig = AdversarySchedule(
        c.schedule_kind, dim=n, seed=_child_seed(c.seed, 4),
        radius=1.0, period=c.schedule_period,
    )

    if c.well_conditioned:
        if p >= c.d:
            y_base = np.linalg.qr(rng.standard_normal((p, c.d)))[0]
        else:
            y_base = np.linalg.qr(rng.standard_normal((c.d, p)))[0].T
        y_base *= 0.80 * y_cap
        y_amp = 0.20 * y_cap
    else:
        y_base = rng.standard_normal((p, c.d))
        y_base *= 0.55 * y_cap / max(float(np.linalg.norm(y_base, 2)), 1e-12)
        y_amp = 0.35 * y_cap
    frame = np.linalg.qr(rng.standard_normal((n, n)))[0]

    def signal_at(t):
        if t < 1:
            return np.zeros((p, c.d))
        pert = sched_y.element(t).reshape(p, c.d)
        return y_base + y_amp * pert

    def base_at(t):
        target = c.target_scale * sched_target.element(t)
        if c.base_kind == "quadratic":
            lam = c.alpha + (c.beta - c.alpha) * 0.5 * (1.0 + sched_eig.unit_components(t))
            q = (frame * lam) @ frame.T
            q = (q + q.T) / 2.0
            return Quadratic(q, -q @ target, 0.5 * float(target @ q @ target),
                             alpha=c.alpha, beta=c.beta)
        return PseudoHuberRegularized(c.alpha, c.beta - c.alpha, target)

    losses = []
    y_max = g_max = 0.0
    for t in range(1, c.horizon + 1):
        signals = [signal_at(t - c.m + 1 + k) for k in range(c.m)]
        f = AffineMemoryLoss(
            base_at(t), c.offset_scale * sched_offset.element(t), blocks, signals
        )
        losses.append(f)
        y_max = max(y_max, float(np.linalg.norm(signals[-1], 2)))
        g_max = max(g_max, float(np.linalg.norm(f.combined_map(), 2)))

    worst = max(1.0, y_max, g_max, g_max**2)
    if worst * 1.05 > c.r_h:
        raise InstanceConfigError(
            f"generated instance misses the 5 percent margin: {worst:.6g} vs r_h {c.r_h}"
        )

    # gradient bound over K + unit ball from the construction
    row_norms = np.array([float(np.linalg.norm(g, 2)) for g in blocks]) * y_cap
    u_reach = c.offset_scale + row_norms.sum() * (c.set_radius + 1.0)
    u_dev = u_reach + c.target_scale
    g_f = float(np.sqrt(np.sum(row_norms**2)) * c.beta * u_dev)

    set_ = EuclideanBall(np.zeros(c.d), c.set_radius)
    certificates = {
        "alpha": c.alpha,
        "beta": c.beta,
        "g_f": g_f,
        "diameter": set_.diameter(),
        "r_h": c.r_h,
        "measured_y_max": y_max,
        "measured_g_max": g_max,
        "kappa_proxy": convolution_modulus_lower_bound(blocks, 3 * c.m),
    }
    return SyntheticBcomInstance(losses=losses, set_=set_, config=c, certificates=certificates)


class _StackedUnary:
    """Vectorized sum of unary losses for comparator optimization."""

    def __init__(self, losses):
        self.count = len(losses)
        self.g_all = np.stack([f.combined_map() for f in losses])
        self.b_all = np.stack([f.offset for f in losses])
        base = losses[0].base
        self.kind = type(base).__name__
        if isinstance(base, Quadratic):
            self.q_all = np.stack([f.base.q for f in losses])
            self.lin_all = np.stack([f.base.b for f in losses])
            self.c_all = np.array([f.base.c for f in losses])
        elif isinstance(base, PseudoHuberRegularized):
            self.alpha = base.alpha
            self.s = base.s
            if any(abs(f.base.s - self.s) > 1e-12 or
                   abs(f.base.alpha - self.alpha) > 1e-12 for f in losses):
                raise InstanceConfigError(
                    "stacked pseudo-Huber losses must share one (alpha, s) pair"
                )
            self.centers = np.stack([f.base.center for f in losses])
        else:
            raise TypeError(f"unsupported base loss {type(base).__name__}")

    def inner(self, z):
        return self.b_all + self.g_all @ np.asarray(z, dtype=float)

    def sum_value(self, z):
        u = self.inner(z)
        if self.kind == "Quadratic":
            return float(
                0.5 * np.einsum("tn,tnm,tm->", u, self.q_all, u)
                + np.einsum("tn,tn->", u, self.lin_all)
                + self.c_all.sum()
            )
        w = u - self.centers
        return float(
            0.5 * self.alpha * np.sum(w * w)
            + self.s * np.sum(np.sqrt(1.0 + w * w) - 1.0)
        )

    def sum_grad(self, z):
        u = self.inner(z)
        if self.kind == "Quadratic":
            g = np.einsum("tnm,tm->tn", self.q_all, u) + self.lin_all
        else:
            w = u - self.centers
            g = self.alpha * w + self.s * w / np.sqrt(1.0 + w * w)
        return np.einsum("tnd,tn->d", self.g_all, g)

    def per_step_values(self, z):
        u = self.inner(z)
        if self.kind == "Quadratic":
            return (
                0.5 * np.einsum("tn,tnm,tm->t", u, self.q_all, u)
                + np.einsum("tn,tn->t", u, self.lin_all)
                + self.c_all
            )
        w = u - self.centers
        return 0.5 * self.alpha * np.sum(w * w, axis=1) + self.s * np.sum(
            np.sqrt(1.0 + w * w) - 1.0, axis=1
        )


def stack_unary(losses):
    """Batched unary objective Sum_t f_bar_t(z) over a loss sequence."""
    return _StackedUnary(list(losses))
