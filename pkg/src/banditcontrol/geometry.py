"""Matrix and set primitives for metric-aware online optimization.

Plain numpy throughout: validated PSD matrices, projection target sets
(balls, boxes, operator-norm budget sets), inverse matrix square roots,
and projections under a Mahalanobis metric.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

__all__ = [
    "SYMMETRY_TOL",
    "EIGENVALUE_FLOOR",
    "PsdMatrix",
    "ConvexSet",
    "EuclideanBall",
    "Box",
    "OperatorL1Ball",
    "CurvatureFloorError",
    "InvalidMetricError",
    "ProjectionNotConvergedError",
    "SingularMatrixError",
    "sample_unit_sphere",
    "inv_sqrt",
    "mahalanobis_project",
    "logdet",
]

SYMMETRY_TOL = 1e-12
EIGENVALUE_FLOOR = -1e-10


class CurvatureFloorError(ValueError):
    """An eigenvalue fell below the required positive floor."""


class InvalidMetricError(ValueError):
    """A projection metric was not positive definite."""


class ProjectionNotConvergedError(RuntimeError):
    """The iterative metric projection hit its iteration cap."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularMatrixError(ValueError):
    """A log-determinant was requested for a singular matrix."""


def matrix_entries(matrix):
    """Return the float ndarray behind a PsdMatrix or array_like."""
    if isinstance(matrix, PsdMatrix):
        return matrix.mat
    return np.asarray(matrix, dtype=float)


class PsdMatrix:
    """Symmetric positive semidefinite matrix with validated entries.

    Parameters
    ----------
    entries : array_like, shape (d, d)
        Matrix entries. Must satisfy ``max |A - A^T| <= SYMMETRY_TOL`` and
        have every eigenvalue at least ``EIGENVALUE_FLOOR``.

    Raises
    ------
    ValueError
        If the entries are not a square symmetric matrix.
    CurvatureFloorError
        If the smallest eigenvalue falls below the floor.
    """

    __slots__ = ("_mat",)

    def __init__(self, entries):
        a = np.array(entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        gap = float(np.max(np.abs(a - a.T))) if a.size else 0.0
        if gap > SYMMETRY_TOL:
            raise ValueError(f"matrix is not symmetric: max |A - A^T| = {gap:.3e}")
        a = (a + a.T) / 2.0
        if a.size:
            lam_min = float(np.linalg.eigvalsh(a)[0])
            if lam_min < EIGENVALUE_FLOOR:
                raise CurvatureFloorError(
                    f"smallest eigenvalue {lam_min:.3e} is below {EIGENVALUE_FLOOR:.0e}"
                )
        a.setflags(write=False)
        self._mat = a

    @property
    def mat(self):
        """Read-only ndarray of the entries."""
        return self._mat

    @property
    def dim(self):
        return self._mat.shape[0]

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self._mat.astype(dtype)
        return self._mat

    def __repr__(self):
        return f"PsdMatrix(dim={self.dim})"


class ConvexSet(ABC):
    """Closed convex subset of R^d with a Euclidean projector."""

    dim: int

    @abstractmethod
    def euclidean_project(self, point):
        """Closest point of the set in the Euclidean norm."""

    @abstractmethod
    def contains(self, point, tol=1e-9):
        """Membership up to additive tolerance ``tol``."""

    @abstractmethod
    def center(self):
        """A canonical interior point (used to initialize iterates)."""

    @abstractmethod
    def diameter(self):
        """Euclidean diameter of the set."""

    def random_point(self, rng):
        """A random member of the set (projected Gaussian, not uniform)."""
        scale = self.diameter() / 2.0 or 1.0
        raw = self.center() + scale * rng.standard_normal(self.dim)
        return self.euclidean_project(raw)


class EuclideanBall(ConvexSet):
    """Ball ``{x : |x - center|_2 <= radius}``."""

    def __init__(self, center, radius):
        self._center = np.array(center, dtype=float).ravel()
        if not np.all(np.isfinite(self._center)):
            raise ValueError("ball center must be finite")
        radius = float(radius)
        if not radius > 0:
            raise ValueError(f"ball radius must be positive, got {radius}")
        self.radius = radius
        self.dim = self._center.size

    def euclidean_project(self, point):
        x = np.asarray(point, dtype=float).ravel()
        w = x - self._center
        nw = float(np.linalg.norm(w))
        if nw <= self.radius:
            return x.copy()
        return self._center + w * (self.radius / nw)

    def contains(self, point, tol=1e-9):
        x = np.asarray(point, dtype=float).ravel()
        return float(np.linalg.norm(x - self._center)) <= self.radius + tol

    def center(self):
        return self._center.copy()

    def diameter(self):
        return 2.0 * self.radius


class Box(ConvexSet):
    """Axis-aligned box ``{x : lower <= x <= upper}`` (coordinatewise)."""

    def __init__(self, lower, upper):
        self.lower = np.array(lower, dtype=float).ravel()
        self.upper = np.array(upper, dtype=float).ravel()
        if self.lower.shape != self.upper.shape:
            raise ValueError("lower and upper must have matching shapes")
        if np.any(self.lower > self.upper):
            raise ValueError("box requires lower <= upper in every coordinate")
        self.dim = self.lower.size

    def euclidean_project(self, point):
        x = np.asarray(point, dtype=float).ravel()
        return np.clip(x, self.lower, self.upper)

    def contains(self, point, tol=1e-9):
        x = np.asarray(point, dtype=float).ravel()
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def center(self):
        return (self.lower + self.upper) / 2.0

    def diameter(self):
        return float(np.linalg.norm(self.upper - self.lower))


class OperatorL1Ball(ConvexSet):
    """Stacked matrix blocks with a shared operator-norm budget.

    A point is the flattening of ``m`` blocks of shape ``(rows, cols)``
    (block-major, then row-major within a block).  The set keeps the sum of
    the blocks' spectral norms at or below ``radius``.

    The Euclidean projection caps each block's singular values at a
    block-specific level; the levels are tied together through one scalar
    threshold found by bisection.
    """

    def __init__(self, blocks, rows, cols, radius):
        blocks, rows, cols = int(blocks), int(rows), int(cols)
        if min(blocks, rows, cols) < 1:
            raise ValueError("block count and shapes must be positive")
        radius = float(radius)
        if not radius > 0:
            raise ValueError(f"radius must be positive, got {radius}")
        self.blocks = blocks
        self.rows = rows
        self.cols = cols
        self.radius = radius
        self.dim = blocks * rows * cols

    def _as_blocks(self, point):
        x = np.asarray(point, dtype=float).ravel()
        if x.size != self.dim:
            raise ValueError(f"expected a vector of length {self.dim}, got {x.size}")
        return x.reshape(self.blocks, self.rows, self.cols)

    def block_norms(self, point):
        """Spectral norm of each block."""
        b = self._as_blocks(point)
        return np.array([np.linalg.norm(b[k], 2) for k in range(self.blocks)])

    def contains(self, point, tol=1e-9):
        return float(np.sum(self.block_norms(point))) <= self.radius + tol

    def euclidean_project(self, point):
        x = np.asarray(point, dtype=float).ravel()
        parts = [np.linalg.svd(b, full_matrices=False) for b in self._as_blocks(x)]
        total = sum(float(s[0]) for _, s, _ in parts)
        if total <= self.radius:
            return x.copy()

        def cap_level(s, lam):
            # level c >= 0 with sum_i (s_i - c)_+ = lam; s sorted descending
            csum = 0.0
            n = s.size
            for k in range(1, n + 1):
                csum += s[k - 1]
                c = (csum - lam) / k
                nxt = s[k] if k < n else 0.0
                if c >= nxt:
                    return max(c, 0.0)
            return 0.0

        def norm_sum(lam):
            return sum(cap_level(s, lam) for _, s, _ in parts)

        lo, hi = 0.0, max(float(np.sum(s)) for _, s, _ in parts)
        for _ in range(200):
            mid = (lo + hi) / 2.0
            if norm_sum(mid) > self.radius:
                lo = mid
            else:
                hi = mid
        lam = (lo + hi) / 2.0

        out = np.empty_like(self._as_blocks(x))
        for k, (u, s, vt) in enumerate(parts):
            c = cap_level(s, lam)
            out[k] = (u * np.minimum(s, c)) @ vt
        total = sum(float(np.linalg.norm(out[k], 2)) for k in range(self.blocks))
        if total > self.radius:
            out *= self.radius / total
        return out.ravel()

    def center(self):
        return np.zeros(self.dim)

    def diameter(self):
        return 2.0 * self.radius * np.sqrt(min(self.rows, self.cols))


def sample_unit_sphere(dim, rng):
    """Uniform draw from the unit sphere in R^dim.

    Normalizes a standard Gaussian draw from ``rng``.  Deterministic given
    the generator state.

    Raises
    ------
    ValueError
        If ``dim`` is not a positive integer.
    """
    dim = int(dim)
    if dim < 1:
        raise ValueError(f"sphere dimension must be positive, got {dim}")
    while True:
        v = rng.standard_normal(dim)
        n = float(np.linalg.norm(v))
        if n > 1e-12:
            return v / n


def inv_sqrt(matrix, floor):
    """Inverse principal square root of a positive definite matrix.

    Parameters
    ----------
    matrix : PsdMatrix or array_like
        Matrix whose eigenvalues must all be at least ``floor``.
    floor : float
        Positive lower bound certifying invertibility.

    Returns
    -------
    PsdMatrix
        ``B`` with ``B @ A @ B`` equal to the identity up to roundoff.

    Raises
    ------
    CurvatureFloorError
        If an eigenvalue of ``matrix`` is below ``floor``.
    """
    floor = float(floor)
    if not floor > 0:
        raise ValueError(f"floor must be positive, got {floor}")
    a = matrix_entries(matrix)
    lam, vec = np.linalg.eigh(a)
    if float(lam[0]) < floor:
        raise CurvatureFloorError(
            f"smallest eigenvalue {float(lam[0]):.6e} is below the floor {floor:.6e}"
        )
    b = (vec / np.sqrt(lam)) @ vec.T
    return PsdMatrix((b + b.T) / 2.0)


def logdet(matrix):
    """Log-determinant via the eigenvalues of a symmetric matrix.

    Raises
    ------
    SingularMatrixError
        If the smallest eigenvalue is not strictly positive.
    """
    a = matrix_entries(matrix)
    lam = np.linalg.eigvalsh(a)
    if float(lam[0]) <= 0.0:
        raise SingularMatrixError(
            f"matrix is singular or indefinite (lambda_min = {float(lam[0]):.3e})"
        )
    return float(np.sum(np.log(lam)))


def _project_ball_kkt(set_, lam_eig, vec, point):
    # stationarity: x(t) = c + (A + t I)^{-1} A (p - c); |x(t) - c| decreasing in t
    w = vec.T @ (point - set_._center)

    def radial(t):
        return float(np.linalg.norm(w * (lam_eig / (lam_eig + t))))

    hi = 1.0
    while radial(hi) > set_.radius:
        hi *= 2.0
        if hi > 1e18:
            raise ProjectionNotConvergedError("ball projection bracket blew up")
    lo = 0.0
    while hi - lo > 1e-12:
        mid = (lo + hi) / 2.0
        if radial(mid) > set_.radius:
            lo = mid
        else:
            hi = mid
    t = (lo + hi) / 2.0
    x = set_._center + vec @ (w * (lam_eig / (lam_eig + t)))
    return set_.euclidean_project(x)


def mahalanobis_project(set_, metric, point, tol=1e-10, max_iter=10_000):
    """Projection of ``point`` onto ``set_`` under the metric ``metric``.

    Minimizes ``(x - p)^T A (x - p)`` over the set.  Euclidean balls are
    solved by a one-dimensional root find on the stationarity condition.
    Other sets run accelerated projected gradient steps with the set's
    Euclidean projector, stopping when successive iterates move less than
    ``tol``.

    Parameters
    ----------
    set_ : ConvexSet
    metric : PsdMatrix or array_like
        Positive definite matrix ``A``.
    point : array_like
    tol : float
        Step-norm stopping threshold for the iterative path.
    max_iter : int
        Iteration cap for the iterative path.

    Raises
    ------
    InvalidMetricError
        If ``metric`` is not positive definite.
    ProjectionNotConvergedError
        If the iterative path hits ``max_iter`` before the step norm
        drops below ``tol``.
    """
    a = matrix_entries(metric)
    p = np.asarray(point, dtype=float).ravel()
    if a.shape != (p.size, p.size):
        raise ValueError(f"metric shape {a.shape} does not match point length {p.size}")
    lam, vec = np.linalg.eigh((a + a.T) / 2.0)
    if float(lam[0]) <= 0.0:
        raise InvalidMetricError(
            f"metric must be positive definite (lambda_min = {float(lam[0]):.3e})"
        )
    if set_.contains(p):
        return p.copy()
    if isinstance(set_, EuclideanBall):
        return _project_ball_kkt(set_, lam, vec, p)

    mu, big = 2.0 * float(lam[0]), 2.0 * float(lam[-1])
    step = 1.0 / big
    beta = (np.sqrt(big) - np.sqrt(mu)) / (np.sqrt(big) + np.sqrt(mu))

    def value(x):
        w = x - p
        return float(w @ a @ w)

    x = set_.euclidean_project(p)
    y = x.copy()
    val = value(x)
    move = np.inf
    for _ in range(max_iter):
        grad = 2.0 * (a @ (y - p))
        x_new = set_.euclidean_project(y - step * grad)
        move = float(np.linalg.norm(x_new - x))
        val_new = value(x_new)
        if val_new > val:
            y = x_new.copy()  # momentum restart
        else:
            y = x_new + beta * (x_new - x)
        x, val = x_new, val_new
        if move < tol:
            # momentum can stall on a face; accept only if a plain
            # projected-gradient step from x also stays put
            x_plain = set_.euclidean_project(x - step * 2.0 * (a @ (x - p)))
            move = float(np.linalg.norm(x_plain - x))
            if move < tol:
                return x
            y = x_plain.copy()
            x, val = x_plain, value(x_plain)
    raise ProjectionNotConvergedError(
        f"metric projection did not converge in {max_iter} iterations",
        residual=move,
    )
