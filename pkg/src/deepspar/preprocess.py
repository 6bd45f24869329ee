"""Marginal pre-processing to a star-shaped domain and polar coordinates.

Each margin is mapped by ``x -> log(exp(x/nu) - 1)`` and the result is
centred at the geometric median of the transformed rows, so that the
origin can serve as the star-centre for the angular-radial decomposition.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceWarning,
    DegenerateMarginError,
    DegeneratePointError,
    InsufficientDataError,
    NonPositiveDataError,
    ShapeError,
)


def log_expm1(z):
    """Overflow-safe ``log(exp(z) - 1)`` for ``z > 0``."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore"):
        return z + np.log(-np.expm1(-z))


def softplus(x):
    """Overflow-safe ``log(1 + exp(x))``; the inverse of :func:`log_expm1`."""
    return np.logaddexp(0.0, np.asarray(x, dtype=float))


@dataclass(frozen=True)
class MarginalTransform:
    """Invertible map from positive raw data to the centred scale.

    Attributes
    ----------
    nu : ndarray, shape (d,)
        Per-margin scale constants (sample standard deviations).
    star_centre : ndarray, shape (d,)
        Geometric median of the transformed rows, subtracted on the way in.
    """

    nu: np.ndarray
    star_centre: np.ndarray

    def __post_init__(self):
        nu = np.asarray(self.nu, dtype=float).ravel()
        centre = np.asarray(self.star_centre, dtype=float).ravel()
        if nu.shape != centre.shape:
            raise ShapeError("nu and star_centre must have the same length")
        if not np.all(np.isfinite(nu)) or np.any(nu <= 0):
            raise DegenerateMarginError("all nu must be finite and positive")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "star_centre", centre)

    @property
    def dim(self):
        return self.nu.size

    def forward(self, raw):
        return forward(self, raw)

    def inverse(self, x):
        return inverse(self, x)

    def to_dict(self):
        return {"nu": self.nu.tolist(), "star_centre": self.star_centre.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["nu"], dtype=float), np.array(data["star_centre"], dtype=float))


@dataclass(frozen=True)
class PolarSample:
    """Radii ``r`` (n,) and unit angle vectors ``w`` (n, d)."""

    r: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float).ravel()
        w = np.atleast_2d(np.asarray(self.w, dtype=float))
        if w.shape[0] != r.size:
            raise ShapeError("r and w must have the same number of rows")
        if np.any(r <= 0):
            raise DegeneratePointError("radii must be positive")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "w", w)

    def __len__(self):
        return self.r.size

    @property
    def dim(self):
        return self.w.shape[1]

    def subset(self, mask):
        return PolarSample(self.r[mask], self.w[mask])


@dataclass
class WeiszfeldResult:
    point: np.ndarray
    iterations: int
    converged: bool
    objective_history: list = field(default_factory=list)


def _check_positive(raw):
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise NonPositiveDataError("data must be finite")
    if np.any(raw <= 0):
        raise NonPositiveDataError("data must be strictly positive")
    return raw


def _check_dim(t, arr):
    if arr.shape[-1] != t.dim:
        raise ShapeError(f"expected {t.dim} columns, got {arr.shape[-1]}")


def forward(t, raw):
    """Map raw positive data (row or matrix) to the centred scale."""
    raw = _check_positive(raw)
    _check_dim(t, raw)
    return log_expm1(raw / t.nu) - t.star_centre


def inverse(t, x):
    """Map centred-scale points back to strictly positive raw values."""
    x = np.asarray(x, dtype=float)
    _check_dim(t, x)
    return t.nu * softplus(x + t.star_centre)


def distance_sum(points, y):
    return float(np.linalg.norm(np.asarray(points) - y, axis=1).sum())


def geometric_median(points, tol=1e-8, max_iter=10_000, track_objective=False):
    """Weiszfeld iteration for the point minimising summed Euclidean distance.

    Starts from the componentwise mean and stops once the step norm drops
    below ``tol``. Distances below 1e-12 are floored at 1e-12 so an iterate
    landing on a data point does not divide by zero. Non-convergence within
    ``max_iter`` steps emits a :class:`ConvergenceWarning` and is recorded on
    the result.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] < 1:
        raise InsufficientDataError("need at least one point")
    y = pts.mean(axis=0)
    history = [distance_sum(pts, y)] if track_objective else []
    converged = pts.shape[0] == 1
    it = 0
    while not converged and it < max_iter:
        it += 1
        dist = np.maximum(np.linalg.norm(pts - y, axis=1), 1e-12)
        inv = 1.0 / dist
        y_new = (pts * inv[:, None]).sum(axis=0) / inv.sum()
        step = np.linalg.norm(y_new - y)
        y = y_new
        if track_objective:
            history.append(distance_sum(pts, y))
        converged = step < tol
    if not converged:
        warnings.warn(
            f"Weiszfeld did not converge in {max_iter} iterations", ConvergenceWarning, stacklevel=2
        )
    return WeiszfeldResult(y, it, converged, history)


def fit_transform(raw, tol=1e-8, max_iter=10_000):
    """Estimate the scale constants and star-centre from raw data (n, d).

    ``nu`` is the unbiased (ddof=1) sample standard deviation per column.
    """
    raw = _check_positive(np.atleast_2d(raw))
    n, d = raw.shape
    if n < d + 1:
        raise InsufficientDataError(f"need at least {d + 1} rows, got {n}")
    nu = raw.std(axis=0, ddof=1)
    # identical values can leave a rounding-level positive standard deviation
    if np.any(np.ptp(raw, axis=0) == 0) or not np.all(np.isfinite(nu)):
        raise DegenerateMarginError("zero-variance margin")
    transformed = log_expm1(raw / nu)
    centre = geometric_median(transformed, tol=tol, max_iter=max_iter).point
    return MarginalTransform(nu, centre)


def to_polar(x):
    """Split centred rows into radii and unit angle vectors."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.linalg.norm(x, axis=1)
    if np.any(r == 0):
        raise DegeneratePointError("a row coincides with the star-centre")
    return PolarSample(r, x / r[:, None])


def from_polar(p):
    return p.r[:, None] * p.w
