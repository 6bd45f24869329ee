"""Generalized Pareto distribution.

All functions broadcast over numpy arrays and work in double precision.
The shape parameter ``xi`` may take any finite value here; the bounded
range used by fitted models is enforced by :class:`GpdParams`.

For ``|xi| < XI_SWITCH`` the closed forms are replaced by second-order
Taylor expansions in ``xi`` around the exponential limit, which keeps the
functions smooth across ``xi = 0``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterDomainError

XI_SWITCH = 1e-6


@dataclass(frozen=True)
class GpdParams:
    """Scale and shape of a fitted GPD, with ``-0.5 < xi < 0.5``."""

    sigma: float
    xi: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ParameterDomainError(f"sigma must be positive, got {self.sigma}")
        if not (np.isfinite(self.xi) and -0.5 < self.xi < 0.5):
            raise ParameterDomainError(f"xi must lie in (-0.5, 0.5), got {self.xi}")

    @property
    def upper_endpoint(self):
        return -self.sigma / self.xi if self.xi < 0 else np.inf

    def cdf(self, y):
        return gpd_cdf(y, self.sigma, self.xi)

    def logpdf(self, y):
        return gpd_logpdf(y, self.sigma, self.xi)

    def quantile(self, q):
        return gpd_quantile(q, self.sigma, self.xi)

    def sample(self, count, rng):
        return gpd_sample(count, self.sigma, self.xi, rng)


def _check_params(sigma, xi):
    sigma = np.asarray(sigma, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
        raise ParameterDomainError("sigma must be finite and positive")
    if not np.all(np.isfinite(xi)):
        raise ParameterDomainError("xi must be finite")
    return sigma, xi


def _check_y(y):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ParameterDomainError("y must be finite")
    if np.any(y < 0):
        raise ParameterDomainError("y must be nonnegative")
    return y


def _log1p_over_xi(a, xi):
    """log1p(xi*a)/xi for a >= 0; +inf at or beyond a finite endpoint."""
    a, xi = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(xi, dtype=float))
    out = np.empty(a.shape)
    small = np.abs(xi) < XI_SWITCH
    outside = 1.0 + xi * a <= 0.0
    small &= ~outside
    big = ~small & ~outside
    with np.errstate(divide="ignore", invalid="ignore"):
        out[big] = np.log1p(xi[big] * a[big]) / xi[big]
    s_a, s_xi = a[small], xi[small]
    out[small] = s_a - s_xi * s_a**2 / 2.0 + s_xi**2 * s_a**3 / 3.0
    out[outside] = np.inf
    return out


def _expm1_over_xi(e, xi):
    """expm1(xi*e)/xi, the inverse of :func:`_log1p_over_xi`."""
    e, xi = np.broadcast_arrays(np.asarray(e, dtype=float), np.asarray(xi, dtype=float))
    out = np.empty(e.shape)
    small = np.abs(xi) < XI_SWITCH
    big = ~small
    out[big] = np.expm1(xi[big] * e[big]) / xi[big]
    s_e, s_xi = e[small], xi[small]
    out[small] = s_e + s_xi * s_e**2 / 2.0 + s_xi**2 * s_e**3 / 6.0
    return out


def _scalar(x):
    return x.item() if isinstance(x, np.ndarray) and x.ndim == 0 else x


def gpd_cdf(y, sigma, xi):
    """Distribution function ``1 - (1 + xi*y/sigma)_+^(-1/xi)``.

    Returns exactly 1 at and beyond the finite upper endpoint when ``xi < 0``.
    """
    sigma, xi = _check_params(sigma, xi)
    y = _check_y(y)
    return _scalar(-np.expm1(-_log1p_over_xi(y / sigma, xi)))


def gpd_logpdf(y, sigma, xi):
    """Log-density; ``-inf`` at and beyond a finite upper endpoint."""
    sigma, xi = _check_params(sigma, xi)
    y = _check_y(y)
    ell = _log1p_over_xi(y / sigma, xi)
    with np.errstate(invalid="ignore"):
        out = -np.log(sigma) - (1.0 + xi) * ell
    out = np.where(np.isinf(ell), -np.inf, out)
    return _scalar(out)


def gpd_pdf(y, sigma, xi):
    return _scalar(np.exp(gpd_logpdf(y, sigma, xi)))


def gpd_quantile(q, sigma, xi):
    """Inverse of :func:`gpd_cdf` for ``0 <= q < 1``."""
    sigma, xi = _check_params(sigma, xi)
    q = np.asarray(q, dtype=float)
    if not np.all((q >= 0) & (q < 1)):
        raise ParameterDomainError("q must lie in [0, 1)")
    return _scalar(sigma * _expm1_over_xi(-np.log1p(-q), xi))


def gpd_sample(count, sigma, xi, rng):
    """Draw ``count`` variates by inverse transform.

    ``sigma`` and ``xi`` may be arrays of length ``count`` to draw one
    variate per parameter pair.
    """
    if int(count) < 1:
        raise ParameterDomainError("count must be positive")
    q = rng.random(int(count))
    return np.atleast_1d(gpd_quantile(q, sigma, xi))


def to_std_exponential(y, sigma, xi):
    """Probability integral transform of GPD variates to the Exp(1) scale.

    Computes ``-log(1 - H(y))``, i.e. ``log1p(xi*y/sigma)/xi``.
    """
    sigma, xi = _check_params(sigma, xi)
    y = _check_y(y)
    ell = _log1p_over_xi(y / sigma, xi)
    if np.any(1.0 + xi * y / sigma < 0.0):
        raise ParameterDomainError("y lies beyond the upper endpoint")
    return _scalar(ell)


def nll_grad(y, sigma, xi):
    """Negative log-density and its partial derivatives in (sigma, xi).

    Returns ``(nll, d_sigma, d_xi)`` elementwise; ``nll`` is ``+inf``
    outside the support and the derivatives are then NaN.
    """
    y, sigma, xi = np.broadcast_arrays(
        np.asarray(y, dtype=float), np.asarray(sigma, dtype=float), np.asarray(xi, dtype=float)
    )
    a = y / sigma
    ell = _log1p_over_xi(a, xi)
    finite = np.isfinite(ell)
    nll = np.full(y.shape, np.inf)
    d_sigma = np.full(y.shape, np.nan)
    d_xi = np.full(y.shape, np.nan)

    af, xf, sf, lf = a[finite], xi[finite], sigma[finite], ell[finite]
    nll[finite] = np.log(sf) + (1.0 + xf) * lf
    denom = 1.0 + xf * af
    d_sigma[finite] = (1.0 - (1.0 + xf) * af / denom) / sf

    dx = np.empty(af.shape)
    small = np.abs(xf) < XI_SWITCH
    big = ~small
    # d/dxi of (1/xi + 1) log1p(xi a) = -log1p(xi a)/xi^2 + (1/xi + 1) a/(1 + xi a)
    dx[big] = -lf[big] / xf[big] + (1.0 / xf[big] + 1.0) * af[big] / denom[big]
    s_a, s_x = af[small], xf[small]
    dx[small] = (s_a - s_a**2 / 2.0) + 2.0 * s_x * (s_a**3 / 3.0 - s_a**2 / 2.0)
    d_xi[finite] = dx
    return nll, d_sigma, d_xi


def fit_constant(y, xi_bounds=(-0.49, 0.49)):
    """Maximum-likelihood ``(sigma, xi)`` for i.i.d. excesses ``y > 0``.

    Optimises over ``(log sigma, xi)`` with L-BFGS-B and analytic gradients,
    starting from the exponential fit.
    """
    from scipy.optimize import minimize

    y = _check_y(y)
    if y.size < 2:
        raise ParameterDomainError("need at least two excesses")
    y_max = float(y.max())

    def objective(p):
        sigma, xi = np.exp(p[0]), p[1]
        if xi < 0 and y_max >= -sigma / xi:
            return np.inf, np.zeros(2)
        nll, d_sigma, d_xi = nll_grad(y, sigma, xi)
        return float(nll.mean()), np.array([float((d_sigma * sigma).mean()), float(d_xi.mean())])

    start = np.array([np.log(y.mean()), 0.0])
    res = minimize(objective, start, jac=True, method="L-BFGS-B",
                   bounds=[(None, None), xi_bounds])
    return float(np.exp(res.x[0])), float(res.x[1])
