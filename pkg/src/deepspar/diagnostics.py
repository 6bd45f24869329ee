"""Goodness-of-fit diagnostics as tidy data.

Plotting positions are ``k/(n+1)`` throughout. Every diagnostic returns a
small dataclass with a ``rows()`` method producing CSV-ready records.
"""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import stats

from .errors import InsufficientDataError, ParameterDomainError
from .gpd import _log1p_over_xi
from .inference import BLOCKS_PER_YEAR_WEEKLY, DEFAULT_M_TAIL, marginal_return_level, simulate_tail
from .preprocess import PolarSample, to_polar

MIN_QQ_POINTS = 20
MIN_CHI_POINTS = 100
DEFAULT_U_GRID = np.round(np.arange(0.80, 0.995, 0.01), 2)


def plotting_positions(n):
    return np.arange(1, n + 1) / (n + 1.0)


@dataclass
class QqData:
    empirical: np.ndarray
    model: np.ndarray
    label: str

    header = ("label", "k", "empirical", "model")

    def rows(self):
        return [(self.label, k + 1, e, m) for k, (e, m) in enumerate(zip(self.empirical, self.model))]


def exceedance_exponentials(model, polar):
    """Exceedances of ``polar`` mapped to the standard exponential scale.

    Excesses beyond a finite fitted endpoint map to ``inf``.
    """
    if not isinstance(polar, PolarSample):
        polar = to_polar(polar)
    u = model.threshold(polar.w)
    exc = polar.r > u
    w = polar.w[exc]
    sigma, xi = model.gpd_params(w)
    return _log1p_over_xi((polar.r[exc] - u[exc]) / sigma, xi)


def gpd_qq(model, polar):
    """Standard-exponential QQ data for the radial exceedances of ``polar``."""
    e = np.sort(exceedance_exponentials(model, polar))
    if e.size < MIN_QQ_POINTS:
        raise InsufficientDataError(f"need at least {MIN_QQ_POINTS} exceedances, got {e.size}")
    return QqData(e, -np.log1p(-plotting_positions(e.size)), "radial")


def gpd_ks_pvalue(model, polar):
    """KS p-value of the exponential-scale exceedances against Exp(1)."""
    return float(stats.kstest(exceedance_exponentials(model, polar), "expon").pvalue)


@dataclass
class ChiCurve:
    u_grid: np.ndarray
    chi: np.ndarray
    pair: tuple = ()
    tail: str = "upper"
    source: str = "data"

    header = ("source", "pair", "tail", "u", "chi", "defined")

    @property
    def defined(self):
        return ~np.isnan(self.chi)

    def rows(self):
        pair = "-".join(map(str, self.pair))
        return [
            (self.source, pair, self.tail, u, "" if np.isnan(c) else c, int(not np.isnan(c)))
            for u, c in zip(self.u_grid, self.chi)
        ]


def chi_curve(x, y, u_grid=None, tail="upper", pair=(), source="data"):
    """Empirical ``chi(u)`` from rank-transformed pseudo-uniforms.

    The lower-tail version applies the upper-tail estimator to the negated
    series. Levels with an empty conditioning set are NaN.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ParameterDomainError("series must have equal length")
    if x.size < MIN_CHI_POINTS:
        raise InsufficientDataError(f"need at least {MIN_CHI_POINTS} pairs, got {x.size}")
    if tail == "lower":
        x, y = -x, -y
    elif tail != "upper":
        raise ParameterDomainError("tail must be 'upper' or 'lower'")
    grid = DEFAULT_U_GRID if u_grid is None else np.asarray(u_grid, dtype=float)
    if np.any(np.diff(grid) <= 0):
        raise ParameterDomainError("u_grid must be strictly increasing")
    n1 = x.size + 1.0
    fx = stats.rankdata(x) / n1
    fy = stats.rankdata(y) / n1
    chi = np.full(grid.size, np.nan)
    for i, u in enumerate(grid):
        cond = fx > u
        if cond.any():
            chi[i] = np.count_nonzero(cond & (fy > u)) / np.count_nonzero(cond)
    return ChiCurve(grid, chi, tuple(pair), tail, source)


def pairwise_chi(points, names=None, u_grid=None, tail="upper", source="data"):
    """``chi`` curves for every column pair of ``points`` (n, d)."""
    points = np.asarray(points, dtype=float)
    d = points.shape[1]
    names = names or [f"site{i + 1}" for i in range(d)]
    return [
        chi_curve(points[:, i], points[:, j], u_grid, tail, (names[i], names[j]), source)
        for i, j in combinations(range(d), 2)
    ]


def _raw_values(observed):
    return np.asarray(getattr(observed, "values", observed), dtype=float)


def tail_rows(model, observed):
    """Raw observations lying in the fitted joint tail."""
    raw = _raw_values(observed)
    return raw[model.tail_mask(model.to_centred(raw))]


def tail_chi(model, observed, m_tail=100_000, rng=None, u_grid=None, tail="upper"):
    """Pairwise ``chi`` within the joint tail for data and model simulations."""
    rng = np.random.default_rng() if rng is None else rng
    names = list(getattr(observed, "site_names", ())) or None
    data = pairwise_chi(tail_rows(model, observed), names, u_grid, tail, "data")
    sim = model.to_raw(simulate_tail(model, m_tail, rng))
    return data + pairwise_chi(sim, names, u_grid, tail, "model")


def marginal_qq_tail(model, observed, margin, m_tail=DEFAULT_M_TAIL, rng=None):
    """Observed against simulated raw quantiles of one margin within the joint tail."""
    if not 0 <= margin < model.dim:
        raise IndexError(f"margin {margin} out of range for dimension {model.dim}")
    obs = np.sort(tail_rows(model, observed)[:, margin])
    if obs.size < MIN_QQ_POINTS:
        raise InsufficientDataError(f"need at least {MIN_QQ_POINTS} observed tail rows, got {obs.size}")
    rng = np.random.default_rng() if rng is None else rng
    sim = model.to_raw(simulate_tail(model, m_tail, rng))[:, margin]
    names = getattr(observed, "site_names", ())
    label = names[margin] if names else f"site{margin + 1}"
    return QqData(obs, np.quantile(sim, plotting_positions(obs.size)), label)


@dataclass
class ReturnLevelCurve:
    site: str
    side: str
    periods: np.ndarray
    model_levels: np.ndarray
    empirical_levels: np.ndarray
    resolvable: np.ndarray = field(default=None)

    header = ("site", "side", "period_years", "model_level", "empirical_level", "empirical_resolvable")

    def rows(self):
        return [
            (self.site, self.side, p, m, "" if not ok else e, int(ok))
            for p, m, e, ok in zip(self.periods, self.model_levels, self.empirical_levels, self.resolvable)
        ]


def return_level_curve(model, observed, periods, side="upper", blocks_per_year=BLOCKS_PER_YEAR_WEEKLY,
                       m_tail=DEFAULT_M_TAIL, rng=None):
    """Model and empirical return levels for every margin.

    Empirical levels are type-7 sample quantiles and are flagged
    unresolvable when the period exceeds the record length
    ``n / blocks_per_year``.
    """
    periods = np.asarray(periods, dtype=float)
    if np.any(periods <= 0) or np.any(np.diff(periods) < 0):
        raise ParameterDomainError("periods must be positive and sorted")
    raw = _raw_values(observed)
    model_levels = np.atleast_2d(
        marginal_return_level(model, periods, side, blocks_per_year, m_tail, rng)
    )
    p = 1.0 / (periods * blocks_per_year)
    resolvable = periods <= raw.shape[0] / blocks_per_year
    q = 1.0 - p if side == "upper" else p
    names = getattr(observed, "site_names", ()) or [f"site{i + 1}" for i in range(raw.shape[1])]
    curves = []
    for j in range(raw.shape[1]):
        emp = np.where(resolvable, np.quantile(raw[:, j], np.clip(q, 0, 1)), np.nan)
        curves.append(ReturnLevelCurve(names[j], side, periods, model_levels[:, j], emp, resolvable))
    return curves
