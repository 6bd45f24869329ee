"""Simulation, tail probabilities and return levels from a fitted model.

Probabilities follow the law of total probability over the body ``Q_u``
(exact enumeration of the stored body points, weight ``1 - alpha``) and the
joint tail ``Q_u^c`` (Monte Carlo draws from the fitted tail, weight
``alpha``).
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InfeasibleRegionError, ModelStateError, ResolutionError
from .gpd import gpd_quantile

BLOCKS_PER_YEAR_WEEKLY = 365.25 / 7.0
DEFAULT_M_TAIL = 2_000_000
MIN_HITS = 10
N_UNIFORM_PROBES = 100_000


@dataclass(frozen=True)
class RegionPredicate:
    """A region of R^d defined on the centred or the raw scale.

    ``kind`` is one of ``above`` / ``below`` (componentwise box; NaN levels
    leave a margin unconstrained), ``sum_above`` / ``sum_below``, ``tail``
    (the joint tail of the model), ``all`` or ``complement``.
    """

    kind: str
    scale: str = "centred"
    levels: tuple = ()
    value: float = float("nan")
    inner: Optional["RegionPredicate"] = None

    def contains(self, x, model):
        """Membership of centred-scale points ``x`` (rows)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "all":
            return np.ones(x.shape[0], dtype=bool)
        if self.kind == "complement":
            return ~self.inner.contains(x, model)
        if self.kind == "tail":
            return model.tail_mask(x)
        pts = model.to_raw(x) if self.scale == "raw" else x
        if self.kind == "sum_above":
            return pts.sum(axis=1) > self.value
        if self.kind == "sum_below":
            return pts.sum(axis=1) < self.value
        levels = np.asarray(self.levels, dtype=float)
        active = ~np.isnan(levels)
        if self.kind == "above":
            return np.all(pts[:, active] > levels[active], axis=1)
        if self.kind == "below":
            return np.all(pts[:, active] < levels[active], axis=1)
        raise ValueError(f"unknown region kind {self.kind!r}")

    def complement(self):
        if self.kind == "complement":
            return self.inner
        return RegionPredicate("complement", self.scale, inner=self)

    def centred_levels(self, model):
        levels = np.asarray(self.levels, dtype=float)
        if self.scale == "centred" or model.transform is None:
            return levels
        t = model.transform
        out = np.full(levels.shape, np.nan)
        active = ~np.isnan(levels)
        if np.any(levels[active] <= 0):
            # a raw level <= 0 leaves the "above" margin unconstrained and the
            # "below" margin empty; no certificate is attempted
            return None
        from .preprocess import log_expm1

        out[active] = log_expm1(levels[active] / t.nu[active]) - t.star_centre[active]
        return out

    def body_disjoint(self, model):
        """True when the region provably misses the body ``Q_u``."""
        if self.kind not in ("above", "below") or not self.levels:
            return False
        levels = self.centred_levels(model)
        if levels is None:
            return False
        q_max, q_min = quantile_set_extremes(model)
        active = ~np.isnan(levels)
        if self.kind == "above":
            return bool(np.any(levels[active] >= q_max[active]))
        return bool(np.any(levels[active] <= q_min[active]))

    def describe(self):
        if self.kind == "complement":
            return f"not({self.inner.describe()})"
        if self.kind in ("all", "tail"):
            return self.kind
        if self.kind.startswith("sum"):
            op = ">" if self.kind == "sum_above" else "<"
            return f"sum({self.scale}) {op} {self.value:g}"
        op = ">" if self.kind == "above" else "<"
        parts = [f"x{i + 1} {op} {v:.6g}" for i, v in enumerate(self.levels) if not math.isnan(v)]
        return f"{self.scale}: " + " & ".join(parts)


def marginal_above(i, h, dim, scale="centred"):
    levels = [float("nan")] * dim
    levels[i] = float(h)
    return RegionPredicate("above", scale, tuple(levels))


def marginal_below(i, l, dim, scale="centred"):
    levels = [float("nan")] * dim
    levels[i] = float(l)
    return RegionPredicate("below", scale, tuple(levels))


def joint_above(levels, scale="raw"):
    return RegionPredicate("above", scale, tuple(float(v) for v in levels))


def joint_below(levels, scale="raw"):
    return RegionPredicate("below", scale, tuple(float(v) for v in levels))


def sum_above(s, scale="raw"):
    return RegionPredicate("sum_above", scale, value=float(s))


def sum_below(s, scale="raw"):
    return RegionPredicate("sum_below", scale, value=float(s))


def tail_region():
    return RegionPredicate("tail")


def everywhere():
    return RegionPredicate("all")


@dataclass
class TailProbabilityReport:
    probability: float
    return_period_years: float
    m_body: int
    m_tail: int
    region: str
    tail_hits: int
    body_hits: int
    standard_error: float
    resolved: bool
    blocks_per_year: float = BLOCKS_PER_YEAR_WEEKLY
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        period = self.return_period_years
        return {
            "region": self.region,
            "probability": self.probability,
            "return_period_years": None if math.isinf(period) else period,
            "standard_error": self.standard_error,
            "m_body": self.m_body,
            "m_tail": self.m_tail,
            "body_hits": self.body_hits,
            "tail_hits": self.tail_hits,
            "resolved": self.resolved,
            "blocks_per_year": self.blocks_per_year,
            **self.extra,
        }


def return_period(probability, blocks_per_year=BLOCKS_PER_YEAR_WEEKLY):
    """Years between events of per-block probability ``probability``."""
    return math.inf if probability <= 0 else 1.0 / (probability * blocks_per_year)


def quantile_set_extremes(model, probe_angles=None, n_uniform=N_UNIFORM_PROBES, seed=0):
    """Coordinatewise max and min of ``w_i u(w)`` over probe angles.

    The default probe set is the stored exceedance angles plus ``n_uniform``
    uniform directions on the sphere; the default result is cached on the
    model.
    """
    default = probe_angles is None
    if default and "qset" in model._cache:
        return model._cache["qset"]
    if default:
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((n_uniform, model.dim))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        probe_angles = np.vstack([model.exceedance_angles, g])
    w = np.atleast_2d(np.asarray(probe_angles, dtype=float))
    pts = w * model.threshold(w)[:, None]
    result = (pts.max(axis=0), pts.min(axis=0))
    if default:
        model._cache["qset"] = result
    return result


def simulate_tail(model, m, rng, return_index=False):
    """Draw ``m`` centred-scale points from the fitted joint tail.

    Angles are resampled with replacement from the stored exceedance
    angles; radii are ``u(w)`` plus a GPD(sigma(w), xi(w)) excess.
    """
    angles = model.exceedance_angles
    if angles.shape[0] == 0:
        raise ModelStateError("model has no stored exceedance angles")
    u, sigma, xi = model.exceedance_table()
    idx = rng.integers(0, angles.shape[0], size=int(m))
    y = np.atleast_1d(gpd_quantile(rng.random(int(m)), sigma[idx], xi[idx]))
    x = (u[idx] + y)[:, None] * angles[idx]
    return (x, idx) if return_index else x


def sample_body(model, m, rng):
    """Resample ``m`` stored body points with replacement."""
    body = model.body_points
    if body.shape[0] == 0:
        raise ModelStateError("model has no stored body points")
    return body[rng.integers(0, body.shape[0], size=int(m))]


def simulate(model, m, rng):
    """Draw ``m`` centred-scale points from the full fitted distribution.

    Each point comes from the body resample with probability ``1 - alpha``
    and from :func:`simulate_tail` otherwise; row order is random.
    """
    n_tail = int(rng.binomial(int(m), model.alpha))
    x = np.vstack([sample_body(model, int(m) - n_tail, rng), simulate_tail(model, n_tail, rng)])
    return x[rng.permutation(x.shape[0])]


def estimate_probability(model, region, m_tail=DEFAULT_M_TAIL, rng=None, tail_sample=None,
                         blocks_per_year=BLOCKS_PER_YEAR_WEEKLY):
    """Estimate ``P(X in region)``.

    Pass ``tail_sample`` (centred-scale draws from :func:`simulate_tail`)
    to reuse one Monte Carlo sample across several regions.
    """
    alpha = model.alpha
    n_body = model.body_points.shape[0]
    if region.body_disjoint(model) or n_body == 0:
        body_hits = 0
    else:
        body_hits = int(region.contains(model.body_points, model).sum())
    if tail_sample is None:
        rng = np.random.default_rng() if rng is None else rng
        tail_sample = simulate_tail(model, m_tail, rng)
    m = tail_sample.shape[0]
    tail_hits = int(region.contains(tail_sample, model).sum())
    q = tail_hits / m
    body_frac = body_hits / n_body if n_body else 0.0
    p = (1.0 - alpha) * body_frac + alpha * q
    p = min(max(p, 0.0), 1.0)
    return TailProbabilityReport(
        probability=p,
        return_period_years=return_period(p, blocks_per_year),
        m_body=n_body,
        m_tail=m,
        region=region.describe(),
        tail_hits=tail_hits,
        body_hits=body_hits,
        standard_error=alpha * math.sqrt(q * (1.0 - q) / m),
        resolved=(tail_hits >= MIN_HITS) or (body_hits >= MIN_HITS),
        blocks_per_year=blocks_per_year,
    )


def weighted_quantile(values, weights, q):
    """Linear-interpolation quantile of a weighted sample.

    Order statistic ``k`` sits at plotting position ``S_k / S_n`` where
    ``S_k`` is the total weight strictly before it; with equal weights this
    is the usual type-7 rule ``(k - 1)/(n - 1)``.
    """
    order = np.argsort(values, kind="stable")
    v = np.asarray(values, dtype=float)[order]
    w = np.asarray(weights, dtype=float)[order]
    before = np.cumsum(w) - w
    pos = before / before[-1]
    return np.interp(q, pos, v)


def combined_sample(model, m_tail, rng):
    """Raw-scale body resample plus tail simulation, with mixture weights.

    ``ceil(m_tail/(1-alpha))`` body resamples and ``m_tail`` tail draws are
    combined; weights give the body total mass ``1 - alpha`` and the tail
    ``alpha``.
    """
    alpha = model.alpha
    m_body = math.ceil(m_tail / (1.0 - alpha))
    body = sample_body(model, m_body, rng)
    tail = simulate_tail(model, m_tail, rng)
    raw = model.to_raw(np.vstack([body, tail]))
    weights = np.concatenate([np.full(m_body, (1.0 - alpha) / m_body), np.full(m_tail, alpha / m_tail)])
    return raw, weights


def _check_side(side):
    if side not in ("upper", "lower"):
        raise ValueError("side must be 'upper' or 'lower'")


def required_m_tail(probability, alpha):
    return math.ceil(MIN_HITS * alpha / probability)


def marginal_return_level(model, n_years, side="upper", blocks_per_year=BLOCKS_PER_YEAR_WEEKLY,
                          m_tail=DEFAULT_M_TAIL, rng=None, sample=None):
    """Raw-scale ``N``-year return levels of every margin.

    ``n_years`` may be a scalar (result shape (d,)) or a sequence (result
    shape (len(n_years), d)). A precomputed :func:`combined_sample` may be
    passed as ``sample``.
    """
    _check_side(side)
    years = np.atleast_1d(np.asarray(n_years, dtype=float))
    if np.any(years <= 0):
        raise ValueError("return periods must be positive")
    p = 1.0 / (years * blocks_per_year)
    if np.any(p > 1):
        raise ValueError("return period shorter than one block")
    need = required_m_tail(p.min(), model.alpha)
    if sample is None:
        if m_tail < need:
            raise ResolutionError(
                f"return period {years.max():g} years needs m_tail >= {need}", required_m_tail=need
            )
        rng = np.random.default_rng() if rng is None else rng
        sample = combined_sample(model, m_tail, rng)
    raw, weights = sample
    levels_q = 1.0 - p if side == "upper" else p
    out = np.column_stack([weighted_quantile(raw[:, j], weights, levels_q) for j in range(raw.shape[1])])
    return out[0] if np.ndim(n_years) == 0 else out


def joint_tail_probability(model, n_years, side="upper", blocks_per_year=BLOCKS_PER_YEAR_WEEKLY,
                           m_tail=DEFAULT_M_TAIL, rng=None):
    """Probability that every margin is beyond its own ``N``-year level."""
    _check_side(side)
    rng = np.random.default_rng() if rng is None else rng
    levels = marginal_return_level(model, n_years, side, blocks_per_year, m_tail, rng)
    region = joint_above(levels) if side == "upper" else joint_below(levels)
    report = estimate_probability(model, region, m_tail, rng, blocks_per_year=blocks_per_year)
    report.extra.update({"return_levels": [float(v) for v in levels], "n_years": float(n_years), "side": side})
    return report


def sum_tail_probability(model, s, side="upper", m_tail=DEFAULT_M_TAIL, rng=None,
                         blocks_per_year=BLOCKS_PER_YEAR_WEEKLY):
    """Probability that the raw-scale sum of margins is above (below) ``s``."""
    _check_side(side)
    region = sum_above(s) if side == "upper" else sum_below(s)
    report = estimate_probability(model, region, m_tail, rng, blocks_per_year=blocks_per_year)
    report.extra.update({"threshold": float(s), "side": side})
    return report


def generate_event_set(model, m, region=None, rng=None, chunk=100_000, max_trials=50_000_000,
                       return_stats=False):
    """Raw-scale tail events, optionally conditioned on ``region`` by rejection.

    Raises :class:`InfeasibleRegionError` when the trial budget runs out
    before ``m`` events are accepted.
    """
    rng = np.random.default_rng() if rng is None else rng
    accepted = []
    n_acc = 0
    trials = 0
    while n_acc < m:
        if trials >= max_trials:
            rate = n_acc / trials
            raise InfeasibleRegionError(
                f"accepted {n_acc} of {trials} tail draws (rate {rate:.3g}); region too rare"
            )
        size = chunk if region is not None else m - n_acc
        x = simulate_tail(model, size, rng)
        trials += size
        if region is not None:
            x = x[region.contains(x, model)]
        accepted.append(x)
        n_acc += x.shape[0]
    events = model.to_raw(np.vstack(accepted)[:m])
    if return_stats:
        return events, {"trials": trials, "accepted": n_acc, "acceptance_rate": n_acc / trials}
    return events
