"""Non-parametric bootstrap with full refits and percentile intervals."""

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .errors import BootstrapFailure, ParameterDomainError, PrecisionWarning
from .spar import SparConfig, spar_fit

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.1
SUMMARY_HEADER = ("statistic", "estimate", "lo", "hi", "B", "level")


@dataclass
class BootstrapEnsemble:
    models: list
    replicate_seeds: list
    master_seed: int
    failures: list = field(default_factory=list)

    @property
    def B(self):
        return len(self.replicate_seeds)

    def __len__(self):
        return len(self.models)


def replicate_seeds(master_seed, B):
    """Distinct ``(resample_seed, fit_seed)`` pairs derived from one master seed."""
    children = np.random.SeedSequence(master_seed).spawn(B)
    return [tuple(int(s) for s in c.generate_state(2)) for c in children]


def _default_resampler(rng, n):
    return rng.integers(0, n, size=n)


def _replicate(raw, cfg, resample_seed, fit_seed, resampler):
    idx = resampler(np.random.default_rng(resample_seed), raw.shape[0])
    try:
        return spar_fit(raw[idx], replace(cfg, seed=fit_seed)), None
    except Exception as exc:  # a failed replicate is recorded, not fatal
        return None, f"{type(exc).__name__}: {exc}"


def bootstrap_fit(raw, cfg=SparConfig(), B=100, master_seed=0, resampler=None, n_jobs=1):
    """Refit the full pipeline on ``B`` row resamples of ``raw``.

    Each replicate gets its own resample seed and fit seed (stored in
    ``replicate_seeds`` as the fit seed). ``resampler(rng, n)`` returns row
    indices and defaults to sampling with replacement. Raises
    :class:`BootstrapFailure` when more than 10% of replicates fail.
    """
    if B < 1:
        raise ParameterDomainError("B must be positive")
    raw = np.asarray(getattr(raw, "values", raw), dtype=float)
    resampler = resampler or _default_resampler
    seeds = replicate_seeds(master_seed, B)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_replicate)(raw, cfg, rs, fs, resampler) for rs, fs in seeds
    )
    models, failures = [], []
    for b, (model, err) in enumerate(results):
        if model is None:
            log.warning("bootstrap replicate %d failed: %s", b, err)
            failures.append((b, err))
        else:
            models.append(model)
    if len(failures) > MAX_FAILURE_FRACTION * B:
        raise BootstrapFailure(f"{len(failures)} of {B} bootstrap replicates failed", failures)
    return BootstrapEnsemble(models, [fs for _, fs in seeds], master_seed, failures)


def percentile_ci(values, level=0.95):
    """Empirical ``(lo, hi)`` percentile interval (linear interpolation)."""
    values = np.asarray(values, dtype=float).ravel()
    if not 0 < level < 1:
        raise ParameterDomainError("level must lie in (0, 1)")
    if values.size == 0:
        raise ParameterDomainError("no values")
    if values.size < 1.0 / (1.0 - level) - 1e-9:
        warnings.warn(
            f"{values.size} replicates are too few for a {level:.0%} interval", PrecisionWarning, stacklevel=2
        )
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [tail, 1.0 - tail])
    return float(lo), float(hi)


def ensemble_statistic(ensemble, statistic, n_jobs=1):
    """Evaluate ``statistic(model, replicate_index)`` on every replicate."""
    out = Parallel(n_jobs=n_jobs)(delayed(statistic)(m, b) for b, m in enumerate(ensemble.models))
    return np.asarray(out, dtype=float)


def summary_row(name, estimate, values, level=0.95):
    lo, hi = percentile_ci(values, level)
    return (name, float(estimate), lo, hi, len(values), level)
