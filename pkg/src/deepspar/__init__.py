"""Semi-parametric angular-radial models for multivariate extremes.

Angle-dependent thresholds and generalized Pareto tails are fitted by small
neural networks; the fitted model supports tail simulation, tail
probabilities, return levels and goodness-of-fit diagnostics.
"""

from .dataio import ObservationMatrix, synth_gaussian_copula
from .errors import SparError
from .inference import (
    estimate_probability,
    generate_event_set,
    joint_tail_probability,
    marginal_return_level,
    simulate,
    simulate_tail,
    sum_tail_probability,
)
from .spar import SparConfig, SparModel, fit_centred, spar_fit

__version__ = "0.1.0"

__all__ = [
    "ObservationMatrix",
    "SparConfig",
    "SparError",
    "SparModel",
    "estimate_probability",
    "fit_centred",
    "generate_event_set",
    "joint_tail_probability",
    "marginal_return_level",
    "simulate",
    "simulate_tail",
    "spar_fit",
    "sum_tail_probability",
    "synth_gaussian_copula",
]
