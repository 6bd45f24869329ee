"""Two-stage deep SPAR fit and the fitted model container.

Stage one trains a threshold network ``u(w)`` by quantile regression on the
radii; stage two trains a shared-trunk network for the angle-dependent GPD
parameters of the radial excesses above ``u(w)``.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import gpd
from .errors import InsufficientDataError, ModelStateError, ShapeError
from .neural import SHAPE_INIT_BIAS, MlpParams, TrainSchedule, mlp_forward, mlp_init, train
from .preprocess import MarginalTransform, PolarSample, fit_transform, to_polar

log = logging.getLogger(__name__)

FORMAT_NAME = "deepspar-model"
FORMAT_VERSION = 1
REPARAMS = ("orthogonal", "direct")
_CHUNK = 200_000


@dataclass(frozen=True)
class SparConfig:
    alpha: float = 0.15
    threshold_hidden: tuple = (32, 32, 32)
    gpd_hidden: tuple = (32, 32, 32)
    threshold_schedule: TrainSchedule = TrainSchedule(max_epochs=500, batch_size=1024)
    gpd_schedule: TrainSchedule = TrainSchedule(max_epochs=750, batch_size=None)
    reparam: str = "orthogonal"
    seed: int = 0
    min_points: int = 500
    min_exceedances: int = 200

    def __post_init__(self):
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")
        if self.reparam not in REPARAMS:
            raise ValueError(f"reparam must be one of {REPARAMS}")
        object.__setattr__(self, "threshold_hidden", tuple(self.threshold_hidden))
        object.__setattr__(self, "gpd_hidden", tuple(self.gpd_hidden))

    def stage_seeds(self):
        """Seeds for (threshold init, threshold training, gpd init, gpd training)."""
        return [int(s) for s in np.random.SeedSequence(self.seed).generate_state(4)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("threshold_schedule", "gpd_schedule"):
            if key in data and isinstance(data[key], dict):
                data[key] = TrainSchedule(**data[key])
        return cls(**data)


# -- losses -----------------------------------------------------------------

def tilted_loss(r, u_val, alpha):
    """Pinball loss at level ``1 - alpha`` and its derivative in ``u_val``.

    Returns ``(loss, d_loss/d_u)``; at ``r == u_val`` the subgradient
    ``alpha`` is used.
    """
    t = np.asarray(r, dtype=float) - np.asarray(u_val, dtype=float)
    below = t <= 0
    loss = t * ((1.0 - alpha) - (t < 0))
    grad = np.where(below, alpha, alpha - 1.0)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def outputs_to_gpd(outputs, reparam):
    """Convert GPD-network outputs to ``(sigma, xi)``."""
    outputs = np.atleast_2d(outputs)
    xi = outputs[:, 1]
    if reparam == "orthogonal":
        return outputs[:, 0] / (1.0 + xi), xi
    return outputs[:, 0], xi


def gpd_nll(excess, outputs, reparam="orthogonal"):
    """GPD negative log-likelihood per row and its gradient in the outputs.

    ``outputs`` has columns ``(nu, xi)`` under the orthogonal
    parametrisation, where ``sigma = nu / (1 + xi)``, or ``(sigma, xi)``
    under ``direct``. Rows outside the GPD support get ``+inf``.
    """
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    sigma, xi = outputs_to_gpd(outputs, reparam)
    nll, d_sigma, d_xi = gpd.nll_grad(np.ravel(excess), sigma, xi)
    grad = np.empty_like(outputs)
    if reparam == "orthogonal":
        grad[:, 0] = d_sigma / (1.0 + xi)
        grad[:, 1] = d_xi - d_sigma * sigma / (1.0 + xi)
    else:
        grad[:, 0] = d_sigma
        grad[:, 1] = d_xi
    return nll, grad


def _threshold_adapter(alpha):
    def loss(outputs, r):
        values, grad = tilted_loss(r, outputs[:, 0], alpha)
        return values, grad[:, None]

    return loss


def _gpd_adapter(reparam):
    def loss(outputs, excess):
        return gpd_nll(excess, outputs, reparam)

    return loss


# -- model --------------------------------------------------------------------

def _eval_chunked(net, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] <= _CHUNK:
        return mlp_forward(net, x)
    return np.concatenate([mlp_forward(net, x[i:i + _CHUNK]) for i in range(0, x.shape[0], _CHUNK)])


@dataclass
class SparModel:
    """A fitted SPAR model on the centred scale.

    ``transform`` maps raw data to the centred scale; ``None`` means the
    model was fitted directly on centred data and both scales coincide.
    """

    transform: Optional[MarginalTransform]
    threshold_net: MlpParams
    gpd_net: MlpParams
    alpha: float
    exceedance_angles: np.ndarray
    body_points: np.ndarray
    reparam: str = "orthogonal"
    metadata: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.exceedance_angles = np.atleast_2d(np.asarray(self.exceedance_angles, dtype=float))
        self.body_points = np.asarray(self.body_points, dtype=float).reshape(-1, self.dim)
        if self.threshold_net.input_dim != self.dim or self.gpd_net.input_dim != self.dim:
            raise ShapeError("network input dimensions do not match the model dimension")
        if self.transform is not None and self.transform.dim != self.dim:
            raise ShapeError("transform dimension does not match the model dimension")

    @property
    def dim(self):
        return self.threshold_net.input_dim

    def threshold(self, w):
        """Threshold ``u(w)`` at unit angle vectors ``w`` (rows)."""
        return _eval_chunked(self.threshold_net, w)[:, 0]

    def gpd_params(self, w):
        """Angle-dependent ``(sigma(w), xi(w))``."""
        return outputs_to_gpd(_eval_chunked(self.gpd_net, w), self.reparam)

    def tail_mask(self, x):
        """True where centred points lie in the joint tail, ``|x| > u(x/|x|)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.linalg.norm(x, axis=1)
        mask = np.zeros(x.shape[0], dtype=bool)
        pos = r > 0
        mask[pos] = r[pos] > self.threshold(x[pos] / r[pos, None])
        return mask

    def to_raw(self, x):
        x = np.asarray(x, dtype=float)
        return x if self.transform is None else self.transform.inverse(x)

    def to_centred(self, raw):
        raw = np.asarray(raw, dtype=float)
        return raw if self.transform is None else self.transform.forward(raw)

    def exceedance_table(self):
        """Threshold and GPD parameters at every stored exceedance angle."""
        if "table" not in self._cache:
            w = self.exceedance_angles
            sigma, xi = self.gpd_params(w)
            self._cache["table"] = (self.threshold(w), sigma, xi)
        return self._cache["table"]

    def body_raw(self):
        if "body_raw" not in self._cache:
            self._cache["body_raw"] = self.to_raw(self.body_points)
        return self._cache["body_raw"]

    def to_dict(self):
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "dim": self.dim,
            "alpha": self.alpha,
            "reparam": self.reparam,
            "transform": None if self.transform is None else self.transform.to_dict(),
            "threshold_net": self.threshold_net.to_dict(),
            "gpd_net": self.gpd_net.to_dict(),
            "exceedance_angles": self.exceedance_angles.tolist(),
            "body_points": self.body_points.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != FORMAT_NAME:
            raise ModelStateError("not a deepspar model file")
        if data.get("version") != FORMAT_VERSION:
            raise ModelStateError(f"unsupported model format version {data.get('version')}")
        transform = None if data["transform"] is None else MarginalTransform.from_dict(data["transform"])
        dim = int(data["dim"])
        return cls(
            transform=transform,
            threshold_net=MlpParams.from_dict(data["threshold_net"]),
            gpd_net=MlpParams.from_dict(data["gpd_net"]),
            alpha=float(data["alpha"]),
            exceedance_angles=np.array(data["exceedance_angles"], dtype=float).reshape(-1, dim),
            body_points=np.array(data["body_points"], dtype=float).reshape(-1, dim),
            reparam=data["reparam"],
            metadata=data.get("metadata", {}),
        )

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=False)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        from .dataio import atomic_write_text

        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


# -- fitting ------------------------------------------------------------------

def _train_summary(result):
    return {
        "epochs": len(result.history),
        "stages": result.stages,
        "divergences": result.divergences,
        "best_val_loss": result.best_val_loss,
    }


def fit_threshold(polar, cfg, return_result=False):
    """Quantile-regression network for the conditional ``(1-alpha)`` radius quantile."""
    if len(polar) < cfg.min_points:
        raise InsufficientDataError(f"need at least {cfg.min_points} points, got {len(polar)}")
    init_seed, train_seed, _, _ = cfg.stage_seeds()
    start = np.log(np.quantile(polar.r, 1.0 - cfg.alpha))
    net = mlp_init(polar.dim, cfg.threshold_hidden, ("exponential",), init_seed, output_bias=[start])
    sched = replace(cfg.threshold_schedule, seed=train_seed)
    result = train(net, polar.w, polar.r, _threshold_adapter(cfg.alpha), sched)
    return (result.params, result) if return_result else result.params


def fit_gpd(polar, threshold_net, cfg, return_result=False):
    """Shared-trunk GPD regression on the radial excesses above ``u(w)``."""
    u = _eval_chunked(threshold_net, polar.w)[:, 0]
    exceed = polar.r > u
    n_exc = int(exceed.sum())
    if n_exc < cfg.min_exceedances:
        raise InsufficientDataError(f"need at least {cfg.min_exceedances} exceedances, got {n_exc}")
    excess = polar.r[exceed] - u[exceed]
    w = polar.w[exceed]
    _, _, init_seed, train_seed = cfg.stage_seeds()

    # Start the heads at the constant-parameter MLE, keeping xi >= the
    # non-negative default so every training excess has finite likelihood.
    sigma_c, xi_c = gpd.fit_constant(excess)
    xi0 = max(xi_c, np.arctan(SHAPE_INIT_BIAS) / np.pi)
    scale0 = sigma_c * (1.0 + xi0) if cfg.reparam == "orthogonal" else sigma_c
    net = mlp_init(
        polar.dim,
        cfg.gpd_hidden,
        ("exponential", "scaled_arctan"),
        init_seed,
        output_bias=[np.log(scale0), np.tan(np.pi * xi0)],
        output_scale=0.0,
    )
    sched = replace(cfg.gpd_schedule, seed=train_seed)
    result = train(net, w, excess, _gpd_adapter(cfg.reparam), sched)
    return (result.params, result) if return_result else result.params


def fit_polar(polar, cfg, transform=None, extra_metadata=None):
    """Fit both stages to an already-centred polar sample and assemble a model."""
    thr_net, thr_res = fit_threshold(polar, cfg, return_result=True)
    gpd_net, gpd_res = fit_gpd(polar, thr_net, cfg, return_result=True)
    u = _eval_chunked(thr_net, polar.w)[:, 0]
    exceed = polar.r > u
    metadata = {
        "n": len(polar),
        "n_exceedances": int(exceed.sum()),
        "exceedance_fraction": float(exceed.mean()),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "threshold_training": _train_summary(thr_res),
        "gpd_training": _train_summary(gpd_res),
    }
    metadata.update(extra_metadata or {})
    return SparModel(
        transform=transform,
        threshold_net=thr_net,
        gpd_net=gpd_net,
        alpha=cfg.alpha,
        exceedance_angles=polar.w[exceed],
        body_points=polar.r[~exceed, None] * polar.w[~exceed],
        reparam=cfg.reparam,
        metadata=metadata,
    )


def spar_fit(raw, cfg=SparConfig()):
    """Pre-process positive raw data (n, d) and fit a SPAR model.

    ``raw`` may be an array or an object with a ``values`` attribute such as
    :class:`deepspar.dataio.ObservationMatrix`.
    """
    values = np.atleast_2d(np.asarray(getattr(raw, "values", raw), dtype=float))
    if values.shape[1] < 2:
        raise ShapeError("SPAR models need at least two margins")
    if values.shape[0] < cfg.min_points:
        raise InsufficientDataError(f"need at least {cfg.min_points} rows, got {values.shape[0]}")
    transform = fit_transform(values)
    polar = to_polar(transform.forward(values))
    model = fit_polar(polar, cfg, transform=transform)
    log.info(
        "fitted SPAR model: n=%d, exceedance fraction %.4f",
        model.metadata["n"],
        model.metadata["exceedance_fraction"],
    )
    return model


def fit_centred(x, cfg=SparConfig()):
    """Fit a SPAR model to data already on the centred scale (no transform)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] < cfg.min_points:
        raise InsufficientDataError(f"need at least {cfg.min_points} rows, got {x.shape[0]}")
    return fit_polar(to_polar(x), cfg, transform=None)


def constant_model(dim, threshold, sigma, xi, alpha, exceedance_angles, body_points,
                   transform=None, reparam="orthogonal"):
    """A model with angle-independent ``u``, ``sigma`` and ``xi``.

    The networks have no hidden layer and zero weights, so every output is
    its bias. Useful as a known truth for simulation studies.
    """
    thr = MlpParams((dim, 1), ("exponential",), np.r_[np.zeros(dim), np.log(threshold)])
    scale = sigma * (1.0 + xi) if reparam == "orthogonal" else sigma
    gpd_net = MlpParams(
        (dim, 2), ("exponential", "scaled_arctan"), np.r_[np.zeros(2 * dim), np.log(scale), np.tan(np.pi * xi)]
    )
    return SparModel(transform, thr, gpd_net, alpha, exceedance_angles, body_points, reparam)
