"""Small fully-connected networks with analytic backpropagation and Adam.

Parameters live in one flat float64 vector (``MlpParams.theta``); per-layer
weight matrices and bias vectors are views into it. Gradients use the same
flat layout, which keeps the optimizer, checkpointing and serialization
trivial.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import InitializationError, NonFiniteGradientError, ShapeError

log = logging.getLogger(__name__)

HEADS = ("exponential", "scaled_arctan", "identity")
EXP_CLAMP = 700.0
SHAPE_INIT_BIAS = 0.1
_HALF_BELOW = np.nextafter(0.5, 0.0)


@dataclass
class MlpParams:
    """Weights of a ReLU network with one scalar output head per column.

    ``layer_sizes`` runs from the input dimension through the hidden widths
    to the number of outputs. ``heads[k]`` names the output transform of
    column ``k``: ``exponential`` (strictly positive), ``scaled_arctan``
    (``arctan(z)/pi``, inside (-0.5, 0.5)) or ``identity``.
    """

    layer_sizes: tuple
    heads: tuple
    theta: np.ndarray
    activation: str = "relu"
    _slices: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self.heads = tuple(self.heads)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ShapeError(f"invalid layer sizes {self.layer_sizes}")
        if len(self.heads) != self.layer_sizes[-1]:
            raise ShapeError("need one head per output")
        unknown = set(self.heads) - set(HEADS)
        if unknown:
            raise ValueError(f"unknown head(s): {sorted(unknown)}")
        if self.activation != "relu":
            raise ValueError("only relu hidden activations are supported")
        self._slices = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._slices.append((w, b, (fan_in, fan_out)))
        self.theta = np.ascontiguousarray(self.theta, dtype=float)
        if self.theta.shape != (offset,):
            raise ShapeError(f"theta must have length {offset}, got {self.theta.shape}")

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]

    @property
    def n_params(self):
        return self.theta.size

    def unflatten(self, flat):
        """Split a flat vector into per-layer (weights, biases) views."""
        ws = [flat[w].reshape(shape) for w, _, shape in self._slices]
        bs = [flat[b] for _, b, _ in self._slices]
        return ws, bs

    @property
    def weights(self):
        return self.unflatten(self.theta)[0]

    @property
    def biases(self):
        return self.unflatten(self.theta)[1]

    def with_theta(self, theta):
        return replace(self, theta=theta)

    def copy(self):
        return self.with_theta(self.theta.copy())

    def __call__(self, inputs):
        return mlp_forward(self, inputs)

    def to_dict(self):
        ws, bs = self.unflatten(self.theta)
        return {
            "layer_sizes": list(self.layer_sizes),
            "heads": list(self.heads),
            "activation": self.activation,
            "weights": [w.tolist() for w in ws],
            "biases": [b.tolist() for b in bs],
        }

    @classmethod
    def from_dict(cls, data):
        parts = []
        for w, b in zip(data["weights"], data["biases"]):
            parts.append(np.asarray(w, dtype=float).ravel())
            parts.append(np.asarray(b, dtype=float).ravel())
        theta = np.concatenate(parts) if parts else np.zeros(0)
        return cls(tuple(data["layer_sizes"]), tuple(data["heads"]), theta, data.get("activation", "relu"))


def mlp_init(
    input_dim,
    hidden,
    heads,
    seed,
    shape_head_nonneg=False,
    output_bias=None,
    output_scale=0.1,
):
    """Randomly initialise a network.

    Hidden weights are He-normal (variance ``2/fan_in``) with zero biases.
    The output layer is He-normal scaled by ``output_scale`` so the initial
    outputs sit close to their head biases, which default to zero and can be
    set per output through ``output_bias``. With ``shape_head_nonneg`` every
    ``scaled_arctan`` head gets zero incoming weights and bias
    ``SHAPE_INIT_BIAS``, so its initial output is the same positive constant
    for every input.
    """
    sizes = (int(input_dim), *(int(h) for h in hidden), len(heads))
    rng = np.random.default_rng(seed)
    params = MlpParams(sizes, tuple(heads), np.zeros(_count(sizes)))
    ws, bs = params.unflatten(params.theta)
    for k, w in enumerate(ws):
        w[...] = rng.normal(0.0, np.sqrt(2.0 / w.shape[0]), size=w.shape)
    ws[-1] *= output_scale
    if output_bias is not None:
        bs[-1][...] = np.asarray(output_bias, dtype=float)
    if shape_head_nonneg:
        for k, head in enumerate(params.heads):
            if head == "scaled_arctan":
                ws[-1][:, k] = 0.0
                bs[-1][k] = SHAPE_INIT_BIAS
    return params


def _count(sizes):
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def _apply_heads(heads, z):
    out = np.empty_like(z)
    for k, head in enumerate(heads):
        col = z[:, k]
        if head == "exponential":
            out[:, k] = np.exp(np.clip(col, -EXP_CLAMP, EXP_CLAMP))
        elif head == "scaled_arctan":
            out[:, k] = np.clip(np.arctan(col) / np.pi, -_HALF_BELOW, _HALF_BELOW)
        else:
            out[:, k] = col
    return out


def _head_jacobian(heads, z, out):
    jac = np.empty_like(z)
    for k, head in enumerate(heads):
        if head == "exponential":
            jac[:, k] = out[:, k]
        elif head == "scaled_arctan":
            jac[:, k] = 1.0 / (np.pi * (1.0 + z[:, k] ** 2))
        else:
            jac[:, k] = 1.0
    return jac


def _forward_cache(p, inputs):
    x = np.asarray(inputs, dtype=float)
    if x.ndim != 2 or x.shape[1] != p.input_dim:
        raise ShapeError(f"expected inputs with {p.input_dim} columns, got shape {x.shape}")
    ws, bs = p.unflatten(p.theta)
    acts = [x]
    pre = []
    a = x
    for w, b in zip(ws[:-1], bs[:-1]):
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0)
        acts.append(a)
    z_out = a @ ws[-1] + bs[-1]
    return _apply_heads(p.heads, z_out), (acts, pre, z_out)


def mlp_forward(p, inputs):
    """Evaluate the network on one input vector or a batch of rows."""
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        if x.size != p.input_dim:
            raise ShapeError(f"expected input of length {p.input_dim}, got {x.size}")
        return _forward_cache(p, x[None, :])[0][0]
    return _forward_cache(p, x)[0]


def mlp_backward(p, inputs, output_gradient, _cache=None):
    """Gradient of ``sum(output_gradient * outputs)`` with respect to ``theta``.

    ``output_gradient`` holds dLoss/dOutput per row (same shape as the
    outputs); contributions are summed over rows. The result is a flat
    vector with the layout of ``p.theta``.
    """
    x = np.asarray(inputs, dtype=float)
    g_out = np.asarray(output_gradient, dtype=float)
    if x.ndim == 1:
        x, g_out = x[None, :], g_out.reshape(1, -1)
    if _cache is None:
        out, cache = _forward_cache(p, x)
    else:
        out, cache = _cache
    if g_out.shape != out.shape:
        raise ShapeError(f"output gradient shape {g_out.shape} != outputs {out.shape}")
    acts, pre, z_out = cache
    ws, _ = p.unflatten(p.theta)
    grad = np.zeros_like(p.theta)
    gws, gbs = p.unflatten(grad)

    dz = g_out * _head_jacobian(p.heads, z_out, out)
    for k in range(len(ws) - 1, -1, -1):
        gws[k][...] = acts[k].T @ dz
        gbs[k][...] = dz.sum(axis=0)
        if k > 0:
            dz = (dz @ ws[k].T) * (pre[k - 1] > 0.0)
    return grad


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, theta, **kw):
        return cls(np.zeros_like(theta), np.zeros_like(theta), **kw)

    def copy(self):
        return replace(self, first_moment=self.first_moment.copy(), second_moment=self.second_moment.copy())


def adam_step(theta, grad, state, lr):
    """One bias-corrected Adam update, applied to ``theta`` in place.

    Raises :class:`NonFiniteGradientError` (leaving everything untouched)
    when the gradient contains NaN or infinity.
    """
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient")
    b1, b2 = state.beta1, state.beta2
    state.step_count += 1
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * grad
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * grad * grad
    m_hat = state.first_moment / (1.0 - b1**state.step_count)
    v_hat = state.second_moment / (1.0 - b2**state.step_count)
    theta -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return theta, state


@dataclass(frozen=True)
class TrainSchedule:
    """Optimizer schedule; ``batch_size=None`` means full-batch steps.

    Each stage trains at a fixed learning rate for at most ``max_epochs``
    epochs, ending early after ``patience`` epochs without a new best
    validation loss. Stages repeat with the rate multiplied by
    ``lr_decay_factor`` until it falls below ``min_lr``.
    """

    initial_lr: float = 1e-3
    min_lr: float = 5e-5
    lr_decay_factor: float = 0.5
    max_epochs: int = 500
    batch_size: Optional[int] = 1024
    patience: int = 5
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.min_lr <= self.initial_lr:
            raise ValueError("need 0 < min_lr <= initial_lr")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be positive")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None")


# A loss adapter maps (outputs, targets) to per-row loss values and per-row
# dLoss/dOutputs; both may contain non-finite entries.
LossAdapter = Callable[[np.ndarray, np.ndarray], tuple]


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: MlpParams
    history: list
    best_val_loss: float
    divergences: int = 0
    stages: int = 0


def _mean_loss(p, loss, x, y):
    vals, _ = loss(mlp_forward(p, x), y)
    return float(np.mean(vals))


def train(params, inputs, targets, loss, sched, max_total_epochs=None):
    """Fit ``params`` by Adam with early stopping and learning-rate decay.

    Rows are split once into training and validation sets by a seeded
    shuffle. If a batch produces a non-finite loss or gradient (or the
    validation loss is non-finite), parameters and optimizer state revert to
    the end of the last good epoch and the learning rate is decayed. Returns
    the parameters with the best validation loss seen.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two rows to train")
    rng = np.random.default_rng(sched.seed)
    perm = rng.permutation(n)
    n_val = min(max(int(round(sched.validation_fraction * n)), 1), n - 1)
    val_idx, tr_idx = np.sort(perm[:n_val]), perm[n_val:]
    x_val, y_val = x[val_idx], y[val_idx]
    batch = len(tr_idx) if sched.batch_size is None else min(sched.batch_size, len(tr_idx))

    net = params.copy()
    theta = net.theta
    best_val = _mean_loss(net, loss, x_val, y_val)
    if not (np.isfinite(best_val) and np.isfinite(_mean_loss(net, loss, x[tr_idx], y[tr_idx]))):
        raise InitializationError("loss is not finite at the initial parameters")
    best_theta = theta.copy()

    history = []
    lr = sched.initial_lr
    stage = 0
    divergences = 0
    total = 0
    while lr >= sched.min_lr:
        state = AdamState.zeros_like(theta)
        ckpt = (theta.copy(), state.copy())
        stale = 0
        for epoch in range(sched.max_epochs):
            if max_total_epochs is not None and total >= max_total_epochs:
                break
            order = tr_idx if sched.batch_size is None else tr_idx[rng.permutation(len(tr_idx))]
            ok = True
            batch_losses = []
            for start in range(0, len(order), batch):
                idx = order[start:start + batch]
                xb = x[idx]
                out, cache = _forward_cache(net, xb)
                vals, g = loss(out, y[idx])
                value = float(np.mean(vals))
                if not np.isfinite(value):
                    ok = False
                    break
                grad = mlp_backward(net, xb, g / len(idx), _cache=(out, cache))
                try:
                    adam_step(theta, grad, state, lr)
                except NonFiniteGradientError:
                    ok = False
                    break
                batch_losses.append(value)
            val = _mean_loss(net, loss, x_val, y_val) if ok else np.nan
            if not (ok and np.isfinite(val) and np.all(np.isfinite(theta))):
                theta[...] = ckpt[0]
                state = ckpt[1].copy()
                lr *= sched.lr_decay_factor
                divergences += 1
                log.debug("non-finite loss at stage %d epoch %d; lr -> %g", stage, epoch, lr)
                if lr < sched.min_lr:
                    break
                continue
            total += 1
            history.append(EpochRecord(stage, epoch, lr, float(np.mean(batch_losses)), val))
            ckpt = (theta.copy(), state.copy())
            if val < best_val:
                best_val = val
                best_theta = theta.copy()
                stale = 0
            else:
                stale += 1
                if stale >= sched.patience:
                    break
        theta[...] = best_theta
        lr *= sched.lr_decay_factor
        stage += 1
        if max_total_epochs is not None and total >= max_total_epochs:
            break
    return TrainResult(net.with_theta(best_theta.copy()), history, best_val, divergences, stage)
