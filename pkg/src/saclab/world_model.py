"""Probabilistic one-step dynamics model with a diagonal Gaussian output.

The network sees normalised ``(x, u)`` and emits, per state dimension, a
residual mean and a log standard deviation, both in units of the running
residual scale. The predicted next-state mean is ``x + residual``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import NumericError, ShapeError, UsageError
from .nn import (
    AdamState,
    Grads,
    MlpSpec,
    ParamStore,
    adam_init,
    adam_step,
    mlp_backward,
    mlp_forward_cached,
    mlp_init,
)

LOGSTD_MIN = -5.0
LOGSTD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)


class RunningNormalizer:
    """Per-dimension running mean and variance (Welford, float64)."""

    def __init__(self, dim: int, count: int = 0, mean=None, m2=None):
        self.dim = dim
        self.count = int(count)
        self.mean = np.zeros(dim) if mean is None else np.array(mean, dtype=np.float64)
        self.m2 = np.zeros(dim) if m2 is None else np.array(m2, dtype=np.float64)

    def update(self, batch) -> None:
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.dim)
        n_b = batch.shape[0]
        if n_b == 0:
            return
        b_mean = batch.mean(axis=0)
        b_m2 = ((batch - b_mean) ** 2).sum(axis=0)
        n = self.count + n_b
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + b_m2 + delta * delta * (self.count * n_b / n)
        self.count = n

    @property
    def var(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.dim)
        return self.m2 / self.count

    @property
    def std(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.dim)
        return np.maximum(np.sqrt(self.var), 1e-6)

    @property
    def rms(self) -> np.ndarray:
        """Root mean square about zero; the scale used for residual targets."""
        if self.count == 0:
            return np.ones(self.dim)
        return np.maximum(np.sqrt(self.var + self.mean**2), 1e-6)

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_state_dict(cls, d: dict) -> "RunningNormalizer":
        return cls(len(d["mean"]), d["count"], d["mean"], d["m2"])


@dataclass
class GaussianPrediction:
    mean: np.ndarray
    std: np.ndarray
    log_std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.log_std is None:
            self.log_std = np.log(self.std)


@dataclass
class WorldModel:
    net: ParamStore
    state_dim: int
    action_dim: int
    input_norm: RunningNormalizer
    residual_norm: RunningNormalizer
    opt: Optional[AdamState] = None

    def observe(self, x, u, x_next) -> None:
        """Fold transitions into the normalisation statistics."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.state_dim)
        u = np.asarray(u, dtype=np.float64).reshape(-1, self.action_dim)
        x_next = np.asarray(x_next, dtype=np.float64).reshape(-1, self.state_dim)
        self.input_norm.update(np.concatenate([x, u], axis=1))
        self.residual_norm.update(x_next - x)

    def astype(self, dtype) -> "WorldModel":
        return WorldModel(
            self.net.astype(dtype),
            self.state_dim,
            self.action_dim,
            RunningNormalizer.from_state_dict(self.input_norm.state_dict()),
            RunningNormalizer.from_state_dict(self.residual_norm.state_dict()),
        )


def wm_init(state_dim: int, action_dim: int, hidden=(256, 256), seed=0, lr=3e-4,
            activation="tanh") -> WorldModel:
    spec = MlpSpec.from_hidden(state_dim + action_dim, hidden, 2 * state_dim, activation)
    net = mlp_init(spec, seed)
    return WorldModel(
        net,
        state_dim,
        action_dim,
        RunningNormalizer(state_dim + action_dim),
        RunningNormalizer(state_dim),
        adam_init(net, lr),
    )


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite input to the world model")


def _heads(wm: WorldModel, x, u):
    dt = wm.net.dtype
    x = np.asarray(x, dtype=dt)
    u = np.asarray(u, dtype=dt)
    if x.shape[-1] != wm.state_dim or u.shape[-1] != wm.action_dim:
        raise ShapeError(
            f"world model expects x[..., {wm.state_dim}] and u[..., {wm.action_dim}], "
            f"got {x.shape} and {u.shape}"
        )
    _check_finite(x, u)
    lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    x = np.broadcast_to(x, lead + x.shape[-1:])
    inp = np.concatenate([x, np.broadcast_to(u, lead + u.shape[-1:])], axis=-1)
    inp = ((inp - wm.input_norm.mean) / wm.input_norm.std).astype(dt)
    out, cache = mlp_forward_cached(wm.net, inp)
    n = wm.state_dim
    scale = wm.residual_norm.rms.astype(dt)
    mean = x + out[..., :n] * scale
    raw_logstd = out[..., n:] + np.log(scale)
    logstd = np.clip(raw_logstd, LOGSTD_MIN, LOGSTD_MAX)
    return mean, logstd, raw_logstd, scale, inp, cache


def wm_predict(wm: WorldModel, x, u) -> GaussianPrediction:
    mean, logstd, *_ = _heads(wm, x, u)
    return GaussianPrediction(mean, np.exp(logstd), logstd)


def wm_sample(pred: GaussianPrediction, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` draws ``mean + std * z``; result has shape ``(n, *mean.shape)``."""
    if n < 1:
        raise UsageError("wm_sample needs n >= 1")
    dt = pred.mean.dtype if pred.mean.dtype in (np.float32, np.float64) else np.float64
    z = rng.standard_normal((n,) + pred.mean.shape, dtype=dt)
    return pred.mean + pred.std * z


def wm_density(pred: GaussianPrediction, x_next) -> Tuple[np.ndarray, np.ndarray]:
    """Product of per-dimension normal densities, and its log (last axis reduced)."""
    mean = np.asarray(pred.mean, dtype=np.float64)
    log_std = np.asarray(pred.log_std, dtype=np.float64)
    x_next = np.asarray(x_next, dtype=np.float64)
    if x_next.shape[-1] != mean.shape[-1]:
        raise ShapeError("x_next does not match the prediction dimension")
    zsq = (x_next - mean) ** 2 * np.exp(-2.0 * log_std)
    log_density = np.sum(-0.5 * zsq - log_std - 0.5 * LOG_2PI, axis=-1)
    return np.exp(log_density), log_density


def wm_nll(wm: WorldModel, x, u, x_next) -> Tuple[float, Grads]:
    """Batch-mean Gaussian negative log likelihood and its parameter gradients.

    The ``(n/2) log 2 pi`` constant is included so that ``exp(-nll)`` is the
    predictive density of a single transition.
    """
    x = np.atleast_2d(np.asarray(x))
    u = np.atleast_2d(np.asarray(u))
    x_next = np.atleast_2d(np.asarray(x_next, dtype=np.float64))
    if x.shape[0] == 0:
        raise UsageError("empty batch")
    mean, logstd, raw, scale, inp, cache = _heads(wm, x, u)
    # the loss value is accumulated in float64 whatever the network dtype
    logstd = logstd.astype(np.float64)
    inv_var = np.exp(-2.0 * logstd)
    err = mean.astype(np.float64) - x_next
    per = np.sum(0.5 * err * err * inv_var + logstd, axis=-1) + 0.5 * wm.state_dim * LOG_2PI
    loss = float(np.mean(per))
    if not math.isfinite(loss):
        raise NumericError("world-model NLL is not finite")
    b = x.shape[0]
    d_mean = err * inv_var * scale
    inside = (raw > LOGSTD_MIN) & (raw < LOGSTD_MAX)
    d_logstd = (1.0 - err * err * inv_var) * inside
    upstream = np.concatenate([d_mean, d_logstd], axis=-1) / b
    grads, _ = mlp_backward(wm.net, inp, upstream.astype(wm.net.dtype), cache, need_input_grad=False)
    return loss, grads


def wm_update(wm: WorldModel, x, u, x_next) -> float:
    loss, grads = wm_nll(wm, x, u, x_next)
    adam_step(wm.opt, wm.net, grads)
    return loss


def wm_rmse(wm: WorldModel, x, u, x_next) -> np.ndarray:
    """Per-dimension root mean squared error of the mean prediction."""
    pred = wm_predict(wm, x, u)
    err = np.asarray(pred.mean, dtype=np.float64) - np.asarray(x_next, dtype=np.float64)
    return np.sqrt(np.mean(err * err, axis=0))
