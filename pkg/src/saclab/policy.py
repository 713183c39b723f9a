"""Squashed-Gaussian goal-conditioned policy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericError, ShapeError
from .nn import AdamState, MlpSpec, ParamStore, adam_init, mlp_forward_cached, mlp_init

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
# keeps float32 actions strictly inside the box when tanh saturates
_SQUASH_LIMIT = 1.0 - 1e-6


@dataclass
class Policy:
    net: ParamStore
    obs_dim: int
    goal_dim: int
    action_dim: int
    action_scale: float
    opt: Optional[AdamState] = None

    def astype(self, dtype) -> "Policy":
        return Policy(self.net.astype(dtype), self.obs_dim, self.goal_dim,
                      self.action_dim, self.action_scale)


def policy_init(obs_dim, goal_dim, action_dim, action_scale, hidden=(256, 256), seed=0,
                lr=3e-4, activation="tanh") -> Policy:
    spec = MlpSpec.from_hidden(obs_dim + goal_dim, hidden, 2 * action_dim, activation)
    net = mlp_init(spec, seed)
    return Policy(net, obs_dim, goal_dim, action_dim, float(action_scale), adam_init(net, lr))


def policy_input(policy: Policy, x, g) -> np.ndarray:
    dt = policy.net.dtype
    x = np.asarray(x, dtype=dt)
    g = np.asarray(g, dtype=dt)
    if x.shape[-1] != policy.obs_dim or g.shape[-1] != policy.goal_dim:
        raise ShapeError(
            f"policy expects x[..., {policy.obs_dim}] and g[..., {policy.goal_dim}]"
        )
    lead = np.broadcast_shapes(x.shape[:-1], g.shape[:-1])
    return np.concatenate(
        [np.broadcast_to(x, lead + x.shape[-1:]), np.broadcast_to(g, lead + g.shape[-1:])],
        axis=-1,
    )


def policy_heads(policy: Policy, inp: np.ndarray):
    """Mean, clipped log-std, the unclipped log-std and the forward cache."""
    out, cache = mlp_forward_cached(policy.net, inp)
    k = policy.action_dim
    raw = out[..., k:]
    return out[..., :k], np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw, cache


def log1m_tanh_sq(pre: np.ndarray) -> np.ndarray:
    """``log(1 - tanh(pre)**2)`` without cancellation for large ``|pre|``."""
    return 2.0 * (math.log(2.0) - pre - np.logaddexp(0.0, -2.0 * pre))


def squash(pre: np.ndarray, scale: float) -> np.ndarray:
    return scale * np.clip(np.tanh(pre), -_SQUASH_LIMIT, _SQUASH_LIMIT)


def squashed_log_prob(z, log_std, pre, scale: float) -> np.ndarray:
    """Gaussian log-density of ``pre`` minus the log-Jacobian of ``scale * tanh``."""
    base = np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)
    return base - np.sum(math.log(scale) + log1m_tanh_sq(pre), axis=-1)


def policy_sample(policy: Policy, x, g, rng: Optional[np.random.Generator] = None,
                  deterministic: bool = False):
    """Draw ``u = scale * tanh(mean + std * z)``. Returns ``(u, log_prob)``.

    With ``deterministic=True`` (or no rng) the noise is zero, i.e. the action
    is ``scale * tanh(mean)``.
    """
    mean, log_std, _, _ = policy_heads(policy, policy_input(policy, x, g))
    if deterministic or rng is None:
        z = np.zeros_like(mean)
    else:
        z = rng.standard_normal(mean.shape, dtype=mean.dtype)
    pre = mean + np.exp(log_std) * z
    u = squash(pre, policy.action_scale)
    return u, squashed_log_prob(z, log_std, pre, policy.action_scale)


def policy_act(policy: Policy, x, g) -> np.ndarray:
    return policy_sample(policy, x, g, deterministic=True)[0]


def policy_log_prob(policy: Policy, x, g, u) -> np.ndarray:
    """Log-density of given actions under the policy (float64)."""
    scale = policy.action_scale
    ratio = np.asarray(u, dtype=np.float64) / scale
    if not np.all(np.abs(ratio) < 1.0):
        raise NumericError("action outside the open action box; log-density undefined")
    mean, log_std, _, _ = policy_heads(policy, policy_input(policy, x, g))
    mean = mean.astype(np.float64)
    log_std = log_std.astype(np.float64)
    pre = np.arctanh(ratio)
    z = (pre - mean) / np.exp(log_std)
    return squashed_log_prob(z, log_std, pre, scale)
