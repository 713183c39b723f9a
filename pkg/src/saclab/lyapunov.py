"""Neural Lyapunov function, model-based Lie derivatives and the risk update.

``V(x, g) = |net(x - g)| + c_min`` where the goal is embedded in state space
(zeros for the dimensions it does not fix), so ``V`` is bounded below by
``c_min`` by construction and the goal always maps to the zero feature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .envs import goal_state
from .errors import ConfigError, NumericError, UsageError
from .nn import (
    AdamState,
    Grads,
    MlpSpec,
    ParamStore,
    adam_init,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    mlp_init,
)
from .policy import Policy, policy_sample
from .world_model import WorldModel, wm_predict, wm_sample


@dataclass
class NLF:
    net: ParamStore
    state_dim: int
    c_min: float = 1e-3
    k_mc: int = 4
    opt: Optional[AdamState] = None

    def __post_init__(self):
        if not self.c_min > 0:
            raise ConfigError("c_min must be positive")
        if self.k_mc < 1:
            raise ConfigError("k_mc must be >= 1")

    def astype(self, dtype) -> "NLF":
        return NLF(self.net.astype(dtype), self.state_dim, self.c_min, self.k_mc)


def nlf_init(state_dim, hidden=(64, 64), seed=0, lr=3e-4, c_min=1e-3, k_mc=4,
             activation="tanh") -> NLF:
    net = mlp_init(MlpSpec.from_hidden(state_dim, hidden, 1, activation), seed)
    return NLF(net, state_dim, c_min, k_mc, adam_init(net, lr))


def features(x, g, dtype=np.float64) -> np.ndarray:
    """Goal-relative feature ``x - goal_state(g)``; zero at the goal."""
    x = np.asarray(x)
    return (x - goal_state(g, x.shape[-1])).astype(dtype)


def v_value(nlf: NLF, x, g) -> np.ndarray:
    f = features(x, g, nlf.net.dtype)
    if not np.all(np.isfinite(f)):
        raise NumericError("non-finite state passed to the Lyapunov function")
    return np.abs(mlp_forward(nlf.net, f)[..., 0]) + nlf.c_min


def v_goal(nlf: NLF, g) -> np.ndarray:
    g = np.asarray(g)
    return v_value(nlf, goal_state(g, nlf.state_dim), g)


def lie_derivative(nlf: NLF, wm: WorldModel, x, u, g, K: int,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Model-based decrease ``E[V(x')] - V(x)`` with ``x' ~ wm(x, u)``.

    ``K >= 1`` averages K Monte-Carlo draws; ``K == 0`` uses the predicted mean.
    """
    if K < 0:
        raise UsageError("K must be >= 0")
    pred = wm_predict(wm, x, u)
    v_now = v_value(nlf, x, g)
    if K == 0:
        return v_value(nlf, pred.mean, g) - v_now
    if rng is None:
        raise UsageError("Monte-Carlo Lie derivative needs an rng")
    samples = wm_sample(pred, rng, K)
    return v_value(nlf, samples, g).mean(axis=0) - v_now


def lyapunov_point_loss(nlf: NLF, wm: WorldModel, x, u, g,
                        rng: Optional[np.random.Generator] = None,
                        K: Optional[int] = None) -> np.ndarray:
    """``max(0, Lie derivative) + V(g)**2`` per point."""
    K = nlf.k_mc if K is None else K
    lie = lie_derivative(nlf, wm, x, u, g, K, rng)
    vg = v_goal(nlf, g)
    return np.maximum(lie, 0.0) + vg * vg


def nlf_risk(nlf: NLF, next_samples, x, g) -> Tuple[float, Grads, np.ndarray]:
    """Batch Lyapunov risk for frozen next-state samples, with exact gradients.

    ``next_samples`` has shape ``(K, B, n)``. Returns the loss, the gradients
    over the NLF parameters and the per-point Lie estimates. The hinge uses a
    zero subgradient at exactly zero.
    """
    dt = nlf.net.dtype
    next_samples = np.asarray(next_samples)
    K, B, n = next_samples.shape
    gs = goal_state(np.asarray(g, dtype=np.float64), n)
    gs = np.broadcast_to(gs, (B, n))
    feats = np.concatenate(
        [
            (next_samples - gs).reshape(K * B, n),
            np.asarray(x) - gs,
            gs - gs,
        ]
    ).astype(dt)
    out, cache = mlp_forward_cached(nlf.net, feats)
    out = out[:, 0]
    v = np.abs(out) + nlf.c_min
    v_next = v[: K * B].reshape(K, B)
    v_now = v[K * B : K * B + B]
    v_g = v[K * B + B :]
    lie = v_next.mean(axis=0) - v_now
    active = (lie > 0).astype(dt)
    loss = float(np.mean(np.maximum(lie, 0.0) + v_g * v_g))
    d_v = np.concatenate(
        [
            np.broadcast_to(active / (K * B), (K, B)).reshape(-1),
            -active / B,
            2.0 * v_g / B,
        ]
    )
    upstream = (d_v * np.sign(out)).astype(dt)[:, None]
    grads, _ = mlp_backward(nlf.net, feats, upstream, cache, need_input_grad=False)
    return loss, grads, lie


def nlf_update(nlf: NLF, wm: WorldModel, policy: Policy, x, g,
               rng: np.random.Generator) -> float:
    """One Adam step on the NLF; actions are redrawn from the current policy.

    Next states come from the world model. Neither the world model nor the
    policy receives gradients.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise UsageError("nlf_update needs a nonempty (B, n) batch")
    u, _ = policy_sample(policy, x, g, rng)
    samples = wm_sample(wm_predict(wm, x, u), rng, nlf.k_mc)
    loss, grads, _ = nlf_risk(nlf, samples, x, g)
    if not np.isfinite(loss):
        raise NumericError("Lyapunov risk is not finite")
    adam_step(nlf.opt, nlf.net, grads)
    return loss
