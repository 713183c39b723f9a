"""Soft actor-critic with Lyapunov-shaped rewards.

Three objective modes share one learner: ``sac`` uses the raw reward,
``sacla`` mixes it with the clipped Lyapunov point loss, ``polyc`` adds a
bonus wherever the model-based Lie derivative is negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError, NumericError, UsageError
from .lyapunov import NLF, lie_derivative, lyapunov_point_loss
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
    polyak_update,
)
from .policy import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    Policy,
    log1m_tanh_sq,
    policy_heads,
    policy_input,
    policy_sample,
    squash,
    squashed_log_prob,
)
from .world_model import WorldModel

MODES = ("sac", "sacla", "polyc")


@dataclass(frozen=True)
class ObjectiveMode:
    kind: str = "sac"
    beta: float = 0.5
    kappa: float = 0.1
    bonus_clip: float = 10.0

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"unknown objective mode {self.kind!r}; expected one of {MODES}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.kappa > 0 or not self.bonus_clip > 0:
            raise ConfigError("kappa and bonus_clip must be positive")

    @classmethod
    def parse(cls, text: str) -> "ObjectiveMode":
        """Parse ``sac``, ``sacla:0.5``, ``polyc`` or ``polyc:0.2``."""
        kind, _, arg = text.strip().partition(":")
        try:
            if kind == "sacla" and arg:
                return cls("sacla", beta=float(arg))
            if kind == "polyc" and arg:
                return cls("polyc", kappa=float(arg))
        except ValueError:
            raise ConfigError(f"bad mode argument in {text!r}") from None
        if arg:
            raise ConfigError(f"mode {kind!r} takes no argument")
        return cls(kind)

    @property
    def label(self) -> str:
        if self.kind == "sacla":
            return f"sacla:{self.beta:g}"
        if self.kind == "polyc":
            return f"polyc:{self.kappa:g}"
        return "sac"


@dataclass
class Critics:
    q1: ParamStore
    q2: ParamStore
    q1_target: ParamStore
    q2_target: ParamStore
    opt1: Optional[AdamState] = None
    opt2: Optional[AdamState] = None


@dataclass
class Temperature:
    params: Dict[str, np.ndarray]
    target_entropy: float
    opt: Optional[AdamState] = None

    @property
    def log_alpha(self) -> float:
        return float(self.params["log_alpha"])

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)


def critics_init(in_dim, hidden=(256, 256), seed=0, lr=3e-4, activation="tanh") -> Critics:
    spec = MlpSpec.from_hidden(in_dim, hidden, 1, activation)
    ss = np.random.SeedSequence(seed).generate_state(2)
    q1 = mlp_init(spec, int(ss[0]))
    q2 = mlp_init(spec, int(ss[1]))
    return Critics(q1, q2, q1.copy(), q2.copy(), adam_init(q1, lr), adam_init(q2, lr))


def temperature_init(action_dim, init_alpha=1.0, lr=3e-4, target_entropy=None) -> Temperature:
    params = {"log_alpha": np.array(math.log(init_alpha), dtype=np.float32)}
    te = -float(action_dim) if target_entropy is None else float(target_entropy)
    return Temperature(params, te, adam_init(params, lr))


def critic_input(x, g, u, dtype) -> np.ndarray:
    return np.concatenate(
        [np.asarray(x, dtype=dtype), np.asarray(g, dtype=dtype), np.asarray(u, dtype=dtype)],
        axis=-1,
    )


def q_value(q: ParamStore, x, g, u) -> np.ndarray:
    return mlp_forward(q, critic_input(x, g, u, q.dtype))[..., 0]


def augmented_reward(mode: ObjectiveMode, r, x, u, g, nlf: Optional[NLF],
                     wm: Optional[WorldModel], rng=None) -> np.ndarray:
    """Per-transition training reward under ``mode``, using the current NLF and model."""
    r = np.asarray(r)
    if mode.kind == "sac" or (mode.kind == "sacla" and mode.beta == 0.0):
        return r.copy()
    if mode.kind == "sacla":
        bonus = lyapunov_point_loss(nlf, wm, x, u, g, rng)
        bonus = np.minimum(bonus, mode.bonus_clip).astype(r.dtype)
        return ((1.0 - mode.beta) * r + mode.beta * bonus).astype(r.dtype)
    lie = lie_derivative(nlf, wm, x, u, g, nlf.k_mc, rng)
    return (r + mode.kappa * (lie < 0)).astype(r.dtype)


def critic_targets(critics: Critics, policy: Policy, alpha: float, r_aug, x_next, g, done,
                   gamma: float, rng) -> np.ndarray:
    u_next, logp_next = policy_sample(policy, x_next, g, rng)
    q1 = q_value(critics.q1_target, x_next, g, u_next)
    q2 = q_value(critics.q2_target, x_next, g, u_next)
    soft = np.minimum(q1, q2) - alpha * logp_next
    not_done = 1.0 - np.asarray(done, dtype=soft.dtype)
    return r_aug + gamma * not_done * soft


def critic_loss_and_grads(q: ParamStore, x, g, u, y) -> Tuple[float, Grads]:
    """Mean squared error to fixed targets ``y`` and its gradient."""
    inp = critic_input(x, g, u, q.dtype)
    out, cache = mlp_forward_cached(q, inp)
    err = out[:, 0] - np.asarray(y, dtype=q.dtype)
    b = err.shape[0]
    grads, _ = mlp_backward(q, inp, (2.0 * err / b)[:, None], cache, need_input_grad=False)
    return float(np.mean(err * err)), grads


def critic_update(critics: Critics, policy: Policy, temperature: Temperature, batch: dict,
                  mode: ObjectiveMode, nlf: Optional[NLF], wm: Optional[WorldModel],
                  gamma: float, rng, shaping_rng=None) -> dict:
    """One Adam step on both critics. ``batch`` holds ``x, g, u, r, x_next, done``.

    Rewards are shaped here, with the current NLF and model.
    """
    x = batch["x"]
    if len(x) == 0:
        raise UsageError("critic_update needs a nonempty batch")
    g = batch["g"]
    r_aug = augmented_reward(mode, batch["r"], x, batch["u"], g, nlf, wm,
                             shaping_rng if shaping_rng is not None else rng)
    y = critic_targets(critics, policy, temperature.alpha, r_aug, batch["x_next"], g,
                       batch["done"], gamma, rng)
    l1, g1 = critic_loss_and_grads(critics.q1, x, g, batch["u"], y)
    l2, g2 = critic_loss_and_grads(critics.q2, x, g, batch["u"], y)
    if not (math.isfinite(l1) and math.isfinite(l2)):
        raise NumericError("critic loss is not finite")
    adam_step(critics.opt1, critics.q1, g1)
    adam_step(critics.opt2, critics.q2, g2)
    return {"q1_loss": l1, "q2_loss": l2, "critic_loss": 0.5 * (l1 + l2), "r_aug": r_aug}


def policy_loss_and_grads(policy: Policy, critics: Critics, alpha: float, x, g, z):
    """``mean(alpha * log_prob - min(Q1, Q2))`` for reparameterised noise ``z``.

    Returns ``(loss, grads, log_prob)``. Critic parameters are treated as
    constants; the gradient reaches the policy through the sampled action.
    """
    dt = policy.net.dtype
    inp = policy_input(policy, x, g)
    mean, log_std, raw, cache = policy_heads(policy, inp)
    z = np.asarray(z, dtype=dt)
    std = np.exp(log_std)
    pre = mean + std * z
    t = np.tanh(pre)
    scale = policy.action_scale
    u = squash(pre, scale)
    logp = squashed_log_prob(z, log_std, pre, scale)

    cin = critic_input(x, g, u, dt)
    q1, c1 = mlp_forward_cached(critics.q1, cin)
    q2, c2 = mlp_forward_cached(critics.q2, cin)
    q1, q2 = q1[:, 0], q2[:, 0]
    use1 = q1 <= q2
    q = np.where(use1, q1, q2)
    b = q.shape[0]
    loss = float(np.mean(alpha * logp - q))

    k = policy.action_dim
    w1 = use1.astype(dt)
    up1 = (-w1 / b)[:, None]
    up2 = (-(1 - w1) / b)[:, None]
    _, gin1 = mlp_backward(critics.q1, cin, up1, c1)
    _, gin2 = mlp_backward(critics.q2, cin, up2, c2)
    d_u = (gin1 + gin2)[:, -k:]

    # d/dpre of -log(1 - tanh^2) is 2 tanh
    d_pre = d_u * scale * (1.0 - t * t) + (alpha / b) * 2.0 * t
    d_mean = d_pre
    inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
    d_log_std = (d_pre * std * z - alpha / b) * inside
    upstream = np.concatenate([d_mean, d_log_std], axis=-1).astype(dt)
    grads, _ = mlp_backward(policy.net, inp, upstream, cache, need_input_grad=False)
    return loss, grads, logp


def policy_update(policy: Policy, critics: Critics, temperature: Temperature, batch: dict,
                  rng) -> dict:
    x = batch["x"]
    if len(x) == 0:
        raise UsageError("policy_update needs a nonempty batch")
    z = rng.standard_normal((len(x), policy.action_dim), dtype=policy.net.dtype)
    loss, grads, logp = policy_loss_and_grads(policy, critics, temperature.alpha, x, batch["g"], z)
    if not math.isfinite(loss):
        raise NumericError("policy loss is not finite")
    adam_step(policy.opt, policy.net, grads)
    return {"policy_loss": loss, "log_prob": logp}


def temperature_loss_and_grad(temperature: Temperature, log_probs) -> Tuple[float, Grads]:
    """``mean(-alpha * (log_prob + target_entropy))`` and its gradient in log alpha."""
    alpha = temperature.alpha
    gap = float(np.mean(np.asarray(log_probs, dtype=np.float64))) + temperature.target_entropy
    la = temperature.params["log_alpha"]
    return -alpha * gap, {"log_alpha": np.asarray(-alpha * gap, dtype=la.dtype)}


def temperature_update(temperature: Temperature, log_probs) -> float:
    loss, grads = temperature_loss_and_grad(temperature, log_probs)
    adam_step(temperature.opt, temperature.params, grads)
    return loss


def update_targets(critics: Critics, tau: float) -> None:
    polyak_update(critics.q1_target, critics.q1, tau)
    polyak_update(critics.q2_target, critics.q2, tau)
