"""Closed-form control tasks with a goal-conditioned interface.

``cartpole`` balances a pole on a cart (state ``(x, x_dot, theta, theta_dot)``,
goal fixed at the origin). ``reach`` drives a damped point mass in 3-D to a
goal drawn per episode (state ``(p, v)``, goal ``g``). Dynamics are
deterministic; all randomness is in :func:`env_reset`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Union

import numpy as np

from .errors import ConfigError, UsageError

ENV_IDS = ("cartpole", "reach")


@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    gravity: float = 9.8
    dt: float = 0.02
    force_limit: float = 3.0
    angle_limit: float = 0.2
    position_limit: float = 1.0
    init_noise: float = 0.01
    max_steps: int = 1000

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"cartpole.{f.name} must be positive")
        if not self.angle_limit < math.pi / 2:
            raise ConfigError("cartpole.angle_limit must be below pi/2")

    state_dim = 4
    goal_dim = 4
    action_dim = 1

    @property
    def action_scale(self) -> float:
        return self.force_limit


@dataclass(frozen=True)
class ReachParams:
    dt: float = 0.05
    damping: float = 0.25
    action_limit: float = 1.0
    goal_box: float = 1.0
    success_radius: float = 0.05
    reward_mode: str = "dense"
    max_steps: int = 200

    def __post_init__(self):
        for f in fields(self):
            if f.name != "reward_mode" and not getattr(self, f.name) > 0:
                raise ConfigError(f"reach.{f.name} must be positive")
        if self.reward_mode not in ("dense", "sparse"):
            raise ConfigError(f"reach.reward_mode must be dense or sparse, got {self.reward_mode!r}")
        if not self.success_radius < self.goal_box:
            raise ConfigError("reach.success_radius must be smaller than goal_box")

    state_dim = 6
    goal_dim = 3
    action_dim = 3

    @property
    def action_scale(self) -> float:
        return self.action_limit


EnvParams = Union[CartPoleParams, ReachParams]


@dataclass
class EnvState:
    env_id: str
    observation: np.ndarray
    goal: np.ndarray
    step_index: int = 0
    done: bool = False
    terminated: bool = False
    init_log_density: float = 0.0


def default_params(env_id: str) -> EnvParams:
    if env_id == "cartpole":
        return CartPoleParams()
    if env_id == "reach":
        return ReachParams()
    raise ConfigError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}")


def make_params(env_id: str, **overrides) -> EnvParams:
    return replace(default_params(env_id), **overrides)


def goal_state(g: np.ndarray, state_dim: int) -> np.ndarray:
    """Embed a goal in state space; dimensions the goal does not fix are zero."""
    g = np.asarray(g, dtype=np.float64)
    pad = state_dim - g.shape[-1]
    if pad < 0:
        raise ConfigError("goal has more dimensions than the state")
    if pad == 0:
        return g
    return np.concatenate([g, np.zeros(g.shape[:-1] + (pad,))], axis=-1)


def env_reset(env_id: str, params: EnvParams, seed) -> EnvState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if env_id == "cartpole":
        if not isinstance(params, CartPoleParams):
            raise ConfigError("cartpole needs CartPoleParams")
        a = params.init_noise
        obs = rng.uniform(-a, a, size=4)
        goal = np.zeros(4)
        logp = -4.0 * math.log(2.0 * a)
    elif env_id == "reach":
        if not isinstance(params, ReachParams):
            raise ConfigError("reach needs ReachParams")
        b = params.goal_box
        obs = np.zeros(6)
        goal = rng.uniform(-b, b, size=3)
        logp = -3.0 * math.log(2.0 * b)
    else:
        raise ConfigError(f"unknown env_id {env_id!r}; expected one of {ENV_IDS}")
    return EnvState(env_id, obs, goal, 0, False, False, logp)


def cartpole_accelerations(s: np.ndarray, u: float, p: CartPoleParams):
    _, _, th, thd = s
    m_c, m_p, l, g = p.cart_mass, p.pole_mass, p.pole_half_length, p.gravity
    total = m_c + m_p
    sin, cos = math.sin(th), math.cos(th)
    thacc = (g * sin + cos * (-u - m_p * l * thd * thd * sin) / total) / (
        l * (4.0 / 3.0 - m_p * cos * cos / total)
    )
    xacc = (u + m_p * l * (thd * thd * sin - thacc * cos)) / total
    return xacc, thacc


def cartpole_integrate(s: np.ndarray, u: float, p: CartPoleParams, dt: float) -> np.ndarray:
    """One semi-implicit Euler step: velocities first, positions use new velocities."""
    x, xd, th, thd = s
    xacc, thacc = cartpole_accelerations(s, u, p)
    xd = xd + dt * xacc
    thd = thd + dt * thacc
    return np.array([x + dt * xd, xd, th + dt * thd, thd])


def cartpole_energy(s: np.ndarray, p: CartPoleParams) -> float:
    _, xd, th, thd = s
    m_c, m_p, l = p.cart_mass, p.pole_mass, p.pole_half_length
    kinetic = (
        0.5 * (m_c + m_p) * xd * xd
        + m_p * l * xd * thd * math.cos(th)
        + 0.5 * (4.0 / 3.0) * m_p * l * l * thd * thd
    )
    return kinetic + m_p * p.gravity * l * math.cos(th)


def reach_integrate(s: np.ndarray, u: np.ndarray, p: ReachParams) -> np.ndarray:
    pos, vel = s[:3], s[3:]
    vel = vel + p.dt * (u - p.damping * vel)
    return np.concatenate([pos + p.dt * vel, vel])


def _cartpole_failed(x: np.ndarray, p: CartPoleParams) -> bool:
    return bool(abs(x[2]) > p.angle_limit or abs(x[0]) > p.position_limit)


def reward(env_id: str, x, g, params: EnvParams) -> float:
    """Reward of being in state ``x`` with goal ``g``."""
    x = np.asarray(x, dtype=np.float64)
    if env_id == "cartpole":
        return 0.0 if _cartpole_failed(x, params) else 1.0
    if env_id == "reach":
        dist = float(np.linalg.norm(x[:3] - np.asarray(g, dtype=np.float64)))
        if params.reward_mode == "sparse":
            return 0.0 if dist < params.success_radius else -1.0
        return -dist
    raise ConfigError(f"unknown env_id {env_id!r}")


def clip_action(u, params: EnvParams) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64).reshape(params.action_dim)
    return np.clip(u, -params.action_scale, params.action_scale)


def env_step(state: EnvState, u, params: EnvParams):
    """Advance one step. Returns ``(next_state, reward, done)``.

    ``next_state.terminated`` distinguishes failure from running out of steps.
    """
    if state.done:
        raise UsageError("env_step called on a finished episode; call env_reset")
    u = clip_action(u, params)
    if state.env_id == "cartpole":
        x = cartpole_integrate(state.observation, float(u[0]), params, params.dt)
        terminated = _cartpole_failed(x, params)
    elif state.env_id == "reach":
        x = reach_integrate(state.observation, u, params)
        terminated = False
    else:
        raise ConfigError(f"unknown env_id {state.env_id!r}")
    r = reward(state.env_id, x, state.goal, params)
    step = state.step_index + 1
    done = terminated or step >= params.max_steps
    nxt = EnvState(state.env_id, x, state.goal, step, done, terminated, state.init_log_density)
    return nxt, r, done
