"""Run configuration: JSON sections with strict key checking and defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any, List, Optional, Sequence

import numpy as np

from .agent import ObjectiveMode
from .envs import ENV_IDS, EnvParams, default_params
from .errors import ConfigError

SECTIONS = ("env", "trainer", "agent", "wm", "nlf", "eval", "io")


@dataclass
class EnvSection:
    id: str = "cartpole"
    params: dict = field(default_factory=dict)


@dataclass
class TrainerSection:
    total_steps: int = 100_000
    warmup_steps: int = 1000
    updates_per_step: int = 1
    update_every: int = 1
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 0.005
    buffer_capacity: int = 1_000_000
    eval_every: int = 10_000
    seed: int = 0
    record_wall_time: bool = False


@dataclass
class AgentSection:
    mode: str = "sacla"
    beta: float = 0.5
    kappa: float = 0.1
    bonus_clip: float = 10.0
    hidden: List[int] = field(default_factory=lambda: [256, 256])
    activation: str = "tanh"
    lr_critic: float = 3e-4
    lr_policy: float = 3e-4
    lr_alpha: float = 3e-4
    init_alpha: float = 1.0
    target_entropy: Optional[float] = None


@dataclass
class WmSection:
    hidden: List[int] = field(default_factory=lambda: [256, 256])
    activation: str = "tanh"
    lr: float = 3e-4


@dataclass
class NlfSection:
    hidden: List[int] = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    lr: float = 3e-4
    c_min: float = 1e-3
    k_mc: int = 4


@dataclass
class EvalSection:
    grid: str = "auto"
    n: int = 5000
    K: int = 16
    grid_seed: int = 12345
    goal: Optional[List[float]] = None
    epsilon: float = 0.05
    N: int = 100


@dataclass
class IoSection:
    metrics: str = "metrics.csv"
    checkpoint: str = "checkpoint.sacl"


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    agent: AgentSection = field(default_factory=AgentSection)
    wm: WmSection = field(default_factory=WmSection)
    nlf: NlfSection = field(default_factory=NlfSection)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IoSection = field(default_factory=IoSection)

    def __post_init__(self):
        self.validate()

    # -- derived views
    @property
    def env_params(self) -> EnvParams:
        base = default_params(self.env.id)
        names = {f.name for f in fields(base)}
        for k in self.env.params:
            if k not in names:
                raise ConfigError(f"env.params.{k}: unknown parameter for {self.env.id}")
        try:
            return dataclasses.replace(base, **self.env.params)
        except TypeError as exc:
            raise ConfigError(f"env.params: {exc}") from None

    @property
    def mode(self) -> ObjectiveMode:
        a = self.agent
        return ObjectiveMode(a.mode, a.beta, a.kappa, a.bonus_clip)

    def eval_goal(self) -> np.ndarray:
        p = self.env_params
        if self.eval.goal is None:
            return np.zeros(p.goal_dim)
        g = np.asarray(self.eval.goal, dtype=np.float64)
        if g.shape != (p.goal_dim,):
            raise ConfigError(f"eval.goal must have {p.goal_dim} entries")
        return g

    def validate(self) -> None:
        if self.env.id not in ENV_IDS:
            raise ConfigError(f"env.id: unknown environment {self.env.id!r}; expected one of {ENV_IDS}")
        self.env_params
        self.mode
        t = self.trainer
        positive = {
            "trainer.total_steps": t.total_steps,
            "trainer.batch_size": t.batch_size,
            "trainer.updates_per_step": t.updates_per_step,
            "trainer.update_every": t.update_every,
            "trainer.buffer_capacity": t.buffer_capacity,
            "trainer.eval_every": t.eval_every,
            "agent.lr_critic": self.agent.lr_critic,
            "agent.lr_policy": self.agent.lr_policy,
            "agent.lr_alpha": self.agent.lr_alpha,
            "agent.init_alpha": self.agent.init_alpha,
            "wm.lr": self.wm.lr,
            "nlf.lr": self.nlf.lr,
            "nlf.c_min": self.nlf.c_min,
            "nlf.k_mc": self.nlf.k_mc,
            "eval.n": self.eval.n,
            "eval.epsilon": self.eval.epsilon,
            "eval.N": self.eval.N,
        }
        for name, v in positive.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"{name}: must be a positive number, got {v!r}")
        if t.warmup_steps < 0:
            raise ConfigError("trainer.warmup_steps: must be >= 0")
        if not 0.0 <= t.gamma <= 1.0:
            raise ConfigError("trainer.gamma: must lie in [0, 1]")
        if not 0.0 <= t.tau <= 1.0:
            raise ConfigError("trainer.tau: must lie in [0, 1]")
        if self.eval.K < 0:
            raise ConfigError("eval.K: must be >= 0")
        for sec in ("agent", "wm", "nlf"):
            hidden = getattr(self, sec).hidden
            if not isinstance(hidden, list) or not all(isinstance(h, int) and h >= 1 for h in hidden):
                raise ConfigError(f"{sec}.hidden: must be a list of positive integers")
        self.eval_goal()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def replace(self, **section_updates) -> "RunConfig":
        d = self.to_dict()
        for key, value in section_updates.items():
            apply_override(d, key, value)
        return from_dict(d)


_SECTION_TYPES = {
    "env": EnvSection,
    "trainer": TrainerSection,
    "agent": AgentSection,
    "wm": WmSection,
    "nlf": NlfSection,
    "eval": EvalSection,
    "io": IoSection,
}


def _coerce(path: str, value: Any, ftype: str) -> Any:
    """Check ``value`` against a field annotation (annotations are strings here)."""
    if ftype.startswith("Optional["):
        if value is None:
            return None
        ftype = ftype[len("Optional[") : -1]
    if ftype == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if ftype == "int":
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ftype == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if ftype == "dict":
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        return value
    if ftype.startswith("List["):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        inner = ftype[len("List[") : -1]
        return [_coerce(f"{path}[{i}]", v, inner) for i, v in enumerate(value)]
    raise AssertionError(f"unhandled annotation {ftype}")


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a JSON object")
    kwargs = {}
    for sec, body in d.items():
        if sec not in _SECTION_TYPES:
            raise ConfigError(f"{sec}: unknown config section; expected one of {SECTIONS}")
        cls = _SECTION_TYPES[sec]
        if not isinstance(body, dict):
            raise ConfigError(f"{sec}: section must be an object")
        types = {f.name: f.type for f in fields(cls)}
        vals = {}
        for k, v in body.items():
            if k not in types:
                raise ConfigError(f"{sec}.{k}: unknown key")
            vals[k] = _coerce(f"{sec}.{k}", v, types[k])
        kwargs[sec] = cls(**vals)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return from_dict(d)


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(d: dict, key: str, value: Any) -> None:
    """Set ``section.key`` (or ``env.params.name``) in a config dict.

    A bare ``env=<id>`` selects the environment.
    """
    parts = key.split(".")
    if parts == ["env"]:
        parts = ["env", "id"]
    if len(parts) < 2 or parts[0] not in _SECTION_TYPES:
        raise ConfigError(f"{key}: overrides must look like section.key=value")
    node = d.setdefault(parts[0], {})
    for p in parts[1:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: cannot descend into a non-object")
    node[parts[-1]] = value


def with_overrides(cfg: RunConfig, overrides: Sequence[str]) -> RunConfig:
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be KEY=VALUE")
        k, v = item.split("=", 1)
        apply_override(d, k.strip(), parse_value(v.strip()))
    return from_dict(d)
