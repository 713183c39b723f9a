"""Training loop: interaction, replay, the ordered update sweep, evaluation,
checkpointing and metrics.

Every random draw comes from one of the named streams in ``STREAMS``, each
seeded from ``(trainer.seed, offset)``. Checkpoints capture the complete run
state (parameters, optimiser moments, replay contents, environment state and
stream states), so a resumed run continues bit-for-bit.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import checkpoint as ckpt
from .agent import (
    Critics,
    Temperature,
    critic_update,
    critics_init,
    policy_update,
    temperature_init,
    temperature_update,
    update_targets,
)
from .config import RunConfig, from_dict
from .envs import EnvState, env_reset, env_step
from .errors import ConfigError, FormatError, NumericError, UsageError
from .lyapunov import NLF, nlf_init, nlf_update
from .nn import AdamState, ParamStore
from .policy import Policy, policy_init, policy_sample
from .stability import StabilityReport, grid_from_name, roa_percent
from .world_model import RunningNormalizer, WorldModel, wm_init, wm_update

log = logging.getLogger(__name__)

STREAMS = {
    "init": 0,
    "env": 1,
    "policy": 2,
    "wm": 3,
    "buffer": 4,
    "update": 5,
    "shaping": 6,
}

METRICS_FIELDS = (
    "step",
    "episode_return",
    "wm_nll",
    "nlf_loss",
    "critic_loss",
    "policy_loss",
    "alpha",
    "roa_percent",
    "wall_time",
)

UPDATE_ORDER = ("nlf", "wm", "q", "policy", "alpha", "targets")


@dataclass
class Transition:
    x: np.ndarray
    g: np.ndarray
    u: np.ndarray
    r: float
    x_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Ring buffer of transitions stored as float32 columns.

    Storage grows geometrically up to ``capacity``; once full, pushes
    overwrite the oldest entry.
    """

    FIELDS = ("x", "g", "u", "r", "x_next", "done")

    def __init__(self, capacity: int, obs_dim: int, goal_dim: int, action_dim: int):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.capacity = int(capacity)
        self.dims = {"x": obs_dim, "g": goal_dim, "u": action_dim, "r": None,
                     "x_next": obs_dim, "done": None}
        self.size = 0
        self.cursor = 0
        self._alloc(min(self.capacity, 1024))

    def _alloc(self, length: int) -> None:
        old = getattr(self, "data", None)
        self.data = {}
        for k, d in self.dims.items():
            shape = (length,) if d is None else (length, d)
            arr = np.zeros(shape, dtype=np.float32)
            if old is not None:
                arr[: self.size] = old[k][: self.size]
            self.data[k] = arr

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition) -> None:
        length = len(self.data["r"])
        if self.cursor >= length and length < self.capacity:
            self._alloc(min(self.capacity, 2 * length))
        i = self.cursor
        self.data["x"][i] = t.x
        self.data["g"][i] = t.g
        self.data["u"][i] = t.u
        self.data["r"][i] = t.r
        self.data["x_next"][i] = t.x_next
        self.data["done"][i] = float(t.done)
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def get(self, i: int) -> Transition:
        d = self.data
        return Transition(d["x"][i].copy(), d["g"][i].copy(), d["u"][i].copy(),
                          float(d["r"][i]), d["x_next"][i].copy(), bool(d["done"][i]))

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.size == 0:
            raise UsageError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, rng: np.random.Generator, n: int) -> dict:
        """Uniform draw with replacement, as a dict of column arrays."""
        idx = self.sample_indices(rng, n)
        return {k: v[idx] for k, v in self.data.items()}

    def column(self, name: str) -> np.ndarray:
        return self.data[name][: self.size]

    def state_entries(self) -> Dict[str, np.ndarray]:
        return {f"buffer/{k}": self.data[k][: self.size].copy() for k in self.FIELDS}

    def load_entries(self, entries: Dict[str, np.ndarray], size: int, cursor: int) -> None:
        self.size = 0
        self._alloc(max(min(self.capacity, 1024), size))
        for k in self.FIELDS:
            self.data[k][:size] = entries[f"buffer/{k}"]
        self.size = size
        self.cursor = cursor


def buffer_push(buf: ReplayBuffer, t: Transition) -> None:
    buf.push(t)


def buffer_sample(buf: ReplayBuffer, rng: np.random.Generator, n: int) -> List[Transition]:
    return [buf.get(int(i)) for i in buf.sample_indices(rng, n)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return repr(v)


class Trainer:
    """Owns all learnable components, the buffer and the run counters."""

    def __init__(self, config: RunConfig):
        self.config = config
        c = config
        p = config.env_params
        self.env_id = c.env.id
        self.env_params = p
        self.mode = c.mode
        seed = c.trainer.seed
        self.rngs = {k: np.random.default_rng([seed, off]) for k, off in STREAMS.items()}
        init_seeds = [int(s) for s in self.rngs["init"].integers(0, 2**63 - 1, size=4)]
        act = c.agent.activation
        self.policy = policy_init(p.state_dim, p.goal_dim, p.action_dim, p.action_scale,
                                  tuple(c.agent.hidden), init_seeds[0], c.agent.lr_policy, act)
        self.critics = critics_init(p.state_dim + p.goal_dim + p.action_dim,
                                    tuple(c.agent.hidden), init_seeds[1], c.agent.lr_critic, act)
        self.temperature = temperature_init(p.action_dim, c.agent.init_alpha, c.agent.lr_alpha,
                                            c.agent.target_entropy)
        self.wm = wm_init(p.state_dim, p.action_dim, tuple(c.wm.hidden), init_seeds[2],
                          c.wm.lr, c.wm.activation)
        self.nlf = nlf_init(p.state_dim, tuple(c.nlf.hidden), init_seeds[3], c.nlf.lr,
                            c.nlf.c_min, c.nlf.k_mc, c.nlf.activation)
        self.buffer = ReplayBuffer(c.trainer.buffer_capacity, p.state_dim, p.goal_dim,
                                   p.action_dim)
        self.grid = grid_from_name(c.eval.grid, self.env_id, c.eval.n, c.eval.grid_seed)
        self.eval_goal = c.eval_goal()
        self.env_state: EnvState = env_reset(self.env_id, p, self.rngs["env"])
        self.step = 0
        self.episodes = 0
        self.episode_return = 0.0
        self.last_return: Optional[float] = None
        self.n_updates = 0
        self.last_row_step = 0
        self._acc = self._fresh_acc()
        self.call_log: Optional[List[str]] = None
        self.reward_log: Optional[list] = None
        self.last_report: Optional[StabilityReport] = None

    # ------------------------------------------------------------ helpers
    @staticmethod
    def _fresh_acc() -> Dict[str, float]:
        return {"wm_nll": 0.0, "nlf_loss": 0.0, "critic_loss": 0.0, "policy_loss": 0.0, "n": 0}

    def _record(self, name: str) -> None:
        if self.call_log is not None:
            self.call_log.append(name)

    def act(self, x, g) -> np.ndarray:
        p = self.env_params
        if self.step < self.config.trainer.warmup_steps:
            return self.rngs["policy"].uniform(-p.action_scale, p.action_scale, size=p.action_dim)
        u, _ = policy_sample(self.policy, x, g, self.rngs["policy"])
        return np.asarray(u, dtype=np.float64)

    # ------------------------------------------------------------ one sweep
    def gradient_step(self) -> dict:
        t = self.config.trainer
        batch = self.buffer.sample(self.rngs["buffer"], t.batch_size)
        x, g, u = batch["x"], batch["g"], batch["u"]
        self._record("nlf")
        nlf_loss = nlf_update(self.nlf, self.wm, self.policy, x, g, self.rngs["wm"])
        self._record("wm")
        wm_loss = wm_update(self.wm, x, u, batch["x_next"])
        self._record("q")
        c = critic_update(self.critics, self.policy, self.temperature, batch, self.mode,
                          self.nlf, self.wm, t.gamma, self.rngs["update"], self.rngs["shaping"])
        if self.reward_log is not None:
            self.reward_log.append((batch["r"].copy(), c["r_aug"].copy()))
        self._record("policy")
        pu = policy_update(self.policy, self.critics, self.temperature, batch, self.rngs["update"])
        self._record("alpha")
        temperature_update(self.temperature, pu["log_prob"])
        self._record("targets")
        update_targets(self.critics, t.tau)
        self.n_updates += 1
        out = {"wm_nll": wm_loss, "nlf_loss": nlf_loss, "critic_loss": c["critic_loss"],
               "policy_loss": pu["policy_loss"]}
        for k, v in out.items():
            if not math.isfinite(v):
                raise NumericError(f"{k} is not finite at step {self.step}")
            self._acc[k] += v
        self._acc["n"] += 1
        return out

    def env_step(self) -> None:
        s = self.env_state
        u = self.act(s.observation, s.goal)
        nxt, r, done = env_step(s, u, self.env_params)
        u = np.clip(u, -self.env_params.action_scale, self.env_params.action_scale)
        self.buffer.push(Transition(s.observation, s.goal, u, r, nxt.observation, nxt.terminated))
        self.wm.observe(s.observation, u, nxt.observation)
        self.episode_return += r
        self.step += 1
        if done:
            self.last_return = self.episode_return
            self.episodes += 1
            self.episode_return = 0.0
            self.env_state = env_reset(self.env_id, self.env_params, self.rngs["env"])
        else:
            self.env_state = nxt

    def evaluate(self) -> StabilityReport:
        self.last_report = roa_percent(self.nlf, self.wm, self.policy, self.grid, self.eval_goal,
                                       self.config.eval.K)
        return self.last_report

    def metrics_row(self, roa: Optional[float], wall: Optional[float]) -> dict:
        n = self._acc["n"]
        mean = (lambda k: self._acc[k] / n) if n else (lambda k: None)
        return {
            "step": self.step,
            "episode_return": self.last_return,
            "wm_nll": mean("wm_nll"),
            "nlf_loss": mean("nlf_loss"),
            "critic_loss": mean("critic_loss"),
            "policy_loss": mean("policy_loss"),
            "alpha": self.temperature.alpha,
            "roa_percent": roa,
            "wall_time": wall,
        }

    # ------------------------------------------------------------ persistence
    def state_entries(self) -> Dict[str, np.ndarray]:
        e: Dict[str, np.ndarray] = {}

        def put(prefix: str, store, opt: Optional[AdamState]):
            entries = store.entries if isinstance(store, ParamStore) else store
            for k, v in entries.items():
                e[f"{prefix}/{k}"] = v
            if opt is not None:
                for k in entries:
                    e[f"{prefix}/adam_m/{k}"] = opt.m[k]
                    e[f"{prefix}/adam_v/{k}"] = opt.v[k]

        put("policy", self.policy.net, self.policy.opt)
        put("q1", self.critics.q1, self.critics.opt1)
        put("q2", self.critics.q2, self.critics.opt2)
        put("q1_target", self.critics.q1_target, None)
        put("q2_target", self.critics.q2_target, None)
        put("temperature", self.temperature.params, self.temperature.opt)
        put("wm", self.wm.net, self.wm.opt)
        put("nlf", self.nlf.net, self.nlf.opt)
        e.update(self.buffer.state_entries())
        return e

    def _opts(self) -> Dict[str, AdamState]:
        return {"policy": self.policy.opt, "q1": self.critics.opt1, "q2": self.critics.opt2,
                "temperature": self.temperature.opt, "wm": self.wm.opt, "nlf": self.nlf.opt}

    def manifest(self) -> dict:
        s = self.env_state
        return {
            "format": "saclab-run",
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "adam": {k: {"step_count": o.step_count} for k, o in self._opts().items()},
            "normalizers": {"wm_input": self.wm.input_norm.state_dict(),
                            "wm_residual": self.wm.residual_norm.state_dict()},
            "rng": {k: g.bit_generator.state for k, g in self.rngs.items()},
            "env_state": {"observation": s.observation.tolist(), "goal": s.goal.tolist(),
                          "step_index": int(s.step_index), "done": bool(s.done),
                          "terminated": bool(s.terminated),
                          "init_log_density": float(s.init_log_density)},
            "counters": {"step": self.step, "episodes": self.episodes,
                         "episode_return": self.episode_return, "last_return": self.last_return,
                         "n_updates": self.n_updates, "last_row_step": self.last_row_step},
            "buffer": {"size": self.buffer.size, "cursor": self.buffer.cursor},
            "versions": {"policy": self.policy.net.version, "q1": self.critics.q1.version,
                         "q2": self.critics.q2.version, "wm": self.wm.net.version,
                         "nlf": self.nlf.net.version},
        }

    def save(self, path) -> None:
        ckpt.save(path, self.state_entries(), self.manifest())

    @classmethod
    def from_checkpoint(cls, path, config: Optional[RunConfig] = None) -> "Trainer":
        entries, man = ckpt.load(path)
        return cls.from_state(entries, man, config)

    @classmethod
    def from_state(cls, entries, man, config: Optional[RunConfig] = None) -> "Trainer":
        if man.get("format") != "saclab-run":
            raise FormatError("checkpoint manifest is not a saclab run")
        stored = from_dict(man["config"])
        if config is None:
            config = stored
        elif not _compatible(stored, config):
            raise ConfigError("checkpoint was written by an incompatible configuration")
        tr = cls(config)
        tr._load(entries, man)
        return tr

    def _load(self, entries, man) -> None:
        def take(prefix: str, store, opt: Optional[AdamState]):
            target = store.entries if isinstance(store, ParamStore) else store
            for k in target:
                arr = entries.get(f"{prefix}/{k}")
                if arr is None or arr.shape != target[k].shape:
                    raise FormatError(f"checkpoint entry {prefix}/{k} missing or misshapen")
            for k in target:
                target[k][...] = entries[f"{prefix}/{k}"]
                if opt is not None:
                    opt.m[k][...] = entries[f"{prefix}/adam_m/{k}"]
                    opt.v[k][...] = entries[f"{prefix}/adam_v/{k}"]

        try:
            take("policy", self.policy.net, self.policy.opt)
            take("q1", self.critics.q1, self.critics.opt1)
            take("q2", self.critics.q2, self.critics.opt2)
            take("q1_target", self.critics.q1_target, None)
            take("q2_target", self.critics.q2_target, None)
            take("temperature", self.temperature.params, self.temperature.opt)
            take("wm", self.wm.net, self.wm.opt)
            take("nlf", self.nlf.net, self.nlf.opt)
            for k, o in self._opts().items():
                o.step_count = int(man["adam"][k]["step_count"])
            self.wm.input_norm = RunningNormalizer.from_state_dict(man["normalizers"]["wm_input"])
            self.wm.residual_norm = RunningNormalizer.from_state_dict(
                man["normalizers"]["wm_residual"])
            for k, st in man["rng"].items():
                self.rngs[k].bit_generator.state = st
            es = man["env_state"]
            self.env_state = EnvState(self.env_id, np.array(es["observation"], dtype=np.float64),
                                      np.array(es["goal"], dtype=np.float64), es["step_index"],
                                      es["done"], es["terminated"], es["init_log_density"])
            c = man["counters"]
            self.step = c["step"]
            self.episodes = c["episodes"]
            self.episode_return = c["episode_return"]
            self.last_return = c["last_return"]
            self.n_updates = c["n_updates"]
            self.last_row_step = c["last_row_step"]
            self.buffer.load_entries(entries, man["buffer"]["size"], man["buffer"]["cursor"])
            v = man["versions"]
            self.policy.net.version = v["policy"]
            self.critics.q1.version = v["q1"]
            self.critics.q2.version = v["q2"]
            self.wm.net.version = v["wm"]
            self.nlf.net.version = v["nlf"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"checkpoint manifest incomplete: {exc}") from None


def _compatible(a: RunConfig, b: RunConfig) -> bool:
    """Same run apart from the step budget and output paths."""
    da, db = a.to_dict(), b.to_dict()
    for d in (da, db):
        d["trainer"].pop("total_steps")
        d.pop("io")
    return da == db


class MetricsWriter:
    def __init__(self, path, append: bool = False):
        self.path = os.fspath(path)
        d = os.path.dirname(os.path.abspath(self.path))
        os.makedirs(d, exist_ok=True)
        exists = append and os.path.exists(self.path)
        self.fh = open(self.path, "a" if exists else "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        if not exists:
            self.w.writerow(METRICS_FIELDS)
            self.fh.flush()

    def write(self, row: dict) -> None:
        self.w.writerow([_fmt(row[k]) for k in METRICS_FIELDS])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train_run(config: RunConfig, resume_from=None, callback: Optional[Callable] = None,
              trainer: Optional[Trainer] = None) -> Trainer:
    """Run (or continue) training until ``trainer.total_steps`` environment steps.

    Writes the metrics CSV and a checkpoint after every evaluation. On a
    numeric failure a diagnostic row is flushed before the error propagates.
    """
    t = config.trainer
    if trainer is None:
        trainer = Trainer.from_checkpoint(resume_from, config) if resume_from else Trainer(config)
    writer = MetricsWriter(config.io.metrics, append=resume_from is not None)
    start = time.perf_counter()
    wall = (lambda: time.perf_counter() - start) if t.record_wall_time else (lambda: None)
    try:
        while trainer.step < t.total_steps:
            trainer.env_step()
            if trainer.step > t.warmup_steps and trainer.step % t.update_every == 0:
                for _ in range(t.updates_per_step):
                    trainer.gradient_step()
            if trainer.step % t.eval_every == 0 or trainer.step == t.total_steps:
                report = trainer.evaluate()
                writer.write(trainer.metrics_row(report.percent_negative, wall()))
                trainer._acc = trainer._fresh_acc()
                trainer.last_row_step = trainer.step
                trainer.save(config.io.checkpoint)
                log.info("step %d roa %.2f%%", trainer.step, report.percent_negative)
                if callback is not None:
                    callback(trainer)
    except NumericError:
        row = trainer.metrics_row(None, wall())
        if row["step"] > trainer.last_row_step:
            writer.write(row)
        raise
    finally:
        writer.close()
    return trainer
