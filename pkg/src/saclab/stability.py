"""Stability analysis: Lie-derivative grids, epsilon-ball checks, value surfaces.

Everything here is read-only with respect to network parameters. Grid points
are processed in fixed-size chunks, each with its own rng derived from the
evaluation seed, so results do not depend on ``SACLAB_THREADS``.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .envs import EnvParams, env_reset, env_step, goal_state
from .errors import ConfigError, NumericError, ShapeError
from .lyapunov import NLF, lie_derivative, v_goal, v_value
from .policy import Policy, policy_act, policy_log_prob, policy_sample
from .world_model import WorldModel, wm_density, wm_predict, wm_sample

CHUNK = 1024
V_GOAL_TOLERANCE = 5.0  # multiples of c_min accepted as "zero at the goal"


@dataclass(frozen=True)
class Axis:
    index: int
    lo: float
    hi: float
    count: int = 2


@dataclass(frozen=True)
class GridSpec:
    """Points ``goal_state(g) + offset``; ``axes`` give offset ranges per gridded dim.

    Non-gridded dimensions take ``fixed`` offsets (zero by default).
    ``mode`` is ``lattice`` (product of per-axis counts) or ``random``
    (``n`` uniform draws from ``seed``).
    """

    kind: str
    state_dim: int
    axes: Tuple[Axis, ...]
    mode: str = "random"
    n: int = 5000
    seed: int = 0
    fixed: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.mode not in ("lattice", "random"):
            raise ConfigError(f"grid mode must be lattice or random, got {self.mode!r}")
        if not self.axes:
            raise ConfigError("grid needs at least one axis")
        for a in self.axes:
            if not 0 <= a.index < self.state_dim:
                raise ConfigError(f"grid axis index {a.index} out of range")
            if self.mode == "lattice" and a.count < 2:
                raise ConfigError("lattice axes need count >= 2")
            if not a.hi > a.lo:
                raise ConfigError("grid axis needs hi > lo")
        if self.mode == "random" and self.n < 1:
            raise ConfigError("random grid needs n >= 1")
        if self.fixed and len(self.fixed) != self.state_dim:
            raise ConfigError("fixed offsets must cover every state dimension")

    @property
    def size(self) -> int:
        if self.mode == "random":
            return self.n
        return int(np.prod([a.count for a in self.axes]))

    def offsets(self) -> np.ndarray:
        base = np.array(self.fixed if self.fixed else [0.0] * self.state_dim)
        pts = np.tile(base, (self.size, 1))
        if self.mode == "lattice":
            mesh = np.meshgrid(*[np.linspace(a.lo, a.hi, a.count) for a in self.axes], indexing="ij")
            for a, m in zip(self.axes, mesh):
                pts[:, a.index] = m.ravel()
        else:
            rng = np.random.default_rng(self.seed)
            for a in self.axes:
                pts[:, a.index] = rng.uniform(a.lo, a.hi, size=self.n)
        return pts

    def points(self, g) -> np.ndarray:
        return goal_state(np.asarray(g, dtype=np.float64), self.state_dim) + self.offsets()


def pendulum_phase_grid(mode="random", n=5000, seed=0, theta=(-0.25, 0.25),
                        theta_dot=(-1.5, 1.5), counts=(25, 40)) -> GridSpec:
    axes = (Axis(2, theta[0], theta[1], counts[0]), Axis(3, theta_dot[0], theta_dot[1], counts[1]))
    return GridSpec("pendulum-phase", 4, axes, mode, n, seed)


def reach_cube_grid(mode="random", n=5000, seed=0, half_width=2.0, count=8) -> GridSpec:
    axes = tuple(Axis(i, -half_width, half_width, count) for i in range(3))
    return GridSpec("reach-cube", 6, axes, mode, n, seed)


def default_grid(env_id: str, mode="random", n=5000, seed=0) -> GridSpec:
    if env_id == "cartpole":
        return pendulum_phase_grid(mode, n, seed)
    if env_id == "reach":
        return reach_cube_grid(mode, n, seed)
    raise ConfigError(f"unknown env_id {env_id!r}")


def grid_from_name(name: str, env_id: str, n: int = 5000, seed: int = 0) -> GridSpec:
    """``auto`` | ``pendulum-phase`` | ``reach-cube`` | ``random:N``.

    ``auto`` is the environment's region with ``n`` random points; the two
    named grids are lattices (1000 and 512 points).
    """
    if name == "auto":
        return default_grid(env_id, "random", n, seed)
    if name.startswith("random:"):
        try:
            count = int(name.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad grid {name!r}; expected random:N") from None
        return default_grid(env_id, "random", count, seed)
    expected = {"cartpole": "pendulum-phase", "reach": "reach-cube"}.get(env_id)
    if name in ("pendulum-phase", "reach-cube"):
        if name != expected:
            raise ConfigError(f"grid {name!r} does not apply to env {env_id!r}")
        return default_grid(env_id, "lattice", n, seed)
    raise ConfigError(f"unknown grid {name!r}")


@dataclass
class StabilityReport:
    kind: str
    states: np.ndarray
    actions: np.ndarray
    lie: np.ndarray
    negative: np.ndarray
    percent_negative: float
    n: int
    goal: np.ndarray
    K: int
    seed: int

    def recount(self) -> float:
        if self.n == 0:
            return 0.0
        return 100.0 * int(np.count_nonzero(self.lie < 0)) / self.n


def percent_negative(lie) -> float:
    lie = np.asarray(lie)
    if lie.size == 0:
        return 0.0
    return 100.0 * int(np.count_nonzero(lie < 0)) / lie.size


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SACLAB_THREADS", "1")))
    except ValueError:
        return 1


def _chunked(fn, n: int):
    """Apply ``fn(lo, hi, chunk_index)`` over fixed chunks, optionally threaded."""
    spans = [(lo, min(lo + CHUNK, n), i) for i, lo in enumerate(range(0, n, CHUNK))]
    workers = _threads()
    if workers == 1 or len(spans) == 1:
        return [fn(*s) for s in spans]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda s: fn(*s), spans))


def grid_lie(nlf: NLF, wm: WorldModel, policy: Policy, states, g, K: int, seed: int):
    """Deterministic actions and Lie derivatives at ``states``."""
    states = np.asarray(states, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    n = len(states)

    def work(lo, hi, idx):
        x = states[lo:hi]
        gb = np.broadcast_to(g, (hi - lo,) + g.shape)
        u = policy_act(policy, x, gb)
        rng = np.random.default_rng([seed, idx]) if K > 0 else None
        return u, lie_derivative(nlf, wm, x, u, gb, K, rng)

    parts = _chunked(work, n)
    if not parts:
        return np.zeros((0, policy.action_dim)), np.zeros(0)
    u = np.concatenate([p[0] for p in parts]).astype(np.float64)
    lie = np.concatenate([p[1] for p in parts]).astype(np.float64)
    return u, lie


def roa_percent(nlf: NLF, wm: WorldModel, policy: Policy, grid: GridSpec, g, K: int = 16,
                seed: Optional[int] = None) -> StabilityReport:
    """Share of grid states whose model-based Lie derivative is strictly negative."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (policy.goal_dim,):
        raise ShapeError(f"goal has shape {g.shape}, policy expects ({policy.goal_dim},)")
    if grid.state_dim != wm.state_dim:
        raise ShapeError("grid dimension does not match the world model state")
    seed = grid.seed if seed is None else seed
    states = grid.points(g)
    u, lie = grid_lie(nlf, wm, policy, states, g, K, seed)
    return StabilityReport(grid.kind, states, u, lie, lie < 0, percent_negative(lie),
                           len(states), g, K, seed)


@dataclass
class EpsilonCheck:
    epsilon: float
    states: np.ndarray
    lie: np.ndarray
    condition_a_violations: np.ndarray
    condition_b_ok: bool
    v_at_goal: float
    v_goal_tolerance: float
    passed: bool
    degenerate: bool


def sample_sup_ball(center, epsilon: float, n: int, rng, exclude: float = 1e-6) -> np.ndarray:
    """Uniform draws from the open sup-norm ball, minus a tiny ball at the centre."""
    center = np.asarray(center, dtype=np.float64)
    out = np.empty((0, center.size))
    while len(out) < n:
        cand = center + rng.uniform(-epsilon, epsilon, size=(n - len(out), center.size))
        d = np.max(np.abs(cand - center), axis=1)
        out = np.concatenate([out, cand[(d >= exclude) & (d < epsilon)]])
    return out


def epsilon_stability_check(nlf: NLF, wm: WorldModel, policy: Policy, g, epsilon: float,
                            n_samples: int, seed: int, K: int = 16) -> EpsilonCheck:
    """Sampled check of decrease, positivity and near-zero value at the goal.

    A sampled verdict only: states between the samples are not examined.
    """
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    g = np.asarray(g, dtype=np.float64)
    rng = np.random.default_rng(seed)
    center = goal_state(g, wm.state_dim)
    states = sample_sup_ball(center, epsilon, n_samples, rng)
    if n_samples > 0:
        _, lie = grid_lie(nlf, wm, policy, states, g, K, seed)
        values = v_value(nlf, states, np.broadcast_to(g, (n_samples,) + g.shape))
        b_ok = bool(np.all(values > 0))
    else:
        lie = np.zeros(0)
        b_ok = True
    violations = states[~(lie < 0)]
    vg = float(v_goal(nlf, g))
    tol = V_GOAL_TOLERANCE * nlf.c_min
    passed = len(violations) == 0 and b_ok and vg <= tol
    return EpsilonCheck(epsilon, states, lie, violations, b_ok, vg, tol, passed, n_samples == 0)


@dataclass
class Trajectory:
    states: np.ndarray  # (T + 1, n)
    actions: np.ndarray  # (T, k)
    goal: np.ndarray
    init_log_density: float
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class Surface:
    """Empirical value surface: ``N`` model samples per visited time step."""

    t: np.ndarray
    v: np.ndarray
    p: np.ndarray
    trajectory_id: int
    N: int

    def __len__(self) -> int:
        return len(self.t)


def rollout(env_id: str, params: EnvParams, policy: Policy, seed, max_steps=None,
            deterministic=False) -> Trajectory:
    ss = np.random.SeedSequence(seed)
    env_rng, act_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    state = env_reset(env_id, params, env_rng)
    horizon = params.max_steps if max_steps is None else max_steps
    xs, us, rs = [state.observation], [], []
    while len(us) < horizon and not state.done:
        u, _ = policy_sample(policy, state.observation, state.goal,
                             None if deterministic else act_rng, deterministic)
        u = np.asarray(u, dtype=np.float64)
        state, r, _ = env_step(state, u, params)
        xs.append(state.observation)
        us.append(u)
        rs.append(r)
    k = policy.action_dim
    return Trajectory(np.array(xs), np.array(us).reshape(-1, k), state.goal,
                      state.init_log_density, np.array(rs))


def surface_build(env_id: str, params: EnvParams, policy: Policy, wm: WorldModel, nlf: NLF,
                  episode_seed: int, N: int = 100, max_steps=None, trajectory_id: int = 0):
    """Roll out one episode and sample the model at every step.

    Returns ``(surface, trajectory)``; the surface has ``T * N`` rows.
    """
    if N < 1:
        raise ConfigError("N must be >= 1")
    traj = rollout(env_id, params, policy, episode_seed, max_steps)
    T = traj.length
    if T == 0:
        empty = np.zeros(0)
        return Surface(empty.astype(int), empty, empty, trajectory_id, N), traj
    rng = np.random.default_rng(np.random.SeedSequence(episode_seed).spawn(3)[2])
    pred = wm_predict(wm, traj.states[:-1], traj.actions)
    samples = wm_sample(pred, rng, N)  # (N, T, n)
    g = np.broadcast_to(traj.goal, (N, T) + traj.goal.shape)
    v = v_value(nlf, samples, g).astype(np.float64)
    p, _ = wm_density(pred, samples)
    t = np.broadcast_to(np.arange(T), (N, T))
    # row order: time-major, N samples per step
    return Surface(t.T.ravel().copy(), v.T.ravel(), p.T.ravel(), trajectory_id, N), traj


def trajectory_log_probability(traj: Trajectory, wm: WorldModel, policy: Policy) -> float:
    """``log p(x0) + sum_t [log model density of x_{t+1} + log pi(u_t)]``."""
    total = float(traj.init_log_density)
    if traj.length == 0:
        return total
    x, u = traj.states[:-1], traj.actions
    g = np.broadcast_to(traj.goal, (traj.length,) + traj.goal.shape)
    logpi = policy_log_prob(policy, x, g, u)
    _, logf = wm_density(wm_predict(wm, x, u), traj.states[1:])
    return total + float(np.sum(logf) + np.sum(logpi))


# ---------------------------------------------------------------- export

PHASE_FIELDS = ("theta", "theta_dot", "L", "sign")
CUBE_FIELDS = ("x", "y", "z", "u1", "u2", "u3", "L", "sign")
SURFACE_FIELDS = ("t", "V", "P")


def _sign(v: float) -> int:
    return -1 if v < 0 else (1 if v > 0 else 0)


def plot_rows(obj) -> Tuple[Tuple[str, ...], List[tuple]]:
    if isinstance(obj, Surface):
        return SURFACE_FIELDS, [(int(t), float(v), float(p)) for t, v, p in zip(obj.t, obj.v, obj.p)]
    if isinstance(obj, StabilityReport):
        rows = []
        if obj.kind == "reach-cube" or obj.states.shape[1:] == (6,):
            for x, u, L in zip(obj.states, obj.actions, obj.lie):
                rows.append((float(x[0]), float(x[1]), float(x[2]),
                             float(u[0]), float(u[1]), float(u[2]), float(L), _sign(L)))
            return CUBE_FIELDS, rows
        for x, L in zip(obj.states, obj.lie):
            rows.append((float(x[2]), float(x[3]), float(L), _sign(L)))
        return PHASE_FIELDS, rows
    raise TypeError(f"cannot export {type(obj).__name__}")


def export_plot_data(obj, path, fmt: str = "csv") -> str:
    """Write plot-ready records. The file appears atomically or not at all."""
    if fmt not in ("csv", "json"):
        raise ConfigError(f"export format must be csv or json, got {fmt!r}")
    header, rows = plot_rows(obj)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        text = buf.getvalue()
    else:
        text = json.dumps([dict(zip(header, row)) for row in rows], indent=1) + "\n"
    atomic_write_text(path, text)
    return str(path)


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv_rows(path) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="") as fh:
        r = list(csv.reader(fh))
    return r[0], r[1:]
