"""Acceptance suite. Each test carries ``acceptance(n)``; a summary line per
criterion is printed at the end of the session.

Criteria 4 and 5 train 3 seeds x 2 objectives for 100k steps each, so this
module takes well over an hour on one CPU core.
"""

import math
import time

import numpy as np
import pytest

from conftest import FD_H, FD_TOL, central_diff, linear_cartpole_policy, rel_error
from saclab.agent import (Critics, ObjectiveMode, critic_loss_and_grads, critics_init,
                          policy_loss_and_grads, temperature_init, temperature_loss_and_grad)
from saclab.config import from_dict
from saclab.envs import CartPoleParams, env_reset, env_step
from saclab.lyapunov import lie_derivative, nlf_init, nlf_risk, v_goal, v_value
from saclab.policy import policy_init, policy_sample
from saclab.stability import (percent_negative, roa_percent, rollout, surface_build,
                              trajectory_log_probability)
from saclab.trainer import Trainer, read_metrics, train_run
from saclab.world_model import wm_density, wm_init, wm_nll, wm_predict, wm_rmse

SEEDS = (0, 1, 2)
STEPS = 100_000


def run_config(env_id, mode, beta, seed, out_dir, steps=STEPS, **trainer):
    """Configuration shared by the long ordering runs (64-wide networks, batch 128)."""
    tag = f"{env_id}_{mode}{beta}_s{seed}"
    return from_dict({
        "env": {"id": env_id},
        "trainer": {"total_steps": steps, "warmup_steps": 1000, "batch_size": 128,
                    "eval_every": 10_000, "seed": seed, **trainer},
        "agent": {"mode": mode, "beta": beta, "hidden": [64, 64]},
        "wm": {"hidden": [64, 64]},
        "eval": {"grid": "auto", "n": 5000, "K": 16},
        "io": {"metrics": str(out_dir / f"{tag}.csv"), "checkpoint": str(out_dir / f"{tag}.sacl")},
    })


def _train_matrix(env_id, out_dir):
    runs = {}
    for mode, beta in (("sac", 0.5), ("sacla", 0.5)):
        for seed in SEEDS:
            runs[(mode, seed)] = train_run(run_config(env_id, mode, beta, seed, out_dir))
    return runs


@pytest.fixture(scope="session")
def cartpole_runs(tmp_path_factory):
    return _train_matrix("cartpole", tmp_path_factory.mktemp("cartpole"))


@pytest.fixture(scope="session")
def reach_runs(tmp_path_factory):
    return _train_matrix("reach", tmp_path_factory.mktemp("reach"))


def _final_roa(runs, mode):
    return [runs[(mode, s)].last_report.percent_negative for s in SEEDS]


# ---------------------------------------------------------------- criterion 1

def _fd_instances():
    """Yield ``(name, analytic, numeric)`` for 10 random instances of each update."""
    obs, goal, act = 6, 3, 3
    for seed in range(10):
        rng = np.random.default_rng(seed)
        # Lyapunov risk with frozen next-state samples
        nlf = nlf_init(4, (8, 8), seed)
        nlf.net = nlf.net.astype(np.float64)
        nlf.net.entries["b2"][:] = 0.3
        x = rng.normal(size=(6, 4))
        samples = x + 0.5 * rng.normal(size=(3, 6, 4))
        _, ga, _ = nlf_risk(nlf, samples, x, np.zeros(4))
        yield "nlf", ga, central_diff(lambda: nlf_risk(nlf, samples, x, np.zeros(4))[0],
                                      nlf.net.entries, FD_H)
        # world-model NLL
        wm = wm_init(4, 1, (8,), seed)
        wm.net = wm.net.astype(np.float64)
        wm.observe(x, rng.normal(size=(6, 1)), x + 0.1 * rng.normal(size=(6, 4)))
        u, xn = rng.normal(size=(6, 1)), x + 0.2 * rng.normal(size=(6, 4))
        _, ga = wm_nll(wm, x, u, xn)
        yield "wm", ga, central_diff(lambda: wm_nll(wm, x, u, xn)[0], wm.net.entries, FD_H)
        # critic, policy and temperature
        c = critics_init(obs + goal + act, (8, 8), seed)
        c = Critics(*(s.astype(np.float64) for s in (c.q1, c.q2, c.q1_target, c.q2_target)))
        bx, bg = rng.normal(size=(4, obs)), rng.uniform(-1, 1, (4, goal))
        bu, y = rng.uniform(-0.9, 0.9, (4, act)), rng.normal(size=4)
        _, ga = critic_loss_and_grads(c.q1, bx, bg, bu, y)
        yield "critic", ga, central_diff(lambda: critic_loss_and_grads(c.q1, bx, bg, bu, y)[0],
                                         c.q1.entries, FD_H)
        pol = policy_init(obs, goal, act, 1.5, (8, 8), seed)
        pol.net = pol.net.astype(np.float64)
        z = rng.normal(size=(4, act))
        _, ga, _ = policy_loss_and_grads(pol, c, 0.3, bx, bg, z)
        yield "policy", ga, central_diff(
            lambda: policy_loss_and_grads(pol, c, 0.3, bx, bg, z)[0], pol.net.entries, FD_H)
        t = temperature_init(act, float(rng.uniform(0.05, 2.0)))
        t.params["log_alpha"] = t.params["log_alpha"].astype(np.float64)
        logp = rng.normal(size=32)
        _, ga = temperature_loss_and_grad(t, logp)
        yield "temperature", ga, central_diff(lambda: temperature_loss_and_grad(t, logp)[0],
                                              t.params, FD_H)


@pytest.mark.acceptance(1)
def test_gradient_fidelity(record_property):
    start = time.perf_counter()
    worst, counts = {}, {}
    for name, analytic, numeric in _fd_instances():
        worst[name] = max(worst.get(name, 0.0), rel_error(analytic, numeric))
        counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - start
    record_property("detail", "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
                    + f"; {elapsed:.1f}s")
    assert all(n >= 10 for n in counts.values()) and len(counts) == 5
    assert all(v < FD_TOL for v in worst.values())
    assert elapsed < 60


# ---------------------------------------------------------------- criterion 2

class _PatternGrid:
    """Minimal grid stand-in that returns prescribed points."""

    kind = "pendulum-phase"
    state_dim = 4
    seed = 0

    def __init__(self, pts):
        self.pts = pts

    def points(self, g):
        return self.pts


@pytest.mark.acceptance(2)
def test_metric_oracle(record_property):
    start = time.perf_counter()
    # V = |tanh(tanh(theta_dot))| + c and a +delta residual on theta_dot: with the mean
    # model, L < 0 exactly when theta_dot < -delta / 2.
    nlf = nlf_init(4, (2, 2), 0)
    for v in nlf.net.entries.values():
        v[...] = 0.0
    e = nlf.net.entries
    e["W0"][3, 0], e["W1"][0, 0], e["W2"][0, 0] = 1.0, 1.0, 1.0
    wm = wm_init(4, 1, (2,), 0)
    for v in wm.net.entries.values():
        v[...] = 0.0
    wm.net.entries["b1"][3] = 0.01
    pol = policy_init(4, 4, 1, 3.0, (2,), 0)
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 30))
        signs = rng.random(n) < rng.random()
        pts = np.zeros((n, 4))
        pts[:, 3] = np.where(signs, -1.0, 1.0) * rng.uniform(0.05, 1.5, n)
        rep = roa_percent(nlf, wm, pol, _PatternGrid(pts), np.zeros(4), K=0)
        recount = 0
        for flag in signs:
            recount += 1 if flag else 0
        if rep.percent_negative != 100.0 * recount / n or rep.percent_negative != rep.recount():
            mismatches += 1
    # density and NLL agree on random Gaussians
    worst = 0.0
    for i in range(1000):
        wmi = wm_init(3, 2, (8,), i)
        xi = rng.normal(size=(1, 3))
        ui = rng.normal(size=(1, 2))
        wmi.observe(rng.normal(size=(20, 3)), rng.normal(size=(20, 2)), rng.normal(size=(20, 3)))
        xn = xi + rng.normal(scale=0.5, size=(1, 3))
        nll, _ = wm_nll(wmi, xi, ui, xn)
        dens, _ = wm_density(wm_predict(wmi, xi, ui), xn)
        worst = max(worst, abs(math.exp(-nll) - float(dens[0])) / float(dens[0]))
    elapsed = time.perf_counter() - start
    record_property("detail", f"recount mismatches {mismatches}/10000; "
                              f"max density/NLL rel err {worst:.1e}; {elapsed:.1f}s")
    assert mismatches == 0
    assert worst < 1e-6
    assert elapsed < 60


# ---------------------------------------------------------------- criterion 3

@pytest.mark.acceptance(3)
def test_beta_zero_reduction(tmp_path, record_property):
    start = time.perf_counter()
    logs, files = {}, {}
    for mode in ("sac", "sacla"):
        cfg = run_config("cartpole", mode, 0.0, 0, tmp_path, steps=5000, eval_every=1000)
        tr = Trainer(cfg)
        tr.reward_log = []
        train_run(cfg, trainer=tr)
        logs[mode] = tr.reward_log
        files[mode] = open(cfg.io.metrics, "rb").read()
    same_rewards = len(logs["sac"]) == len(logs["sacla"]) > 0 and all(
        a1.tobytes() == a2.tobytes() for (_, a1), (_, a2) in zip(logs["sac"], logs["sacla"]))
    elapsed = time.perf_counter() - start
    record_property("detail", f"{len(logs['sac'])} update batches, rewards identical="
                              f"{same_rewards}, metrics identical={files['sac'] == files['sacla']};"
                              f" {elapsed:.0f}s")
    assert same_rewards
    assert files["sac"] == files["sacla"]
    assert elapsed < 300


# ---------------------------------------------------------------- criteria 4 and 5

@pytest.mark.acceptance(4)
def test_cartpole_ordering(cartpole_runs, record_property):
    sac, sacla = _final_roa(cartpole_runs, "sac"), _final_roa(cartpole_runs, "sacla")
    record_property("detail", f"SACLA(0.5) {np.mean(sacla):.2f}% {sacla} vs SAC "
                              f"{np.mean(sac):.2f}% {sac}; need a margin of 5 points")
    assert np.mean(sacla) >= np.mean(sac) + 5.0


@pytest.mark.acceptance(5)
def test_reach_ordering(reach_runs, record_property):
    sac, sacla = _final_roa(reach_runs, "sac"), _final_roa(reach_runs, "sacla")
    record_property("detail", f"SACLA(0.5) {np.mean(sacla):.2f}% {sacla} vs SAC "
                              f"{np.mean(sac):.2f}% {sac}")
    assert np.mean(sacla) >= np.mean(sac)


# ---------------------------------------------------------------- criterion 6

def _held_out(trainer, n=2000, seed=999):
    p = trainer.env_params
    rng = np.random.default_rng(seed)
    xs, us, xns = [], [], []
    s = env_reset(trainer.env_id, p, rng)
    while len(xs) < n:
        u, _ = policy_sample(trainer.policy, s.observation, s.goal, rng)
        u = np.clip(np.asarray(u, dtype=np.float64), -p.action_scale, p.action_scale)
        nxt, _, done = env_step(s, u, p)
        xs.append(s.observation)
        us.append(u)
        xns.append(nxt.observation)
        s = env_reset(trainer.env_id, p, rng) if done else nxt
    return np.array(xs), np.array(us), np.array(xns)


@pytest.mark.acceptance(6)
def test_world_model_adequacy(cartpole_runs, record_property):
    worst = 0.0
    for key, tr in cartpole_runs.items():
        x, u, xn = _held_out(tr)
        rmse = wm_rmse(tr.wm, x, u, xn)
        spread = tr.buffer.column("x").astype(np.float64).std(axis=0)
        worst = max(worst, float(np.max(rmse / spread)))
    record_property("detail", f"worst RMSE / buffer std over 6 runs and 4 dims = {worst:.4f}")
    assert worst < 0.10


# ---------------------------------------------------------------- criterion 7

@pytest.mark.acceptance(7)
def test_lyapunov_structure(cartpole_runs, record_property):
    rng = np.random.default_rng(7)
    states = rng.normal(scale=2.0, size=(100_000, 4))
    min_v, worst_goal = np.inf, 0.0
    for tr in cartpole_runs.values():
        min_v = min(min_v, float(v_value(tr.nlf, states, np.zeros(4)).min()) / tr.nlf.c_min)
        worst_goal = max(worst_goal, float(v_goal(tr.nlf, np.zeros(4))) / tr.nlf.c_min)
    flat = nlf_init(4, (16,), 0)
    for v in flat.net.entries.values():
        v[...] = 0.0
    tr = cartpole_runs[("sacla", SEEDS[0])]
    x = rng.normal(size=(1000, 4))
    u = rng.uniform(-3, 3, size=(1000, 1))
    lie_mc = lie_derivative(flat, tr.wm, x, u, np.zeros(4), 16, rng)
    lie_mean = lie_derivative(flat, tr.wm, x, u, np.zeros(4), 0)
    zero = bool(np.all(lie_mc == 0.0) and np.all(lie_mean == 0.0))
    record_property("detail", f"min V / c_min = {min_v:.3f}; max V(g) / c_min = "
                              f"{worst_goal:.3f}; constant V gives zero Lie derivative: {zero}")
    assert min_v >= 1.0
    assert worst_goal <= 5.0
    assert zero


# ---------------------------------------------------------------- criterion 8

@pytest.mark.acceptance(8)
def test_determinism_and_persistence(tmp_path, record_property):
    def cfg(name, steps):
        return from_dict({
            "trainer": {"total_steps": steps, "warmup_steps": 500, "batch_size": 64,
                        "eval_every": 1000, "seed": 4},
            "agent": {"hidden": [32, 32]}, "wm": {"hidden": [32, 32]}, "eval": {"n": 1000},
            "io": {"metrics": str(tmp_path / f"{name}.csv"),
                   "checkpoint": str(tmp_path / f"{name}.sacl")}})

    train_run(cfg("a", 3000))
    train_run(cfg("b", 3000))
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    train_run(cfg("c", 2000))
    train_run(cfg("c", 3000), resume_from=tmp_path / "c.sacl")
    resumed = (tmp_path / "c.csv").read_bytes() == (tmp_path / "a.csv").read_bytes()
    Trainer.from_checkpoint(tmp_path / "a.sacl").save(tmp_path / "a2.sacl")
    roundtrip = (tmp_path / "a.sacl").read_bytes() == (tmp_path / "a2.sacl").read_bytes()
    record_property("detail", f"repeat identical={same}, resume identical={resumed}, "
                              f"checkpoint round trip identical={roundtrip}")
    assert same and resumed and roundtrip
    assert len(read_metrics(tmp_path / "a.csv")) == 3


# ---------------------------------------------------------------- criterion 9

def _gauss_pdf(x, m, s):
    return math.exp(-0.5 * ((x - m) / s) ** 2) / (s * math.sqrt(2 * math.pi))


@pytest.mark.acceptance(9)
def test_surface_contract(record_property):
    p = CartPoleParams()
    pol = linear_cartpole_policy(log_std=-1.0)
    wm = wm_init(4, 1, (16,), 0)
    rng = np.random.default_rng(0)
    x = rng.normal(scale=0.05, size=(200, 4))
    wm.observe(x, rng.uniform(-3, 3, (200, 1)), x + 0.01 * rng.normal(size=(200, 4)))
    nlf = nlf_init(4, (16,), 0)
    surf, traj = surface_build("cartpole", p, pol, wm, nlf, episode_seed=0, N=100, max_steps=200)
    rows_ok = len(surf) == traj.length * 100 and traj.length > 0
    nonneg = bool(np.all(surf.p >= 0))

    pol64, wm64 = pol.astype(np.float64), wm.astype(np.float64)
    toy = rollout("cartpole", p, pol64, seed=5, max_steps=3)
    got = trajectory_log_probability(toy, wm64, pol64)
    from saclab.policy import policy_heads, policy_input
    prod = math.exp(toy.init_log_density)
    for t in range(3):
        pred = wm_predict(wm64, toy.states[t], toy.actions[t])
        for i in range(4):
            prod *= _gauss_pdf(toy.states[t + 1, i], float(pred.mean[i]), float(pred.std[i]))
        mean, log_std, _, _ = policy_heads(pol64, policy_input(pol64, toy.states[t], toy.goal))
        pre = math.atanh(float(toy.actions[t, 0]) / 3.0)
        prod *= (_gauss_pdf(pre, float(mean[0]), math.exp(float(log_std[0])))
                 / (3.0 * (1 - math.tanh(pre) ** 2)))
    err = abs(got - math.log(prod))
    record_property("detail", f"T={traj.length}, rows={len(surf)} (T*100: {rows_ok}), "
                              f"densities nonnegative={nonneg}, 3-step log-prob error {err:.1e}")
    assert rows_ok and nonneg
    assert err < 1e-9
