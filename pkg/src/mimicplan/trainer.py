"""Online imitation training loop.

Alternates planner-driven episode collection with joint world-model updates:
sample expert + behavioral segment batches, compute the combined objective,
take one adaptive-gradient step (scaled by 1/horizon), then soft-update the
target critic. Ground-truth rewards from the environment are recorded for
evaluation curves only; no loss ever reads them.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .envs import TremblingEnv, make_env
from .objectives import ObjectiveConfig, compute_losses
from .planner import PlannerConfig, plan
from .replay import Trajectory, TrajectoryBuffer, load_demos
from .worldmodel import ModelConfig, WorldModel

__all__ = [
    "TrainerConfig",
    "MetricRecord",
    "Adam",
    "heuristic_discount",
    "collect_episode",
    "update_step",
    "evaluate",
    "train",
    "build_configs",
    "load_config",
    "write_metrics_csv",
    "METRICS_HEADER",
]

METRICS_HEADER = "step,loss_total,loss_iq,loss_cons,loss_pi,loss_pen,q_gap,eval_return"


@dataclass
class TrainerConfig:
    env_id: str = "pointmass"
    total_env_steps: int = 30000
    seed_steps: int | None = None
    updates_per_step: int = 1
    batch_size: int = 256
    lr: float = 3e-4
    tau: float = 0.01
    gamma: float | None = None
    lam: float = 0.5
    horizon: int = 3
    eval_every: int = 5000
    n_eval_episodes: int = 1
    seed: int = 0
    behavioral_capacity: int = 1000
    n_demos: int = 20
    p_tremble: float = 0.0
    latent_dim: int = 64
    hidden_dim: int = 128
    n_q_heads: int = 5
    q_dropout: float = 0.01

    def __post_init__(self):
        if self.total_env_steps < 1:
            raise ValueError("total_env_steps must be positive")
        if self.updates_per_step < 0:
            raise ValueError("updates_per_step cannot be negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 <= self.p_tremble < 1.0:
            raise ValueError("p_tremble must lie in [0, 1)")


@dataclass
class MetricRecord:
    step: int
    loss_total: float = math.nan
    loss_iq: float = math.nan
    loss_cons: float = math.nan
    loss_pi: float = math.nan
    loss_pen: float = math.nan
    q_gap: float = math.nan
    eval_return: float = math.nan

    def csv_row(self):
        vals = [
            self.loss_total,
            self.loss_iq,
            self.loss_cons,
            self.loss_pi,
            self.loss_pen,
            self.q_gap,
            self.eval_return,
        ]
        return ",".join([str(self.step)] + [format(float(v), ".17g") for v in vals])


def write_metrics_csv(path, records):
    with open(path, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for r in records:
            f.write(r.csv_row() + "\n")


def heuristic_discount(episode_len):
    """Discount from episode length: gamma = 1 - 5/T, clipped to [0.95, 0.995]."""
    if episode_len < 1:
        raise ValueError("episode length must be at least 1")
    frac = episode_len / 5.0
    return float(np.clip((frac - 1.0) / frac, 0.95, 0.995))


class Adam:
    """Per-parameter adaptive first-order optimizer with bias correction."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        """Update params in place; entries with a None gradient are skipped."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def collect_episode(env, model, planner_cfg, rng, warmup=False):
    """Run one full episode and package it as a behavioral trajectory.

    Planner actions are stochastic first-step draws; during warmup actions
    are uniform on the action box instead. Ground-truth rewards ride along
    for metrics only.
    """
    spec = env.spec
    s = env.reset(rng)
    states = [np.asarray(s, dtype=np.float64)]
    actions = []
    rewards = []
    prev = None
    for t in range(spec.episode_len):
        if warmup:
            a = rng.uniform(-1.0, 1.0, size=spec.act_dim)
        else:
            a, prev = plan(s, model, planner_cfg, prev_plan=prev, rng=rng)
        res = env.step(s, a, step_index=t)
        states.append(np.asarray(res.next_state, dtype=np.float64))
        actions.append(np.asarray(a, dtype=np.float64))
        rewards.append(res.ground_truth_reward)
        s = res.next_state
    return Trajectory(
        states=np.stack(states),
        actions=np.stack(actions),
        rewards=np.asarray(rewards),
        source="behavioral",
    )


def update_step(model, expert_buf, behavioral_buf, opt, ocfg, batch_size, tau, rng):
    """One joint gradient update; returns the loss breakdown.

    Half the batch comes from expert demos, half from collected experience.
    The summed objective's gradient is scaled by 1/horizon before the
    optimizer step; targets then move by tau toward the online critic.
    """
    n_expert = batch_size // 2
    expert = expert_buf.sample_segments(n_expert, ocfg.horizon, rng)
    behavioral = behavioral_buf.sample_segments(batch_size - n_expert, ocfg.horizon, rng)
    init_states = None
    if ocfg.use_initial_state_form:
        init_states = expert_buf.initial_states(batch_size, rng)

    pmap = model.lift()
    total, parts = compute_losses(model, pmap, expert, behavioral, init_states, ocfg, rng)
    if not parts.finite():
        raise FloatingPointError("non-finite loss in update step")
    keys = list(pmap)
    grads = dc.backward(total, [pmap[k] for k in keys])
    scale = 1.0 / ocfg.horizon
    opt.step(model.params, {k: None if g is None else g * scale for k, g in zip(keys, grads)})
    model.soft_update(tau)
    return parts


def evaluate(model, env, n_episodes, rng, planner_cfg=None, deterministic=True, action_fn=None):
    """Ground-truth mean return under the planner (or a supplied controller).

    Returns (mean, per-episode array). ``action_fn(state) -> action``
    bypasses the planner, e.g. to score a scripted controller through the
    identical rollout path.
    """
    spec = env.spec
    returns = np.empty(n_episodes)
    for ep in range(n_episodes):
        s = env.reset(rng)
        prev = None
        total = 0.0
        for t in range(spec.episode_len):
            if action_fn is not None:
                a = action_fn(s)
            else:
                a, prev = plan(
                    s, model, planner_cfg, prev_plan=prev, rng=rng, deterministic=deterministic
                )
            res = env.step(s, a, step_index=t)
            total += res.ground_truth_reward
            s = res.next_state
        returns[ep] = total
    return float(returns.mean()), returns


def _route(raw, cls):
    names = {f.name for f in dataclasses.fields(cls)}
    return {k: v for k, v in raw.items() if k in names}


def build_configs(raw):
    """Resolve a flat config dict into (trainer, planner, objective) configs.

    Shared keys (gamma, beta, horizon, lam) fan out to every config that
    declares them. gamma defaults to the episode-length heuristic and
    seed_steps to two episodes when left unset. Unknown keys are rejected.
    """
    known = set()
    for cls in (TrainerConfig, PlannerConfig, ObjectiveConfig):
        known |= {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")

    raw = dict(raw)
    episode_len = make_env(raw.get("env_id", TrainerConfig.env_id)).spec.episode_len
    if raw.get("gamma") is None:
        raw["gamma"] = heuristic_discount(episode_len)
    if raw.get("seed_steps") is None:
        raw["seed_steps"] = 2 * episode_len

    tcfg = TrainerConfig(**_route(raw, TrainerConfig))
    pcfg = PlannerConfig(**_route(raw, PlannerConfig))
    ocfg = ObjectiveConfig(**_route(raw, ObjectiveConfig))
    return tcfg, pcfg, ocfg


def load_config(path):
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ValueError("config file must hold a flat JSON object")
    return build_configs(raw)


def _corrupt(traj):
    """Overwrite ground-truth rewards with a constant sentinel."""
    return Trajectory(
        states=traj.states,
        actions=traj.actions,
        rewards=np.full(traj.length, 1.0e6),
        source=traj.source,
    )


def train(tcfg, pcfg, ocfg, demos, out_dir=None, corrupt_rewards=False):
    """Full online imitation run; returns (model, metric records).

    ``demos`` is a demo-file path or a list of expert trajectories. One
    metric record is appended per collected episode (losses averaged over
    that episode's updates); deterministic evaluation runs every
    ``eval_every`` env steps on a noise-free environment instance, reseeded
    identically each time so checkpoints face the same initial states.
    When at least one such evaluation ran, the best-scoring checkpoint is
    restored before the final save, so the returned model (and model.bin)
    is the best evaluated snapshot while metrics.csv keeps the full run
    history. ``corrupt_rewards`` overwrites every stored ground-truth
    reward with a sentinel, exercising the reward-free contract.
    """
    base_env = make_env(tcfg.env_id)
    spec = base_env.spec
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    ss = np.random.SeedSequence(tcfg.seed)
    s_model, s_collect, s_update, s_eval, s_tremble = ss.spawn(5)
    env = base_env
    if tcfg.p_tremble > 0.0:
        env = TremblingEnv(base_env, tcfg.p_tremble, np.random.default_rng(s_tremble))

    gamma = tcfg.gamma if tcfg.gamma is not None else heuristic_discount(spec.episode_len)
    seed_steps = tcfg.seed_steps if tcfg.seed_steps is not None else 2 * spec.episode_len
    mcfg = ModelConfig(
        obs_dim=spec.obs_dim,
        act_dim=spec.act_dim,
        latent_dim=tcfg.latent_dim,
        hidden_dim=tcfg.hidden_dim,
        n_q_heads=tcfg.n_q_heads,
        q_dropout=tcfg.q_dropout,
        beta=ocfg.beta,
        gamma=gamma,
    )
    model = WorldModel(mcfg, np.random.default_rng(s_model))

    if isinstance(demos, (str, os.PathLike)):
        demos = load_demos(demos)
    if not demos:
        raise ValueError("no expert demonstrations provided")
    expert_buf = TrajectoryBuffer()
    for traj in demos:
        expert_buf.push_trajectory(
            _corrupt(traj) if corrupt_rewards else traj, min_length=ocfg.horizon
        )
    behavioral_buf = TrajectoryBuffer(capacity=tcfg.behavioral_capacity)

    opt = Adam(model.params, lr=tcfg.lr)
    rng_collect = np.random.default_rng(s_collect)
    rng_update = np.random.default_rng(s_update)

    records = []
    steps = 0
    next_eval = tcfg.eval_every if tcfg.eval_every > 0 else None
    best_ret = -math.inf
    best_snap = None
    while steps < tcfg.total_env_steps:
        traj = collect_episode(env, model, pcfg, rng_collect, warmup=steps < seed_steps)
        behavioral_buf.push_trajectory(
            _corrupt(traj) if corrupt_rewards else traj, min_length=ocfg.horizon
        )
        steps += traj.length

        rec = MetricRecord(step=steps)
        if steps >= seed_steps and tcfg.updates_per_step > 0:
            parts = []
            for _ in range(traj.length * tcfg.updates_per_step):
                parts.append(
                    update_step(
                        model,
                        expert_buf,
                        behavioral_buf,
                        opt,
                        ocfg,
                        tcfg.batch_size,
                        tcfg.tau,
                        rng_update,
                    )
                )
            rec.loss_total = float(np.mean([p.total for p in parts]))
            rec.loss_iq = float(np.mean([p.iq for p in parts]))
            rec.loss_cons = float(np.mean([p.consistency for p in parts]))
            rec.loss_pi = float(np.mean([p.policy for p in parts]))
            rec.loss_pen = float(np.mean([p.penalty for p in parts]))
            rec.q_gap = float(np.mean([p.q_gap for p in parts]))

        if next_eval is not None and steps >= next_eval:
            mean_ret, _ = evaluate(
                model,
                base_env,
                tcfg.n_eval_episodes,
                np.random.default_rng(s_eval),
                planner_cfg=pcfg,
            )
            rec.eval_return = mean_ret
            if np.isfinite(mean_ret) and mean_ret > best_ret:
                best_ret = mean_ret
                best_snap = (
                    {k: v.copy() for k, v in model.params.items()},
                    {k: model.target_params[k].copy() for k in model.q_keys},
                )
            while next_eval is not None and steps >= next_eval:
                next_eval += tcfg.eval_every
            if out_dir is not None:
                model.save(os.path.join(out_dir, "model.bin"))
        records.append(rec)

    if best_snap is not None:
        for k, v in best_snap[0].items():
            model.params[k][...] = v
        for k, v in best_snap[1].items():
            model.target_params[k][...] = v
    if out_dir is not None:
        model.save(os.path.join(out_dir, "model.bin"))
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), records)
    return model, records
