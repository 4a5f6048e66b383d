"""Toy continuous-control environments with scripted experts.

Two deterministic tasks with dense (but withheld from training) rewards:
a damped point mass steering to a goal, and a torque-limited pendulum
swing-up. Both use pure step functions: ``step(state, action)`` never
mutates hidden state, so rollouts are reproducible bit-exactly.

Ground-truth rewards exist for evaluation and reward-recovery analysis
only; the training losses never see them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EnvSpec",
    "StepResult",
    "PointMass2D",
    "PendulumSwingUp",
    "TremblingEnv",
    "expert_action",
    "make_env",
]


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    obs_dim: int
    act_dim: int
    episode_len: int
    dt: float


@dataclass
class StepResult:
    next_state: np.ndarray
    ground_truth_reward: float
    done: bool


def _clip_action(action, dim):
    a = np.asarray(action, dtype=np.float64).reshape(dim)
    return np.clip(a, -1.0, 1.0)


class PointMass2D:
    """Damped 2-D point mass; reach and hold the goal at (1, 1).

    State [x, y, vx, vy]. Semi-implicit Euler with velocity drag:
    v' = 0.95 v + a dt, p' = p + v' dt. Reward is the negative distance
    of the new position to the goal.
    """

    GOAL = np.array([1.0, 1.0])
    DRAG = 0.95

    spec = EnvSpec(env_id="pointmass", obs_dim=4, act_dim=2, episode_len=100, dt=0.05)

    def reset(self, rng):
        p = self.GOAL + rng.uniform(-0.3, 0.3, size=2)
        return np.concatenate([p, np.zeros(2)])

    def step(self, state, action, step_index=None):
        state = np.asarray(state, dtype=np.float64)
        a = _clip_action(action, 2)
        v = self.DRAG * state[2:] + a * self.spec.dt
        p = state[:2] + v * self.spec.dt
        reward = -float(np.linalg.norm(p - self.GOAL))
        done = step_index is not None and step_index >= self.spec.episode_len - 1
        return StepResult(np.concatenate([p, v]), reward, done)


def _wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    w = np.mod(theta, 2.0 * np.pi)
    return w - 2.0 * np.pi if w > np.pi else w


class PendulumSwingUp:
    """Torque-limited pendulum; swing up to the unstable equilibrium.

    State [cos th, sin th, thdot] with th = 0 upright. Actions in [-1, 1]
    scale to torque [-2, 2]. Dynamics thddot = (3g/2l) sin th + 3u/(m l^2)
    (uniform rod), semi-implicit Euler, thdot clamped to [-8, 8]. Reward
    penalizes the current pose: -(wrapped(th)^2 + 0.1 thdot^2 + 0.001 u^2).
    """

    G = 9.8
    MAX_TORQUE = 2.0
    MAX_SPEED = 8.0

    spec = EnvSpec(env_id="pendulum", obs_dim=3, act_dim=1, episode_len=200, dt=0.05)

    def reset(self, rng):
        theta = np.pi + rng.uniform(-0.1, 0.1)
        thdot = rng.uniform(-0.05, 0.05)
        return np.array([np.cos(theta), np.sin(theta), thdot])

    def step(self, state, action, step_index=None):
        state = np.asarray(state, dtype=np.float64)
        u = self.MAX_TORQUE * float(_clip_action(action, 1)[0])
        theta = np.arctan2(state[1], state[0])
        thdot = state[2]

        wrapped = _wrap_angle(theta)
        reward = -float(wrapped**2 + 0.1 * thdot**2 + 0.001 * u**2)

        thddot = 1.5 * self.G * np.sin(theta) + 3.0 * u
        thdot_next = np.clip(thdot + thddot * self.spec.dt, -self.MAX_SPEED, self.MAX_SPEED)
        theta_next = theta + thdot_next * self.spec.dt
        next_state = np.array([np.cos(theta_next), np.sin(theta_next), thdot_next])
        done = step_index is not None and step_index >= self.spec.episode_len - 1
        return StepResult(next_state, reward, done)


def _pointmass_expert(state):
    p, v = state[:2], state[2:]
    return np.clip(5.0 * (PointMass2D.GOAL - p) - 2.0 * v, -1.0, 1.0)


# Pendulum energy per unit moment of inertia: E = thdot^2/2 + (3g/2) cos th,
# with E* = 3g/2 at the upright rest pose.
_E_TARGET = 1.5 * PendulumSwingUp.G


def _pendulum_expert(state):
    theta = np.arctan2(state[1], state[0])
    thdot = state[2]
    wrapped = _wrap_angle(theta)
    if abs(wrapped) < 0.3:
        torque = -(6.0 * wrapped + 1.5 * thdot)
    else:
        energy = 0.5 * thdot**2 + _E_TARGET * np.cos(theta)
        direction = np.sign(thdot) if thdot != 0.0 else 1.0
        torque = (_E_TARGET - energy) * direction
    return np.clip(np.array([torque / PendulumSwingUp.MAX_TORQUE]), -1.0, 1.0)


def expert_action(env_id, state):
    """Scripted controller standing in for a trained demonstrator."""
    state = np.asarray(state, dtype=np.float64)
    if env_id == "pointmass":
        return _pointmass_expert(state)
    if env_id == "pendulum":
        return _pendulum_expert(state)
    raise ValueError(f"unknown env_id: {env_id!r}")


class TremblingEnv:
    """Wrapper that replaces the action with a uniform draw w.p. p_tremble.

    Models actuation noise for robustness experiments. Replacement events
    are counted in ``n_replaced``. The wrapper owns its noise rng so the
    inner environment stays deterministic.
    """

    def __init__(self, inner, p_tremble, rng):
        if not 0.0 <= p_tremble < 1.0:
            raise ValueError("p_tremble must lie in [0, 1)")
        self.inner = inner
        self.p_tremble = float(p_tremble)
        self.n_replaced = 0
        self._rng = rng

    @property
    def spec(self):
        return self.inner.spec

    def reset(self, rng):
        return self.inner.reset(rng)

    def step(self, state, action, step_index=None):
        if self._rng.random() < self.p_tremble:
            action = self._rng.uniform(-1.0, 1.0, size=self.spec.act_dim)
            self.n_replaced += 1
        return self.inner.step(state, action, step_index=step_index)


def make_env(env_id):
    if env_id == "pointmass":
        return PointMass2D()
    if env_id == "pendulum":
        return PendulumSwingUp()
    raise ValueError(f"unknown env_id: {env_id!r}")
