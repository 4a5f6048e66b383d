"""Trajectory buffers and horizon-segment sampling.

Two stores with different lifetimes: the expert buffer holds demonstrations
and never evicts; the behavioral buffer holds agent-collected episodes with
FIFO eviction. Ground-truth rewards ride along on trajectories strictly for
evaluation and reward-recovery analysis: segment batches exposed to the
losses carry no reward field at all.

Demo files are JSON lines: a header object {"obs_dim", "act_dim", "env_id",
"format_version": 1} followed by one object per trajectory with "states",
"actions", and optional "rewards" arrays.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Trajectory",
    "SegmentBatch",
    "TrajectoryBuffer",
    "sample_segments",
    "sample_initial_states",
    "save_demos",
    "load_demos",
]


@dataclass
class Trajectory:
    """One episode: T+1 states, T actions, optional T rewards (eval-only)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray | None = None
    source: str = "behavioral"

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("states and actions must be 2-D arrays")
        if self.states.shape[0] != self.actions.shape[0] + 1:
            raise ValueError(
                f"need T+1 states for T actions, got {self.states.shape[0]} and "
                f"{self.actions.shape[0]}"
            )
        if self.rewards is not None:
            self.rewards = np.asarray(self.rewards, dtype=np.float64)
            if self.rewards.shape != (self.actions.shape[0],):
                raise ValueError("rewards must align with actions")
        if self.source not in ("expert", "behavioral"):
            raise ValueError(f"unknown source tag {self.source!r}")

    @property
    def length(self):
        return self.actions.shape[0]


@dataclass
class SegmentBatch:
    """A batch of length-H trajectory slices.

    states: (B, H+1, obs_dim); actions: (B, H, act_dim); is_expert: (B,).
    next_states is a view of states shifted by one: alignment with the
    source trajectory holds by construction.
    """

    states: np.ndarray
    actions: np.ndarray
    is_expert: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.states.shape[1] != self.actions.shape[1] + 1:
            raise ValueError("segment needs H+1 states for H actions")
        if self.is_expert is None:
            self.is_expert = np.zeros(self.states.shape[0], dtype=bool)

    @property
    def next_states(self):
        return self.states[:, 1:]

    @property
    def horizon(self):
        return self.actions.shape[1]


class TrajectoryBuffer:
    """Append-only trajectory store; FIFO eviction when capacity is set."""

    def __init__(self, capacity=None):
        self.trajectories = deque(maxlen=capacity)

    def __len__(self):
        return len(self.trajectories)

    def push_trajectory(self, traj, min_length=1):
        if traj.length < min_length:
            raise ValueError(f"trajectory length {traj.length} < required {min_length}")
        self.trajectories.append(traj)

    def sample_segments(self, batch, horizon, rng):
        """Uniform over (trajectory, start index) pairs; segments never cross
        episode boundaries."""
        if not self.trajectories:
            raise ValueError("cannot sample from an empty buffer")
        trajs = list(self.trajectories)
        counts = np.array([t.length - horizon + 1 for t in trajs])
        if np.any(counts < 1):
            raise ValueError(f"buffer holds a trajectory shorter than horizon {horizon}")
        cum = np.cumsum(counts)
        flat = rng.integers(0, cum[-1], size=batch)
        which = np.searchsorted(cum, flat, side="right")
        starts = flat - (cum[which] - counts[which])
        obs_dim = trajs[0].states.shape[1]
        act_dim = trajs[0].actions.shape[1]
        states = np.empty((batch, horizon + 1, obs_dim))
        actions = np.empty((batch, horizon, act_dim))
        for i, (w, s) in enumerate(zip(which, starts)):
            states[i] = trajs[w].states[s : s + horizon + 1]
            actions[i] = trajs[w].actions[s : s + horizon]
        is_expert = np.array([trajs[w].source == "expert" for w in which])
        return SegmentBatch(states=states, actions=actions, is_expert=is_expert)

    def initial_states(self, batch, rng):
        """Uniform over stored trajectories' first states."""
        if not self.trajectories:
            raise ValueError("cannot sample from an empty buffer")
        trajs = list(self.trajectories)
        idx = rng.integers(0, len(trajs), size=batch)
        return np.stack([trajs[i].states[0] for i in idx])


def sample_segments(expert_buf, behavioral_buf, selector, batch, horizon, rng):
    """Draw a segment batch from one buffer or a 50/50 joint mix.

    Joint batches put expert rows first; odd sizes round the expert half down.
    """
    if selector == "expert":
        b = expert_buf.sample_segments(batch, horizon, rng)
        b.is_expert[:] = True
        return b
    if selector == "behavioral":
        return behavioral_buf.sample_segments(batch, horizon, rng)
    if selector == "joint":
        n_expert = batch // 2
        e = expert_buf.sample_segments(n_expert, horizon, rng)
        p = behavioral_buf.sample_segments(batch - n_expert, horizon, rng)
        return SegmentBatch(
            states=np.concatenate([e.states, p.states], axis=0),
            actions=np.concatenate([e.actions, p.actions], axis=0),
            is_expert=np.concatenate([np.ones(n_expert, dtype=bool), np.zeros(batch - n_expert, dtype=bool)]),
        )
    raise ValueError(f"unknown selector {selector!r}")


def sample_initial_states(expert_buf, batch, rng):
    return expert_buf.initial_states(batch, rng)


# -- demo file IO -----------------------------------------------------------


def save_demos(path, trajectories, env_id):
    if not trajectories:
        raise ValueError("refusing to write an empty demo file")
    obs_dim = trajectories[0].states.shape[1]
    act_dim = trajectories[0].actions.shape[1]
    with open(path, "w") as f:
        header = {"obs_dim": obs_dim, "act_dim": act_dim, "env_id": env_id, "format_version": 1}
        f.write(json.dumps(header) + "\n")
        for traj in trajectories:
            row = {"states": traj.states.tolist(), "actions": traj.actions.tolist()}
            if traj.rewards is not None:
                row["rewards"] = traj.rewards.tolist()
            f.write(json.dumps(row) + "\n")


def load_demos(path, source="expert"):
    """Read a demo file; returns the list of trajectories."""
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"demo file {path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ValueError(f"demo file {path}: malformed header: {e}") from e
    for key in ("obs_dim", "act_dim", "env_id", "format_version"):
        if key not in header:
            raise ValueError(f"demo file {path}: header missing {key!r}")
    if header["format_version"] != 1:
        raise ValueError(f"demo file {path}: unsupported format_version {header['format_version']}")
    trajectories = []
    for n, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"demo file {path}: line {n} malformed: {e}") from e
        traj = Trajectory(
            states=row["states"],
            actions=row["actions"],
            rewards=row.get("rewards"),
            source=source,
        )
        if traj.states.shape[1] != header["obs_dim"] or traj.actions.shape[1] != header["act_dim"]:
            raise ValueError(f"demo file {path}: line {n} dims disagree with header")
        trajectories.append(traj)
    if not trajectories:
        raise ValueError(f"demo file {path} has a header but no trajectories")
    return trajectories
