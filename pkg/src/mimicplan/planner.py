"""Sampling-based planning over the learned latent model.

Receding-horizon MPPI: propose action sequences from a Gaussian (plus a set
rolled out by the policy prior), score each candidate by decoding rewards from
the critic along imagined latent trajectories, then refit the Gaussian to an
importance-weighted elite set. Per-step value estimates are computed once per
latent and reused, so the terminal bootstrap is the last step's estimate.

All math here is tape-free ndarray work; gradients never flow through the
planner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PlannerConfig", "PlanDistribution", "rollout_return", "mppi_update", "plan"]


@dataclass
class PlannerConfig:
    horizon: int = 3
    iterations: int = 6
    n_samples: int = 512
    n_policy: int = 24
    k_elites: int = 64
    temperature: float = 0.5
    sigma_init: float = 1.0
    sigma_min: float = 0.05
    sigma_max: float = 2.0
    beta: float = 1e-4
    gamma: float = 0.95

    def __post_init__(self):
        if self.k_elites > self.n_samples:
            raise ValueError("k_elites cannot exceed n_samples")
        if self.n_policy > self.n_samples:
            raise ValueError("n_policy cannot exceed n_samples")
        if not self.sigma_min <= self.sigma_init <= self.sigma_max:
            raise ValueError("need sigma_min <= sigma_init <= sigma_max")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class PlanDistribution:
    """Per-step action Gaussian: mu, sigma each (horizon, act_dim)."""

    mu: np.ndarray
    sigma: np.ndarray


def rollout_return(z0, actions, model, cfg, rng, reward_fn=None):
    """Soft return of each candidate action sequence, shape (N,).

    phi = sum_t gamma^t [r(z_t, a_t) - beta log pi(a_t | z_t)] + gamma^H V(z_H)
    with z_{t+1} from the latent dynamics and r decoded from the critic,
    r = Q(z_t, a_t) - gamma V(z_{t+1}). V(z_{t+1}) is a single-sample soft
    value estimate, computed once per step and reused by the terminal term.

    ``reward_fn(z, a, z_next) -> (N,)`` substitutes the decoded reward (e.g.
    a ground-truth oracle in tests); the value/sample chain still runs so the
    rng stream is identical either way.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    n = actions.shape[0]
    horizon = actions.shape[1]
    z = np.broadcast_to(z0, (n, z0.shape[-1])) if z0.ndim == 1 else z0

    phi = np.zeros(n)
    if horizon == 0:
        a_hat, logp_hat = model.sample_policy(z, rng)
        q_hat = model.q_mean(z, a_hat)[:, 0]
        return q_hat - cfg.beta * logp_hat[:, 0]

    v_next = None
    for t in range(horizon):
        a_t = actions[:, t]
        q_t = model.q_mean(z, a_t)[:, 0]
        # Density floor: candidates clipped to the action boundary would
        # otherwise score log pi ~ -1e10 through the arctanh correction and
        # the bonus -beta log pi would dominate every reward. Flooring at
        # e^-100 keeps the term negligible exactly when the candidate is
        # essentially impossible under the prior.
        logp_cand = np.maximum(model.log_prob(z, a_t)[:, 0], -100.0)
        z_next = model.latent_step(z, a_t)
        a_hat, logp_hat = model.sample_policy(z_next, rng)
        v_next = model.q_mean(z_next, a_hat)[:, 0] - cfg.beta * logp_hat[:, 0]
        if reward_fn is None:
            r = q_t - cfg.gamma * v_next
        else:
            r = np.asarray(reward_fn(z, a_t, z_next), dtype=np.float64).reshape(n)
        phi += cfg.gamma**t * (r - cfg.beta * logp_cand)
        z = z_next
    phi += cfg.gamma**horizon * v_next
    return phi


def mppi_update(elite_actions, elite_returns, prev, cfg):
    """Refit the plan Gaussian to importance-weighted elites.

    Weights are softmax(returns / temperature), shift-invariant by max
    subtraction. ``prev`` is accepted for interface stability; the update is
    a pure function of the elites (no momentum).
    """
    del prev
    phi = np.asarray(elite_returns, dtype=np.float64)
    w = np.exp((phi - phi.max()) / cfg.temperature)
    w = w / w.sum()
    mu = np.einsum("k,khm->hm", w, elite_actions)
    var = np.einsum("k,khm->hm", w, (elite_actions - mu) ** 2)
    sigma = np.clip(np.sqrt(var), cfg.sigma_min, cfg.sigma_max)
    return PlanDistribution(mu=np.clip(mu, -1.0, 1.0), sigma=sigma)


def _policy_candidates(z0, n, model, cfg, rng):
    """Roll the policy prior through the latent dynamics; actions (n, H, m)."""
    z = np.broadcast_to(z0, (n, z0.shape[-1]))
    out = np.empty((n, cfg.horizon, model.cfg.act_dim))
    for t in range(cfg.horizon):
        a, _ = model.sample_policy(z, rng)
        out[:, t] = a
        if t + 1 < cfg.horizon:
            z = model.latent_step(z, a)
    return out


def plan(s, model, cfg, prev_plan=None, rng=None, deterministic=False, reward_fn=None):
    """One receding-horizon planning step from raw state ``s``.

    Warm start: mu is the previous plan shifted one step (last row repeated),
    sigma resets to sigma_init. Each iteration scores Gaussian candidates,
    policy-prior candidates, and the best candidate found so far (re-injected
    so the best elite return cannot degrade under deterministic scoring).
    Returns (action, distribution): the action is mu[0] when deterministic,
    otherwise a clipped draw from the first-step Gaussian.
    """
    m = model.cfg.act_dim
    z0 = np.asarray(model.encode(np.asarray(s, dtype=np.float64)))

    mu = np.zeros((cfg.horizon, m))
    if prev_plan is not None:
        mu[:-1] = prev_plan.mu[1:]
        mu[-1] = prev_plan.mu[-1]
    sigma = np.full((cfg.horizon, m), float(cfg.sigma_init))
    dist = PlanDistribution(mu=mu, sigma=sigma)

    best_a = None
    best_phi = -np.inf
    for _ in range(cfg.iterations):
        n_gauss = cfg.n_samples - cfg.n_policy
        eps = rng.standard_normal((n_gauss, cfg.horizon, m))
        cands = np.clip(dist.mu + dist.sigma * eps, -1.0, 1.0)
        if cfg.n_policy > 0:
            cands = np.concatenate(
                [cands, _policy_candidates(z0, cfg.n_policy, model, cfg, rng)], axis=0
            )
        if best_a is not None:
            cands = np.concatenate([cands, best_a[None]], axis=0)
        phi = rollout_return(z0, cands, model, cfg, rng, reward_fn=reward_fn)

        top = np.argpartition(-phi, cfg.k_elites - 1)[: cfg.k_elites]
        dist = mppi_update(cands[top], phi[top], dist, cfg)
        i_best = int(np.argmax(phi))
        if phi[i_best] >= best_phi:
            best_phi = float(phi[i_best])
            best_a = cands[i_best].copy()

    if deterministic:
        action = dist.mu[0].copy()
    else:
        action = np.clip(dist.mu[0] + dist.sigma[0] * rng.standard_normal(m), -1.0, 1.0)
    return action, dist
