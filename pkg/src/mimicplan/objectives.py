"""Training losses for the reward-free world model.

Four parts share one latent unroll of the sampled segments:

* consistency: predicted latents match encoded true next states (targets
  stop-gradient);
* critic: inverse soft-Q matching: expert transitions should decode to high
  reward, a chi-squared term keeps decoded rewards small on the union batch,
  and an initial-state value term anchors the scale (or, as an ablation, a
  temporal-difference value term on behavioral data);
* policy: maximum-entropy improvement against the frozen critic;
* penalty (optional): unit-gradient-norm regularizer on interpolated
  latent-action points, differentiated with a second backward pass.

Gradient routing convention: branches that should carry gradient read
parameters from the ``pmap`` argument (lifted tensors); stop-gradient branches
read the model's stored ndarrays (or the target ensemble). Because of that,
finite-difference checks that perturb a *copied* pmap see exactly the
gradients the tape reports.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

__all__ = [
    "ObjectiveConfig",
    "LossBreakdown",
    "chi2_phi",
    "unroll_latents",
    "consistency_loss",
    "iq_loss",
    "policy_loss",
    "gradient_penalty",
    "total_loss",
    "compute_losses",
]


@dataclass
class ObjectiveConfig:
    alpha: float = 0.5
    beta: float = 1e-4
    gamma: float = 0.95
    lam: float = 0.5
    horizon: int = 3
    w_iq: float = 0.1
    w_cons: float = 20.0
    w_pi: float = 1.0
    w_pen: float = 1.0
    use_initial_state_form: bool = True
    use_grad_penalty: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma {self.gamma} outside (0, 1)")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lam {self.lam} outside (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if min(self.w_iq, self.w_cons, self.w_pi, self.w_pen) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    consistency: float
    iq: float
    policy: float
    penalty: float
    total: float
    q_gap: float

    def finite(self):
        vals = (self.consistency, self.iq, self.policy, self.penalty, self.total, self.q_gap)
        return all(np.isfinite(v) for v in vals)


def chi2_phi(x, alpha):
    """Concave reward regularizer phi(x) = x - x^2 / (4 alpha)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    x = np.asarray(x, dtype=np.float64)
    out = x - (x * x) / (4.0 * alpha)
    return float(out) if out.ndim == 0 else out


def unroll_latents(model, pmap, states, actions):
    """Latent rollout from encoded first states through learned dynamics.

    Returns (zs, enc_next): zs has H+1 entries carrying gradient through
    ``pmap``; enc_next has H tape-free encodings of the true next states
    (the stop-gradient targets), always from stored parameters.
    """
    horizon = actions.shape[1]
    z = model.encode(states[:, 0], pmap=pmap)
    zs = [z]
    for t in range(horizon):
        z = model.latent_step(z, actions[:, t], pmap=pmap)
        zs.append(z)
    with dc.no_grad():
        enc_next = [model.encode(states[:, t + 1]) for t in range(horizon)]
    return zs, enc_next


def _online_value(model, z, pmap, cfg, rng, train=True):
    """V(z) for the critic loss: policy parameters frozen (read from stored
    arrays), but the action stays reparameterized through ``z`` so the value
    carries the full pathwise gradient into encoder/dynamics/critic."""
    a, logp = model.sample_policy(z, rng, pmap=model.params)
    qm = model.q_mean(z, a, which="online", pmap=pmap, train=train, rng=rng)
    return dc.sub(qm, dc.mul(cfg.beta, logp))


def _scalar(x):
    return float(dc.as_array(x))


def consistency_loss(batch, model, cfg, pmap=None, _unrolled=None):
    """Sum over t of lam^t * mean squared latent prediction error."""
    zs, enc_next = _unrolled or unroll_latents(
        model, pmap if pmap is not None else model.params, batch.states, batch.actions
    )
    horizon = len(enc_next)
    loss = 0.0
    for t in range(horizon):
        diff = dc.sub(zs[t + 1], enc_next[t])
        se = dc.mean(dc.sum(dc.mul(diff, diff), axis=-1))
        loss = dc.add(loss, dc.mul(cfg.lam**t, se))
    return loss


def iq_loss(
    expert,
    behavioral,
    model,
    cfg,
    rng,
    init_states=None,
    pmap=None,
    _unrolled=None,
    _n_expert=None,
):
    """Inverse soft-Q critic objective over an expert/behavioral segment pair.

    Per unroll step t (lam^t weighted): minus the mean expert advantage
    delta = Q(z_t, a_t) - gamma * Vbar(h(s'_t)) (Vbar from the target
    ensemble, min over two sampled heads), plus a value anchor, plus the
    chi-squared term delta^2 / (4 alpha) over the union batch. The anchor is
    (1 - gamma) * V(z0) on expert episode initial states (``init_states``,
    required), or the temporal-difference form mean[V(z_t) - gamma V(h(s'_t))]
    on behavioral rows when ``use_initial_state_form`` is off.

    The critic objective is applied to each ensemble head against the shared
    target and averaged over heads.
    """
    if pmap is None:
        pmap = model.params
    if _unrolled is None:
        states = np.concatenate([expert.states, behavioral.states], axis=0)
        actions = np.concatenate([expert.actions, behavioral.actions], axis=0)
        zs, enc_next = unroll_latents(model, pmap, states, actions)
        n_expert = expert.states.shape[0]
    else:
        zs, enc_next = _unrolled
        actions = np.concatenate([expert.actions, behavioral.actions], axis=0)
        n_expert = _n_expert
    if expert.states.shape[0] == 0 or behavioral.states.shape[0] == 0:
        raise ValueError("iq loss needs non-empty expert and behavioral batches")
    horizon = len(enc_next)

    loss = 0.0
    lam_sum = 0.0
    inv4a = 1.0 / (4.0 * cfg.alpha)
    for t in range(horizon):
        lam_t = cfg.lam**t
        lam_sum += lam_t
        qk = model.q_values(zs[t], actions[:, t], which="online", pmap=pmap, train=True, rng=rng)
        vbar = model.value(enc_next[t], which="target", rng=rng)
        delta = dc.sub(qk, dc.mul(cfg.gamma, vbar))
        expert_term = dc.neg(dc.mean(dc.slice_axis(delta, 0, n_expert, axis=1)))
        chi_term = dc.mul(inv4a, dc.mean(dc.mul(delta, delta)))
        step = dc.add(expert_term, chi_term)
        if not cfg.use_initial_state_form:
            zb = dc.slice_axis(zs[t], n_expert, zs[t].shape[0], axis=0)
            v_now = _online_value(model, zb, pmap, cfg, rng)
            v_next = _online_value(model, enc_next[t][n_expert:], pmap, cfg, rng)
            step = dc.add(step, dc.mean(dc.sub(v_now, dc.mul(cfg.gamma, v_next))))
        loss = dc.add(loss, dc.mul(lam_t, step))

    if cfg.use_initial_state_form:
        if init_states is None:
            raise ValueError("initial-state form needs expert episode initial states")
        z0 = model.encode(init_states, pmap=pmap)
        v0 = _online_value(model, z0, pmap, cfg, rng)
        loss = dc.add(loss, dc.mul(lam_sum * (1.0 - cfg.gamma), dc.mean(v0)))
    return loss


def policy_loss(joint, model, cfg, rng, pmap=None, _latents=None):
    """Max-entropy improvement: sum_t lam^t E[beta log pi(a|z_t) - Q(z_t, a)].

    Latents are constants; the critic reads stored (frozen) parameters, so
    gradient reaches only the policy head: through the reparameterized
    action.
    """
    if _latents is None:
        with dc.no_grad():
            zs, _ = unroll_latents(model, model.params, joint.states, joint.actions)
        latents = [dc.as_array(z) for z in zs[:-1]]
    else:
        latents = _latents
    loss = 0.0
    for t, zt in enumerate(latents):
        a, logp = model.sample_policy(zt, rng, pmap=pmap)
        qm = model.q_mean(zt, a, which="online", train=True, rng=rng)
        step = dc.mean(dc.sub(dc.mul(cfg.beta, logp), qm))
        loss = dc.add(loss, dc.mul(cfg.lam**t, step))
    return loss


def gradient_penalty(expert, behavioral, model, rng, cfg, pmap=None, _unrolled=None):
    """Unit-gradient-norm penalty on interpolated latent-action points.

    For each step t, draw u ~ U(0,1) per sample pair and form the straight-
    line interpolation between expert and behavioral (latent, action) points;
    penalize (||grad of head-mean Q at that point|| - 1)^2, lam^t weighted.
    The gradient is taken with a recorded backward pass, so the penalty itself
    supports another backward to the critic parameters.
    """
    if pmap is None:
        pmap = model.params
    ne = expert.states.shape[0]
    nb = behavioral.states.shape[0]
    if ne != nb:
        raise ValueError(f"gradient penalty needs equal batch sizes, got {ne} and {nb}")
    if _unrolled is None:
        states = np.concatenate([expert.states, behavioral.states], axis=0)
        actions = np.concatenate([expert.actions, behavioral.actions], axis=0)
        with dc.no_grad():
            zs, _ = unroll_latents(model, model.params, states, actions)
    else:
        zs, actions = _unrolled

    loss = 0.0
    for t in range(actions.shape[1]):
        ze = dc.as_array(zs[t])[:ne]
        zb = dc.as_array(zs[t])[ne:]
        ae, ab = actions[:ne, t], actions[ne:, t]
        u = rng.random((ne, 1))
        x = np.concatenate([u * ze + (1.0 - u) * zb, u * ae + (1.0 - u) * ab], axis=-1)
        leaf = dc.Tensor(x, requires_grad=True)
        qk = dc.mlp_forward(model.specs["q"], "q", pmap, leaf)
        qsum = dc.sum(dc.mean(qk, axis=0))
        g = dc.input_gradient(qsum, leaf, create_graph=True)
        norm = dc.sqrt(dc.add(dc.sum(dc.mul(g, g), axis=-1), 1e-12))
        dev = dc.sub(norm, 1.0)
        loss = dc.add(loss, dc.mul(cfg.lam**t, dc.mean(dc.mul(dev, dev))))
    return loss


def total_loss(parts, cfg):
    """Weighted combination of the four losses (the 1/H scale is applied to
    the gradient at the optimizer step, not here)."""
    pen = parts.penalty if cfg.use_grad_penalty else 0.0
    return (
        cfg.w_cons * parts.consistency
        + cfg.w_iq * parts.iq
        + cfg.w_pi * parts.policy
        + cfg.w_pen * pen
    )


def compute_losses(model, pmap, expert, behavioral, init_states, cfg, rng):
    """All loss parts from one shared unroll; returns (total node, breakdown).

    The expert rows come first in the joint unroll; the q_gap diagnostic is
    the mean over steps of (mean expert Q) - (mean behavioral Q) from the same
    critic evaluations orientation as the losses.
    """
    ne = expert.states.shape[0]
    states = np.concatenate([expert.states, behavioral.states], axis=0)
    actions = np.concatenate([expert.actions, behavioral.actions], axis=0)
    horizon = actions.shape[1]
    if horizon != cfg.horizon:
        raise ValueError(f"segment horizon {horizon} != configured horizon {cfg.horizon}")
    zs, enc_next = unroll_latents(model, pmap, states, actions)

    cons = consistency_loss(None, model, cfg, pmap=pmap, _unrolled=(zs, enc_next))
    iq = iq_loss(
        expert,
        behavioral,
        model,
        cfg,
        rng,
        init_states=init_states,
        pmap=pmap,
        _unrolled=(zs, enc_next),
        _n_expert=ne,
    )
    latents = [dc.as_array(z) for z in zs[:-1]]
    pol = policy_loss(None, model, cfg, rng, pmap=pmap, _latents=latents)
    if cfg.use_grad_penalty:
        pen = gradient_penalty(
            expert, behavioral, model, rng, cfg, pmap=pmap, _unrolled=(zs, actions)
        )
    else:
        pen = 0.0

    total = dc.add(
        dc.add(dc.mul(cfg.w_cons, cons), dc.mul(cfg.w_iq, iq)),
        dc.add(dc.mul(cfg.w_pi, pol), dc.mul(cfg.w_pen, pen) if cfg.use_grad_penalty else 0.0),
    )

    with dc.no_grad():
        gaps = []
        for t in range(horizon):
            q_diag = model.q_mean(dc.as_array(zs[t]), actions[:, t])
            q_diag = dc.as_array(q_diag)
            gaps.append(float(q_diag[:ne].mean() - q_diag[ne:].mean()))
    breakdown = LossBreakdown(
        consistency=_scalar(cons),
        iq=_scalar(iq),
        policy=_scalar(pol),
        penalty=_scalar(pen) if cfg.use_grad_penalty else 0.0,
        total=_scalar(total),
        q_gap=float(np.mean(gaps)),
    )
    return total, breakdown
