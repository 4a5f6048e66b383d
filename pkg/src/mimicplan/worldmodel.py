"""Learned components: encoder, latent dynamics, Q ensemble, policy prior.

One parameter store (flat name-to-array dict, declaration order fixed) serves
two execution modes: methods called with plain ndarrays run tape-free and
return ndarrays (planning, evaluation, targets); methods called with a lifted
parameter mapping of ``Tensor`` leaves build the autodiff graph (training).

The critic doubles as a reward decoder through the inverse Bellman relation
r(z, a) = Q(z, a) - gamma * V(z'), where V(z) = E_{a~pi}[Q(z, a) -
beta * log pi(a|z)] is estimated by sampling the policy prior.

Snapshot format (flat binary, little-endian):
    magic            8 bytes, b"MPWM0001"
    dims header      7 int64: obs_dim, act_dim, latent_dim, hidden_dim,
                     n_q_heads, simnorm_group, n_arrays
    scalar header    6 float64: q_dropout, log_std_min, log_std_max,
                     beta, gamma, init_scale
    arrays           for each parameter in declaration order (encoder,
                     dynamics, policy, q ensemble, then target q ensemble):
                     int64 ndim, int64 shape..., float64 data
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import LayerSpec

__all__ = ["ModelConfig", "WorldModel"]

_MAGIC = b"MPWM0001"
_LN2 = math.log(2.0)
_LN_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    obs_dim: int
    act_dim: int
    latent_dim: int = 64
    hidden_dim: int = 128
    n_q_heads: int = 5
    simnorm_group: int = 8
    q_dropout: float = 0.01
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    beta: float = 1e-4
    gamma: float = 0.95
    init_scale: float = 0.02

    def __post_init__(self):
        if min(self.obs_dim, self.act_dim, self.latent_dim, self.hidden_dim) < 1:
            raise ValueError("all dims must be positive")
        if self.latent_dim % self.simnorm_group != 0:
            raise ValueError(
                f"simnorm group {self.simnorm_group} does not divide latent dim {self.latent_dim}"
            )
        if self.n_q_heads < 2:
            raise ValueError("need at least 2 critic heads for min-target sampling")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma {self.gamma} outside (0, 1)")


def _specs(cfg):
    ln = lambda d: LayerSpec("layernorm", d, d)
    mish = lambda d: LayerSpec("mish", d, d)
    enc = [
        LayerSpec("linear", cfg.obs_dim, cfg.hidden_dim),
        ln(cfg.hidden_dim),
        mish(cfg.hidden_dim),
        LayerSpec("linear", cfg.hidden_dim, cfg.latent_dim),
        ln(cfg.latent_dim),
        LayerSpec("simnorm", cfg.latent_dim, cfg.latent_dim, cfg.simnorm_group),
    ]
    dyn = [
        LayerSpec("linear", cfg.latent_dim + cfg.act_dim, cfg.hidden_dim),
        ln(cfg.hidden_dim),
        mish(cfg.hidden_dim),
        LayerSpec("linear", cfg.hidden_dim, cfg.hidden_dim),
        ln(cfg.hidden_dim),
        mish(cfg.hidden_dim),
        LayerSpec("linear", cfg.hidden_dim, cfg.latent_dim),
        ln(cfg.latent_dim),
        LayerSpec("simnorm", cfg.latent_dim, cfg.latent_dim, cfg.simnorm_group),
    ]
    pi = [
        LayerSpec("linear", cfg.latent_dim, cfg.hidden_dim),
        ln(cfg.hidden_dim),
        mish(cfg.hidden_dim),
        LayerSpec("linear", cfg.hidden_dim, cfg.hidden_dim),
        ln(cfg.hidden_dim),
        mish(cfg.hidden_dim),
        LayerSpec("linear", cfg.hidden_dim, 2 * cfg.act_dim),
    ]
    q = [
        LayerSpec("linear", cfg.latent_dim + cfg.act_dim, cfg.hidden_dim),
        ln(cfg.hidden_dim),
        mish(cfg.hidden_dim),
        LayerSpec("dropout", cfg.hidden_dim, cfg.hidden_dim, cfg.q_dropout),
        LayerSpec("linear", cfg.hidden_dim, cfg.hidden_dim),
        ln(cfg.hidden_dim),
        mish(cfg.hidden_dim),
        LayerSpec("linear", cfg.hidden_dim, 1),
    ]
    return {"enc": enc, "dyn": dyn, "pi": pi, "q": q}


class WorldModel:
    """Parameter store plus forward passes for all learned components.

    ``pmap`` arguments accept a substitute parameter mapping (e.g. lifted
    tensors during training); None means the stored online ndarrays. Target
    critic heads always run in eval mode on stored target arrays.
    """

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.specs = _specs(cfg)
        params = {}
        params.update(dc.init_params(self.specs["enc"], "enc", rng, scale=cfg.init_scale))
        params.update(dc.init_params(self.specs["dyn"], "dyn", rng, scale=cfg.init_scale))
        params.update(dc.init_params(self.specs["pi"], "pi", rng, scale=cfg.init_scale))
        params.update(
            dc.init_params(self.specs["q"], "q", rng, ensemble=cfg.n_q_heads, scale=cfg.init_scale)
        )
        # Zero the final critic layer so all heads start at Q = 0.
        last = len(self.specs["q"]) - 1
        params[f"q.{last}.w"][...] = 0.0
        params[f"q.{last}.b"][...] = 0.0
        self.params = params
        self.q_keys = tuple(k for k in params if k.startswith("q."))
        self.target_params = {k: params[k].copy() for k in self.q_keys}

    # -- forward passes -----------------------------------------------------

    def encode(self, s, pmap=None):
        pmap = self.params if pmap is None else pmap
        s, one = _promote(s)
        z = dc.mlp_forward(self.specs["enc"], "enc", pmap, s)
        return _demote(z, one)

    def latent_step(self, z, a, pmap=None):
        pmap = self.params if pmap is None else pmap
        z, one = _promote(z)
        a, _ = _promote(a)
        x = dc.concat([z, a], axis=-1)
        nxt = dc.mlp_forward(self.specs["dyn"], "dyn", pmap, x)
        return _demote(nxt, one)

    def q_values(self, z, a, which="online", pmap=None, train=False, rng=None):
        """All critic head outputs, shape (K, B, 1); (K,) for single inputs."""
        z, one = _promote(z)
        a, _ = _promote(a)
        x = dc.concat([z, a], axis=-1)
        if which == "target":
            out = dc.mlp_forward(self.specs["q"], "q", self.target_params, dc.as_array(x))
        elif which == "online":
            pmap = self.params if pmap is None else pmap
            out = dc.mlp_forward(self.specs["q"], "q", pmap, x, train=train, rng=rng)
        else:
            raise ValueError(f"unknown ensemble {which!r}")
        if one:
            return dc.reshape(out, (self.cfg.n_q_heads,))
        return out

    def q_mean(self, z, a, which="online", pmap=None, train=False, rng=None):
        q = self.q_values(z, a, which=which, pmap=pmap, train=train, rng=rng)
        if _ndim(q) == 1:
            return dc.mean(q)
        return dc.mean(q, axis=0)

    def policy_head(self, z, pmap=None):
        """Gaussian head: (mean, clamped log-std), each (B, act_dim)."""
        pmap = self.params if pmap is None else pmap
        z, one = _promote(z)
        out = dc.mlp_forward(self.specs["pi"], "pi", pmap, z)
        m = self.cfg.act_dim
        mean = dc.slice_axis(out, 0, m, axis=-1)
        log_std = dc.clip(
            dc.slice_axis(out, m, 2 * m, axis=-1), self.cfg.log_std_min, self.cfg.log_std_max
        )
        return _demote(mean, one), _demote(log_std, one)

    def sample_policy(self, z, rng, pmap=None):
        """Reparameterized tanh-Gaussian draw: (action, log_prob).

        action = tanh(mean + std * eps); log_prob carries the squash
        correction log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)).
        """
        z, one = _promote(z)
        mean, log_std = self.policy_head(z, pmap=pmap)
        m = self.cfg.act_dim
        eps = rng.standard_normal((_shape0(z), m))
        u = dc.add(mean, dc.mul(dc.exp(log_std), eps))
        action = dc.tanh(u)
        # Gaussian term: (u - mean)/std == eps exactly, so only log_std is live.
        const = -0.5 * (eps * eps).sum(axis=-1, keepdims=True) - 0.5 * m * _LN_2PI
        ls_sum = dc.sum(log_std, axis=-1, keepdims=True)
        corr = dc.sum(
            dc.mul(2.0, dc.sub(dc.sub(_LN2, u), dc.softplus(dc.mul(-2.0, u)))),
            axis=-1,
            keepdims=True,
        )
        log_prob = dc.sub(dc.add(const, dc.neg(ls_sum)), corr)
        if one:
            return _demote(action, True), _demote(log_prob, True)
        return action, log_prob

    def log_prob(self, z, a, pmap=None):
        """Density of given squashed actions under the prior. ndarray path only."""
        z = dc.as_array(z)
        a = dc.as_array(a)
        z, one = _promote(z)
        a, _ = _promote(a)
        mean, log_std = self.policy_head(z, pmap=pmap)
        mean, log_std = dc.as_array(mean), dc.as_array(log_std)
        u = np.arctanh(np.clip(a, -1.0 + 1e-6, 1.0 - 1e-6))
        eps = (u - mean) * np.exp(-log_std)
        gauss = (-0.5 * eps * eps - log_std - 0.5 * _LN_2PI).sum(axis=-1, keepdims=True)
        corr = (2.0 * (_LN2 - u - np.logaddexp(0.0, -2.0 * u))).sum(axis=-1, keepdims=True)
        out = gauss - corr
        return _demote(out, one)

    def value(self, z, which="online", rng=None, pmap=None, n_samples=1, train=False):
        """Soft state value V(z) = E_{a~pi}[Q(z,a) - beta log pi(a|z)].

        Single-sample estimate by default. Online: mean over all heads, may
        carry gradient. Target: min over two rng-chosen target heads, always
        tape-free.
        """
        if rng is None:
            raise ValueError("value() draws policy samples and needs an rng")
        beta = self.cfg.beta
        if which == "target":
            z = dc.as_array(z)
        z, one = _promote(z)
        total = None
        for _ in range(n_samples):
            if which == "target":
                with dc.no_grad():
                    a, logp = self.sample_policy(z, rng)
                    heads = rng.choice(self.cfg.n_q_heads, size=2, replace=False)
                    sliced = {k: self.target_params[k][heads] for k in self.q_keys}
                    q2 = dc.mlp_forward(
                        self.specs["q"], "q", sliced, np.concatenate([z, dc.as_array(a)], axis=-1)
                    )
                    v = np.min(q2, axis=0) - beta * dc.as_array(logp)
            elif which == "online":
                a, logp = self.sample_policy(z, rng, pmap=pmap)
                qm = self.q_mean(z, a, which="online", pmap=pmap, train=train, rng=rng)
                v = dc.sub(qm, dc.mul(beta, logp))
            else:
                raise ValueError(f"unknown ensemble {which!r}")
            total = v if total is None else dc.add(total, v)
        out = dc.mul(total, 1.0 / n_samples) if n_samples > 1 else total
        return _demote(out, one)

    def decode_reward(self, z, a, z_next, rng=None, n_value_samples=1, gamma=None):
        """Inverse Bellman read-out: r = Q(z, a) - gamma * V(z_next)."""
        gamma = self.cfg.gamma if gamma is None else gamma
        z, one = _promote(z)
        a, _ = _promote(a)
        zn, _ = _promote(z_next)
        qm = self.q_mean(z, a, which="online")
        v = self.value(zn, which="online", rng=rng, n_samples=n_value_samples)
        r = dc.sub(qm, dc.mul(gamma, v))
        return _demote(r, one)

    # -- parameter management ----------------------------------------------

    def lift(self):
        """Online parameters as gradient-carrying leaves, same keys."""
        return {k: dc.Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def soft_update(self, tau):
        if not 0.0 < tau <= 1.0:
            raise ValueError(f"tau {tau} outside (0, 1]")
        for k in self.q_keys:
            t = self.target_params[k]
            t *= 1.0 - tau
            t += tau * self.params[k]

    # -- snapshots ----------------------------------------------------------

    def save(self, path):
        cfg = self.cfg
        arrays = [self.params[k] for k in self.params] + [
            self.target_params[k] for k in self.q_keys
        ]
        with open(path, "wb") as f:
            f.write(_MAGIC)
            np.array(
                [
                    cfg.obs_dim,
                    cfg.act_dim,
                    cfg.latent_dim,
                    cfg.hidden_dim,
                    cfg.n_q_heads,
                    cfg.simnorm_group,
                    len(arrays),
                ],
                dtype="<i8",
            ).tofile(f)
            np.array(
                [
                    cfg.q_dropout,
                    cfg.log_std_min,
                    cfg.log_std_max,
                    cfg.beta,
                    cfg.gamma,
                    cfg.init_scale,
                ],
                dtype="<f8",
            ).tofile(f)
            for arr in arrays:
                np.array([arr.ndim] + list(arr.shape), dtype="<i8").tofile(f)
                arr.astype("<f8").tofile(f)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            magic = f.read(len(_MAGIC))
            if magic != _MAGIC:
                raise ValueError(f"not a model snapshot: bad magic {magic!r}")
            dims = np.fromfile(f, dtype="<i8", count=7)
            scalars = np.fromfile(f, dtype="<f8", count=6)
            if dims.size != 7 or scalars.size != 6:
                raise ValueError("model snapshot truncated (header)")
            cfg = ModelConfig(
                obs_dim=int(dims[0]),
                act_dim=int(dims[1]),
                latent_dim=int(dims[2]),
                hidden_dim=int(dims[3]),
                n_q_heads=int(dims[4]),
                simnorm_group=int(dims[5]),
                q_dropout=float(scalars[0]),
                log_std_min=float(scalars[1]),
                log_std_max=float(scalars[2]),
                beta=float(scalars[3]),
                gamma=float(scalars[4]),
                init_scale=float(scalars[5]),
            )
            model = cls(cfg, np.random.default_rng(0))
            slots = [(model.params, k) for k in model.params]
            slots += [(model.target_params, k) for k in model.q_keys]
            if len(slots) != int(dims[6]):
                raise ValueError(
                    f"model snapshot array count {dims[6]} != expected {len(slots)}"
                )
            for store, key in slots:
                nd = np.fromfile(f, dtype="<i8", count=1)
                if nd.size != 1:
                    raise ValueError("model snapshot truncated (array header)")
                shape = np.fromfile(f, dtype="<i8", count=int(nd[0]))
                want = tuple(int(s) for s in shape)
                if want != store[key].shape:
                    raise ValueError(f"model snapshot shape mismatch for {key}")
                n = int(np.prod(want)) if want else 1
                data = np.fromfile(f, dtype="<f8", count=n)
                if data.size != n:
                    raise ValueError("model snapshot truncated (array data)")
                store[key] = data.reshape(want)
        return model


# -- shape plumbing ---------------------------------------------------------


def _promote(x):
    if isinstance(x, dc.Tensor):
        return x, False
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _demote(x, one):
    if not one:
        return x
    d = dc.as_array(x)
    if d.shape[0] == 1 and d.ndim >= 2:
        out = d[0]
        return float(out[0]) if out.shape == (1,) else out
    return d


def _ndim(x):
    return x.ndim if isinstance(x, dc.Tensor) else np.ndim(x)


def _shape0(x):
    return x.shape[0] if isinstance(x, dc.Tensor) else np.shape(x)[0]
