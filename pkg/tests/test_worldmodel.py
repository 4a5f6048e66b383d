"""Model component tests with straight-line numpy oracles."""

import numpy as np
import pytest

from mimicplan import diffcore as dc
from mimicplan.worldmodel import ModelConfig, WorldModel


def tiny_model(seed=0, **over):
    kw = dict(
        obs_dim=3,
        act_dim=2,
        latent_dim=8,
        hidden_dim=8,
        n_q_heads=2,
        simnorm_group=4,
        q_dropout=0.0,
    )
    kw.update(over)
    return WorldModel(ModelConfig(**kw), np.random.default_rng(seed))


def set_constant_q(model, c):
    last = len(model.specs["q"]) - 1
    for store in (model.params, model.target_params):
        store[f"q.{last}.w"][...] = 0.0
        store[f"q.{last}.b"][...] = c


# Independent re-implementation of the layer stack, plain numpy throughout.


def _np_layernorm(x, gain, bias, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias


def _np_mish(x):
    return x * np.tanh(np.logaddexp(0.0, x))


def _np_simnorm(x, g):
    shp = x.shape
    r = x.reshape(shp[:-1] + (shp[-1] // g, g))
    r = r - r.max(-1, keepdims=True)
    e = np.exp(r)
    return (e / e.sum(-1, keepdims=True)).reshape(shp)


def _np_mlp(specs, prefix, params, x):
    h = x
    for i, spec in enumerate(specs):
        if spec.kind == "linear":
            h = h @ params[f"{prefix}.{i}.w"] + params[f"{prefix}.{i}.b"]
        elif spec.kind == "layernorm":
            h = _np_layernorm(h, params[f"{prefix}.{i}.gain"], params[f"{prefix}.{i}.bias"])
        elif spec.kind == "mish":
            h = _np_mish(h)
        elif spec.kind == "simnorm":
            h = _np_simnorm(h, spec.arg)
        elif spec.kind == "dropout":
            pass  # eval mode: identity
        else:
            raise AssertionError(spec.kind)
    return h


class TestModelConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(obs_dim=0),
            dict(latent_dim=6, simnorm_group=4),
            dict(n_q_heads=1),
            dict(gamma=1.0),
        ],
    )
    def test_rejects(self, kw):
        base = dict(obs_dim=3, act_dim=2, latent_dim=8, hidden_dim=8, simnorm_group=4)
        base.update(kw)
        with pytest.raises(ValueError):
            ModelConfig(**base)


class TestEncode:
    def test_deterministic(self):
        model = tiny_model()
        s = np.random.default_rng(1).standard_normal((4, 3))
        a = model.encode(s)
        b = model.encode(s)
        assert np.array_equal(dc.as_array(a), dc.as_array(b))

    def test_group_simplex(self):
        model = tiny_model()
        s = np.random.default_rng(2).standard_normal((16, 3))
        z = dc.as_array(model.encode(s))
        groups = z.reshape(16, -1, model.cfg.simnorm_group)
        np.testing.assert_allclose(groups.sum(-1), 1.0, atol=1e-9)
        assert np.all(z > 0.0) and np.all(z < 1.0)

    def test_matches_numpy_oracle(self):
        model = tiny_model(3)
        s = np.random.default_rng(4).standard_normal((5, 3))
        want = _np_mlp(model.specs["enc"], "enc", model.params, s)
        np.testing.assert_allclose(dc.as_array(model.encode(s)), want, atol=1e-12)

    def test_dimension_mismatch(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.encode(np.zeros((4, 7)))

    def test_single_vector_shape(self):
        model = tiny_model()
        z = dc.as_array(model.encode(np.zeros(3)))
        assert z.shape == (model.cfg.latent_dim,)


class TestLatentStep:
    def test_deterministic_and_simplex(self):
        model = tiny_model()
        rng = np.random.default_rng(5)
        z = dc.as_array(model.encode(rng.standard_normal((6, 3))))
        a = rng.uniform(-1, 1, (6, 2))
        n1 = dc.as_array(model.latent_step(z, a))
        n2 = dc.as_array(model.latent_step(z, a))
        assert np.array_equal(n1, n2)
        groups = n1.reshape(6, -1, model.cfg.simnorm_group)
        np.testing.assert_allclose(groups.sum(-1), 1.0, atol=1e-9)

    def test_matches_numpy_oracle(self):
        model = tiny_model(6)
        rng = np.random.default_rng(7)
        z = dc.as_array(model.encode(rng.standard_normal((4, 3))))
        a = rng.uniform(-1, 1, (4, 2))
        want = _np_mlp(model.specs["dyn"], "dyn", model.params, np.concatenate([z, a], -1))
        np.testing.assert_allclose(dc.as_array(model.latent_step(z, a)), want, atol=1e-12)

    def test_unroll_composes(self):
        model = tiny_model()
        rng = np.random.default_rng(8)
        z = dc.as_array(model.encode(rng.standard_normal((2, 3))))
        actions = rng.uniform(-1, 1, (3, 2, 2))
        step = z
        for t in range(3):
            step = dc.as_array(model.latent_step(step, actions[t]))
        z2 = z
        for t in range(3):
            z2 = dc.as_array(model.latent_step(z2, actions[t]))
        assert np.array_equal(step, z2)


class TestQValues:
    def test_zero_init_heads(self):
        model = tiny_model()
        rng = np.random.default_rng(9)
        z = dc.as_array(model.encode(rng.standard_normal((4, 3))))
        a = rng.uniform(-1, 1, (4, 2))
        np.testing.assert_array_equal(dc.as_array(model.q_values(z, a)), 0.0)

    def test_online_equals_target_after_init(self):
        model = tiny_model(10)
        rng = np.random.default_rng(11)
        # give the heads nonzero output first
        last = len(model.specs["q"]) - 1
        model.params[f"q.{last}.w"][...] = rng.standard_normal(
            model.params[f"q.{last}.w"].shape
        )
        model.soft_update(1.0)
        z = dc.as_array(model.encode(rng.standard_normal((4, 3))))
        a = rng.uniform(-1, 1, (4, 2))
        on = dc.as_array(model.q_values(z, a, which="online"))
        tg = dc.as_array(model.q_values(z, a, which="target"))
        np.testing.assert_array_equal(on, tg)

    def test_matches_numpy_oracle(self):
        model = tiny_model(12)
        rng = np.random.default_rng(13)
        last = len(model.specs["q"]) - 1
        model.params[f"q.{last}.w"][...] = rng.standard_normal(
            model.params[f"q.{last}.w"].shape
        )
        z = dc.as_array(model.encode(rng.standard_normal((4, 3))))
        a = rng.uniform(-1, 1, (4, 2))
        x = np.concatenate([z, a], -1)
        want = _np_mlp(model.specs["q"], "q", model.params, x)
        got = dc.as_array(model.q_values(z, a))
        assert got.shape == (2, 4, 1)
        np.testing.assert_allclose(got, want, atol=1e-12)
        np.testing.assert_allclose(
            dc.as_array(model.q_mean(z, a)), want.mean(0), atol=1e-12
        )

    def test_dropout_only_in_train_mode(self):
        model = tiny_model(14, q_dropout=0.5)
        rng = np.random.default_rng(15)
        last = len(model.specs["q"]) - 1
        model.params[f"q.{last}.w"][...] = rng.standard_normal(
            model.params[f"q.{last}.w"].shape
        )
        model.soft_update(1.0)
        z = dc.as_array(model.encode(rng.standard_normal((8, 3))))
        a = rng.uniform(-1, 1, (8, 2))
        ev1 = dc.as_array(model.q_values(z, a))
        ev2 = dc.as_array(model.q_values(z, a))
        np.testing.assert_array_equal(ev1, ev2)
        tr = dc.as_array(model.q_values(z, a, train=True, rng=np.random.default_rng(0)))
        assert not np.allclose(tr, ev1)
        tg = dc.as_array(model.q_values(z, a, which="target"))
        np.testing.assert_array_equal(tg, ev1)


class TestSamplePolicy:
    def test_bounds_and_finite(self):
        model = tiny_model(16)
        rng = np.random.default_rng(17)
        z = dc.as_array(model.encode(rng.standard_normal((32, 3))))
        a, lp = model.sample_policy(z, rng)
        a, lp = dc.as_array(a), dc.as_array(lp)
        assert np.all(np.abs(a) <= 1.0) and np.all(np.isfinite(lp))

    def test_degenerate_std_gives_tanh_mean(self):
        model = tiny_model(18)
        last = len(model.specs["pi"]) - 1
        m = model.cfg.act_dim
        model.params[f"pi.{last}.w"][...] = 0.0
        b = model.params[f"pi.{last}.b"]
        b[..., :m] = np.array([0.3, -0.8])
        b[..., m:] = -30.0  # clamps to the log-std floor
        z = dc.as_array(model.encode(np.zeros((4, 3))))
        a, _ = model.sample_policy(z, np.random.default_rng(19))
        want = np.broadcast_to(np.tanh([0.3, -0.8]), (4, 2))
        np.testing.assert_allclose(dc.as_array(a), want, atol=1e-3)

    def test_log_prob_matches_density_oracle(self):
        model = tiny_model(20)
        rng = np.random.default_rng(21)
        z = dc.as_array(model.encode(rng.standard_normal((64, 3))))
        a, lp = model.sample_policy(z, rng)
        a, lp = dc.as_array(a), dc.as_array(lp)
        mean, log_std = model.policy_head(z)
        mean, log_std = dc.as_array(mean), dc.as_array(log_std)
        u = np.arctanh(np.clip(a, -1 + 1e-12, 1 - 1e-12))
        sig = np.exp(log_std)
        gauss = (-0.5 * ((u - mean) / sig) ** 2 - log_std - 0.5 * np.log(2 * np.pi)).sum(
            -1, keepdims=True
        )
        jac = np.log1p(-np.tanh(u) ** 2).sum(-1, keepdims=True)
        np.testing.assert_allclose(lp, gauss - jac, atol=1e-9)

    def test_consistent_with_log_prob_method(self):
        model = tiny_model(22)
        rng = np.random.default_rng(23)
        z = dc.as_array(model.encode(rng.standard_normal((32, 3))))
        a, lp = model.sample_policy(z, rng)
        lp2 = model.log_prob(z, dc.as_array(a))
        np.testing.assert_allclose(dc.as_array(lp), dc.as_array(lp2), atol=1e-7)

    def test_presquash_mean_monte_carlo(self):
        model = tiny_model(24)
        z = dc.as_array(model.encode(np.full((1, 3), 0.37)))
        mean, log_std = model.policy_head(z)
        mean = dc.as_array(mean)[0]
        sig = np.exp(dc.as_array(log_std))[0]
        rng = np.random.default_rng(25)
        n = 100_000
        zz = np.repeat(z, n, axis=0)
        a, _ = model.sample_policy(zz, rng)
        u = np.arctanh(np.clip(dc.as_array(a), -1 + 1e-12, 1 - 1e-12))
        err = np.abs(u.mean(0) - mean)
        assert np.all(err <= 3.0 * sig / np.sqrt(n))


class TestValue:
    def test_constant_q_zero_beta(self):
        model = tiny_model(26, beta=0.0)
        set_constant_q(model, 1.7)
        z = dc.as_array(model.encode(np.random.default_rng(27).standard_normal((4, 3))))
        for which in ("online", "target"):
            v = dc.as_array(model.value(z, which, rng=np.random.default_rng(0)))
            np.testing.assert_allclose(v, 1.7, atol=1e-12)

    def test_zero_q_unit_beta_is_neg_log_prob(self):
        model = tiny_model(28, beta=1.0)
        z = dc.as_array(model.encode(np.random.default_rng(29).standard_normal((4, 3))))
        _, lp = model.sample_policy(z, np.random.default_rng(5))
        v = dc.as_array(model.value(z, "online", rng=np.random.default_rng(5)))
        np.testing.assert_allclose(v, -dc.as_array(lp), atol=1e-12)

    def test_single_sample_within_spread(self):
        model = tiny_model(30)
        rng = np.random.default_rng(31)
        last = len(model.specs["q"]) - 1
        model.params[f"q.{last}.w"][...] = rng.standard_normal(
            model.params[f"q.{last}.w"].shape
        )
        z = dc.as_array(model.encode(rng.standard_normal(3)))
        draws = np.array(
            [
                float(dc.as_array(model.value(z, "online", rng=np.random.default_rng(i))))
                for i in range(256)
            ]
        )
        single = float(dc.as_array(model.value(z, "online", rng=np.random.default_rng(999))))
        spread = draws.std() + 1e-12
        assert abs(single - draws.mean()) <= 4.0 * spread

    def test_needs_rng(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.value(np.zeros(model.cfg.latent_dim), "online")

    def test_unknown_ensemble(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.value(np.zeros(model.cfg.latent_dim), "both", rng=np.random.default_rng(0))


class TestDecodeReward:
    def test_zero_discount_is_q(self):
        model = tiny_model(32)
        rng = np.random.default_rng(33)
        last = len(model.specs["q"]) - 1
        model.params[f"q.{last}.w"][...] = rng.standard_normal(
            model.params[f"q.{last}.w"].shape
        )
        z = dc.as_array(model.encode(rng.standard_normal((4, 3))))
        a = rng.uniform(-1, 1, (4, 2))
        zn = dc.as_array(model.latent_step(z, a))
        r = dc.as_array(model.decode_reward(z, a, zn, rng=np.random.default_rng(0), gamma=1e-300))
        q = dc.as_array(model.q_mean(z, a))
        np.testing.assert_allclose(r, q, atol=1e-9)

    def test_constant_q_zero_beta(self):
        model = tiny_model(34, beta=0.0, gamma=0.95)
        set_constant_q(model, 2.0)
        rng = np.random.default_rng(35)
        z = dc.as_array(model.encode(rng.standard_normal((4, 3))))
        a = rng.uniform(-1, 1, (4, 2))
        zn = dc.as_array(model.latent_step(z, a))
        r = dc.as_array(model.decode_reward(z, a, zn, rng=np.random.default_rng(0)))
        np.testing.assert_allclose(r, 2.0 * (1 - 0.95), atol=1e-12)


class TestSoftUpdate:
    def _fill(self, model, online, target):
        for k in model.q_keys:
            model.params[k][...] = online
            model.target_params[k][...] = target

    def test_hard_copy(self):
        model = tiny_model(36)
        self._fill(model, 1.0, 0.0)
        model.soft_update(1.0)
        for k in model.q_keys:
            np.testing.assert_array_equal(model.target_params[k], model.params[k])

    def test_small_step(self):
        model = tiny_model()
        self._fill(model, 1.0, 0.0)
        model.soft_update(0.01)
        for k in model.q_keys:
            np.testing.assert_allclose(model.target_params[k], 0.01, atol=1e-15)

    def test_closed_form_recursion(self):
        model = tiny_model()
        self._fill(model, 1.0, 0.0)
        tau, n = 0.1, 7
        for _ in range(n):
            model.soft_update(tau)
        want = 1.0 - (1.0 - tau) ** n
        for k in model.q_keys:
            np.testing.assert_allclose(model.target_params[k], want, rtol=1e-12)

    def test_contraction(self):
        model = tiny_model(37)
        rng = np.random.default_rng(38)
        for k in model.q_keys:
            model.params[k][...] = rng.standard_normal(model.params[k].shape)
        gap = lambda: np.sqrt(
            np.sum(
                [
                    float(((model.target_params[k] - model.params[k]) ** 2).sum())
                    for k in model.q_keys
                ]
            )
        )
        before = gap()
        model.soft_update(0.25)
        assert gap() < before

    def test_bad_tau(self):
        model = tiny_model()
        for tau in (0.0, 1.5, -0.1):
            with pytest.raises(ValueError):
                model.soft_update(tau)


class TestSnapshots:
    def test_roundtrip_bit_identical(self, tmp_path):
        model = tiny_model(39, q_dropout=0.125, beta=3e-4, gamma=0.97)
        rng = np.random.default_rng(40)
        for k in model.params:
            model.params[k][...] = rng.standard_normal(model.params[k].shape)
        model.soft_update(0.3)
        path = tmp_path / "model.bin"
        model.save(path)
        other = WorldModel.load(path)
        assert other.cfg == model.cfg
        assert list(other.params) == list(model.params)
        for k in model.params:
            np.testing.assert_array_equal(other.params[k], model.params[k])
        for k in model.q_keys:
            np.testing.assert_array_equal(other.target_params[k], model.target_params[k])
        s = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(
            dc.as_array(model.encode(s)), dc.as_array(other.encode(s))
        )

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTMODEL" + b"\x00" * 64)
        with pytest.raises(ValueError):
            WorldModel.load(path)

    def test_truncated_rejected(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "model.bin"
        model.save(path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ValueError):
            WorldModel.load(path)
