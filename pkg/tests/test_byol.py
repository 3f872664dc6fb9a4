import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, gradient_rel_error
from gradcheck import sample_indices
from spiroembed import nn
from spiroembed.augment import AugmentDistribution, gaussian_noise
from spiroembed.byol import (
    ENCODER_PREFIX,
    EncoderCheckpoint,
    EncoderSpec,
    OnlineNetwork,
    SlseConfig,
    TargetNetwork,
    byol_loss,
    byol_objective,
    curves_to_batch,
    ema_update,
    embed,
    pretrain,
    train_step,
)
from spiroembed.exceptions import NumericError, ParameterError, ShapeError

TINY = dict(
    encoder=EncoderSpec(channels=(4, 6), input_length=24),
    projector_hidden=10,
    projection_dim=6,
    predictor_hidden=10,
)


def tiny_networks(seed=0, **kw):
    cfg = SlseConfig(**{**TINY, **kw})
    online = OnlineNetwork(cfg, np.random.default_rng(seed))
    # perturb so the target differs from the online copy
    target = TargetNetwork(online)
    rng = np.random.default_rng(seed + 1)
    for name in target.params.names():
        target.params.values[name] += rng.normal(0, 0.05, size=target.params[name].shape)
    return cfg, online, target


def check_objective_gradients(online, target, x1, x2, rng, per_tensor=8):
    online.params.zero_grad()
    byol_objective(online, target, x1, x2)
    analytic = {n: g.copy() for n, g in online.params.grads.items()}

    def loss():
        return byol_objective(online, target, x1, x2)

    errors = {}
    for name in online.params.names():
        idx = sample_indices(online.params[name].shape, per_tensor, rng)
        numeric = [central_difference(loss, online.params.values[name], i) for i in idx]
        errors[name] = gradient_rel_error([analytic[name][i] for i in idx], numeric)
    return errors


class TestLoss:
    def test_anchors(self):
        z = np.array([1.0, 2.0, -0.5])
        assert byol_loss(3.0 * z, z) == 0.0
        assert byol_loss(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 2.0
        assert byol_loss(-z, z) == 4.0

    @given(st.integers(0, 2**16), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_bounds_and_scale_invariance(self, seed, a, b):
        rng = np.random.default_rng(seed)
        q, z = rng.normal(size=(2, 4, 7))
        loss = byol_loss(q, z)
        assert 0.0 <= loss <= 4.0
        assert byol_loss(a * q, b * z) == pytest.approx(loss, abs=1e-12)

    def test_zero_norm(self):
        with pytest.raises(NumericError):
            byol_loss(np.zeros(3), np.ones(3))


class TestEma:
    def _pair(self, rng):
        xi, theta = nn.ParameterSet(), nn.ParameterSet()
        for name, shape in (("a", (3, 2)), ("b", (4,))):
            xi.add(name, rng.normal(size=shape))
            theta.add(name, rng.normal(size=shape))
        return xi, theta

    def test_scalar(self):
        xi, theta = nn.ParameterSet(), nn.ParameterSet()
        xi.add("w", [1.0])
        theta.add("w", [0.0])
        ema_update(xi, theta, 0.99)
        assert xi["w"][0] == 0.99

    def test_tau_zero_copies(self):
        xi, theta = self._pair(np.random.default_rng(0))
        ema_update(xi, theta, 0.0)
        assert all(xi[n].tobytes() == theta[n].tobytes() for n in xi.names())

    def test_tau_one_freezes(self):
        xi, theta = self._pair(np.random.default_rng(1))
        before = {n: xi[n].copy() for n in xi.names()}
        ema_update(xi, theta, 1.0)
        assert all(xi[n].tobytes() == before[n].tobytes() for n in xi.names())

    def test_shape_mismatch(self):
        xi, theta = nn.ParameterSet(), nn.ParameterSet()
        xi.add("w", np.zeros(3))
        theta.add("w", np.zeros(4))
        with pytest.raises(ShapeError):
            ema_update(xi, theta, 0.5)

    @given(st.integers(0, 2**16), st.floats(0, 1))
    def test_stays_in_hull(self, seed, tau):
        rng = np.random.default_rng(seed)
        xi, theta = nn.ParameterSet(), nn.ParameterSet()
        xi.add("w", rng.uniform(-1, 1, 20))
        theta.add("w", rng.uniform(-1, 1, 20))
        for _ in range(10):
            theta.values["w"][...] = rng.uniform(-1, 1, 20)
            ema_update(xi, theta, tau)
            assert np.all(xi["w"] >= -1 - 1e-15) and np.all(xi["w"] <= 1 + 1e-15)


class TestObjective:
    def test_gradients_match_finite_differences(self):
        _, online, target = tiny_networks()
        rng = np.random.default_rng(3)
        x1, x2 = rng.normal(size=(2, 2, 24, 2))
        errors = check_objective_gradients(online, target, x1, x2, rng)
        assert max(errors.values()) < 1e-4, errors

    def test_no_gradient_reaches_target(self):
        _, online, target = tiny_networks()
        x1, x2 = np.random.default_rng(0).normal(size=(2, 3, 24, 2))
        before = {n: target.params[n].copy() for n in target.params.names()}
        byol_objective(online, target, x1, x2)
        assert all(not g.any() for g in target.params.grads.values())
        assert all(target.params[n].tobytes() == before[n].tobytes() for n in before)

    def test_target_is_separate_copy(self):
        _, online, target = tiny_networks()
        name = ENCODER_PREFIX + "0.W"
        assert target.params[name] is not online.params[name]
        assert "predictor.0.W" not in target.params


class TestTrainStep:
    @pytest.mark.parametrize("tau", [0.0, 0.5, 0.99, 1.0])
    def test_ema_after_step(self, tau, small_cohort):
        cfg = SlseConfig(tau=tau, batch_size=4)
        rng = np.random.default_rng(0)
        online = OnlineNetwork(cfg, rng)
        target = TargetNetwork(online)
        batch = [r.curve for r in small_cohort[:4]]
        train_step(batch, online, target, cfg, rng)
        xi_prev = {n: target.params[n].copy() for n in target.params.names()}
        train_step(batch, online, target, cfg, rng)
        for n, prev in xi_prev.items():
            expected = tau * prev + (1.0 - tau) * online.params[n]
            assert target.params[n].tobytes() == expected.tobytes()
        if tau == 1.0:
            assert all(target.params[n].tobytes() == xi_prev[n].tobytes() for n in xi_prev)
        if tau == 0.0:
            assert all(target.params[n].tobytes() == online.params[n].tobytes() for n in xi_prev)

    def test_updates_theta_only_through_adam(self, small_cohort):
        cfg = SlseConfig(batch_size=2)
        rng = np.random.default_rng(0)
        online = OnlineNetwork(cfg, rng)
        target = TargetNetwork(online)
        train_step([r.curve for r in small_cohort[:2]], online, target, cfg, rng)
        assert online.params.step == 1

    def test_empty_batch(self):
        cfg, online, target = tiny_networks()
        with pytest.raises(ParameterError):
            train_step([], online, target, cfg, np.random.default_rng(0))

    @pytest.mark.parametrize("bad", [dict(tau=1.5), dict(total_steps=0), dict(lr=0.0)])
    def test_config_validation(self, bad):
        with pytest.raises(ParameterError):
            SlseConfig(**bad)


class TestPretrain:
    def test_learning_progress(self, small_cohort):
        curves = [r.curve for r in small_cohort[:64]]
        ckpt = pretrain(curves, SlseConfig(total_steps=200, batch_size=16, seed=1))
        losses = np.array(ckpt.losses)
        assert np.all(np.isfinite(losses))
        assert losses[-20:].mean() < losses[:20].mean()

    def test_bitwise_reproducible(self, small_cohort, tmp_path):
        curves = [r.curve for r in small_cohort[:16]]
        cfg = SlseConfig(total_steps=3, batch_size=4, seed=9)
        pretrain(curves, cfg).save(tmp_path / "a.ckpt")
        pretrain(curves, cfg).save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_keeps_only_encoder(self, small_cohort):
        ckpt = pretrain([small_cohort[0].curve], SlseConfig(total_steps=1, batch_size=1))
        assert all(n.startswith(ENCODER_PREFIX) for n in ckpt.params.names())

    def test_empty(self):
        with pytest.raises(ParameterError):
            pretrain([], SlseConfig(total_steps=1))

    def test_identity_views_with_copied_target(self):
        # identical views and tau = 0: the projections agree, so the loss only reflects the predictor
        _, online, target = tiny_networks(predictor_hidden=10)
        ema_update(target.params, online.params, 0.0)
        x = np.random.default_rng(4).normal(size=(3, 24, 2))
        h, _ = nn.forward(online.encoder, online.params, x)
        z, _ = nn.forward(online.projector, online.params, h[:, :8])
        q, _ = nn.forward(online.predictor, online.params, z)
        assert byol_objective(online, target, x, x) == pytest.approx(byol_loss(q, z), abs=1e-14)


@pytest.fixture(scope="module")
def ckpt(small_cohort):
    return pretrain([r.curve for r in small_cohort[:8]], SlseConfig(total_steps=2, batch_size=4))


class TestEmbed:
    def test_dimension_and_determinism(self, ckpt, small_cohort):
        c = small_cohort[0].curve
        a, b = embed(ckpt, c), embed(ckpt, c)
        assert a.shape == (8,) and a.tobytes() == b.tobytes()

    def test_noise_free_augmentation(self, ckpt, small_cohort):
        c = small_cohort[1].curve
        assert embed(ckpt, gaussian_noise(c, 0.0, 0.0)).tobytes() == embed(ckpt, c).tobytes()

    def test_batch_matches_single(self, ckpt, small_cohort):
        curves = [r.curve for r in small_cohort[:5]]
        batch = embed(ckpt, curves)
        np.testing.assert_allclose(batch[3], embed(ckpt, curves[3]), rtol=1e-12, atol=1e-14)

    def test_checkpoint_round_trip(self, ckpt, small_cohort, tmp_path):
        ckpt.save(tmp_path / "e.ckpt")
        back = EncoderCheckpoint.load(tmp_path / "e.ckpt")
        c = small_cohort[2].curve
        assert embed(back, c).tobytes() == embed(ckpt, c).tobytes()
        assert back.step == ckpt.step

    def test_spec_mismatch(self, ckpt, tmp_path):
        ckpt.save(tmp_path / "e.ckpt")
        params, header = nn.load_checkpoint(tmp_path / "e.ckpt")
        header["encoder_spec"]["latent_dim"] = 4
        nn.save_checkpoint(tmp_path / "bad.ckpt", params, {k: v for k, v in header.items() if k not in ("arrays", "format_version")})
        with pytest.raises(Exception):
            EncoderCheckpoint.load(tmp_path / "bad.ckpt")

    def test_batch_layout(self, small_cohort):
        x = curves_to_batch([r.curve for r in small_cohort[:3]])
        assert x.shape == (3, 1000, 2)
        np.testing.assert_array_equal(x[0, :, 1], small_cohort[0].curve.flow)
