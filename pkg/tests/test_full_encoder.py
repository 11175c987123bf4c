#!/usr/bin/env python3
"""
Тесты модели Full Encoder: архитектура, причинность уровней,
патч-правила, функции потерь и вырождение в обычный VAE
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from src import tensor as T  # noqa: E402
from src.data_structures import ModelConfig  # noqa: E402
from src.errors import ConfigError, ShapeError  # noqa: E402
from src.full_encoder import (  # noqa: E402
    FEParams, ForwardOutputs, compute_losses, decode_levels, encode, encode_latents,
    forward_full, latent_kl, latent_labels, patch, reconstruct, reconstruction_loss,
    reparameterize, weight_multiplier,
)
from src.tensor import Tape, Tensor  # noqa: E402


def make_params(seed=0, **kwargs):
    config = ModelConfig(**kwargs)
    return FEParams.init(config, np.random.default_rng(seed))


def batch(rng, rows=16, cols=48):
    return rng.standard_normal((rows, cols))


class TestArchitecture:

    def test_layer_shapes(self):
        params = make_params()
        shapes = {name: [layer.weight.shape for layer in layers]
                  for name, layers in params.modules.items()}
        assert shapes["encoder0"] == [(48, 64), (64, 64), (64, 2)]
        assert shapes["encoder"] == [(48, 64), (64, 64), (64, 12)]
        assert shapes["nn0"] == [(1, 32), (32, 32), (32, 50)]
        for i in range(1, 7):
            assert shapes[f"nn{i}"] == [(1, 32), (32, 32), (32, 100)]
        assert shapes["decoder"] == [(50, 64), (64, 64), (64, 48)]

    def test_groups_partition_parameters(self):
        params = make_params()
        groups = params.groups()
        assert list(groups) == ["encoder0", "encoder", "nn0"] + [f"nn{i}" for i in range(1, 7)] + ["decoder"]
        seen = [id(t) for tensors in groups.values() for t in tensors]
        assert len(seen) == len(set(seen))
        assert set(seen) == {id(t) for t in params.named_tensors().values()}

    def test_baseline_has_two_groups(self):
        params = FEParams.init(ModelConfig.for_kind("vae", 6), np.random.default_rng(0))
        assert list(params.groups()) == ["encoder", "decoder"]
        assert params.config.levels == [6]

    def test_supervised_encoder0_head(self):
        params = FEParams.init(ModelConfig.for_kind("supervised-fe", 5), np.random.default_rng(0))
        assert params.modules["encoder0"][-1].weight.shape == (64, 5)
        assert params.modules["nn0"][0].weight.shape == (5, 32)

    def test_copy_is_independent(self):
        params = make_params(n_latents=2)
        clone = params.copy()
        clone.modules["decoder"][0].weight.values += 1.0
        assert not np.array_equal(clone.modules["decoder"][0].weight.values,
                                  params.modules["decoder"][0].weight.values)

    def test_output_mean_sets_decoder_bias(self):
        mean = np.linspace(-1.0, 1.0, 48)
        params = FEParams.init(ModelConfig(n_latents=2), np.random.default_rng(0), output_mean=mean)
        np.testing.assert_array_equal(params.modules["decoder"][-1].bias.values, mean[None, :])
        baseline = FEParams.init(ModelConfig.for_kind("vae", 6), np.random.default_rng(0), output_mean=mean)
        np.testing.assert_array_equal(baseline.modules["decoder"][-1].bias.values, mean[None, :])
        with pytest.raises(ShapeError):
            FEParams.init(ModelConfig(n_latents=2), np.random.default_rng(0), output_mean=np.zeros(47))

    def test_untrained_output_is_nearly_constant(self):
        mean = np.full(48, 0.5)
        params = FEParams.init(ModelConfig(n_latents=2), np.random.default_rng(0), output_mean=mean)
        x_hats = reconstruct(params, batch(np.random.default_rng(1), rows=200))
        for x_hat in x_hats:
            assert np.mean((x_hat - 0.5) ** 2) < 0.05

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_latents=6, median_dim=6)
        with pytest.raises(ConfigError):
            ModelConfig(beta=0.5)


class TestForward:

    def test_output_shapes(self):
        params = make_params()
        out = forward_full(params, batch(np.random.default_rng(1)), rng=np.random.default_rng(2))
        assert out.levels == list(range(7))
        assert len(out.x_hat) == 7 and len(out.m) == 7
        assert len(out.p1) == 6 and len(out.p2) == 6
        assert out.z.shape == (16, 6)
        assert all(x_hat.shape == (16, 48) for x_hat in out.x_hat)
        assert np.all(out.sigma.values > 0)

    def test_training_requires_rng(self):
        params = make_params(n_latents=2)
        with pytest.raises(ConfigError):
            forward_full(params, batch(np.random.default_rng(0)), training=True)

    def test_wrong_input_width(self):
        params = make_params(n_latents=2)
        with pytest.raises(ShapeError):
            forward_full(params, np.zeros((4, 47)), training=False)

    def test_eval_mode_is_deterministic(self):
        params = make_params(n_latents=3)
        x = batch(np.random.default_rng(0))
        first = reconstruct(params, x)
        second = reconstruct(params, x)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
        out = forward_full(params, x, training=False)
        np.testing.assert_array_equal(out.z.values, out.mu.values)

    def test_patchers_start_near_identity(self):
        params = make_params()
        out = forward_full(params, batch(np.random.default_rng(3), rows=64), training=False)
        for p1, p2 in zip(out.p1, out.p2):
            assert abs(p2.values.mean() - 1.0) < 0.1
            assert abs(p1.values.mean()) < 0.1

    def test_zeroed_encoder0_gives_noise_as_z0(self):
        params = make_params(n_latents=2)
        head = params.modules["encoder0"][-1]
        head.weight.values[:] = 0.0
        head.bias.values[:] = 0.0
        out = forward_full(params, batch(np.random.default_rng(0)), rng=np.random.default_rng(1))
        np.testing.assert_array_equal(out.z0.values, out.eps0)

    def test_teacher_forcing_uses_labels(self):
        params = FEParams.init(ModelConfig.for_kind("supervised-fe", 5), np.random.default_rng(0))
        rng = np.random.default_rng(1)
        x, y = batch(rng), rng.standard_normal((16, 5))
        out = forward_full(params, x, y, rng=rng)
        np.testing.assert_array_equal(out.z0.values, y)
        evaluated = forward_full(params, x, y, training=False)
        np.testing.assert_array_equal(evaluated.z0.values, evaluated.y_hat.values)

    def test_linear_model_is_affine(self):
        params = FEParams.init(ModelConfig.for_kind("linear-fe", 3), np.random.default_rng(0))
        rng = np.random.default_rng(1)
        a, b = batch(rng, rows=4), batch(rng, rows=4)
        mixed = reconstruct(params, 0.3 * a + 0.7 * b)
        for level, (ra, rb) in enumerate(zip(reconstruct(params, a), reconstruct(params, b))):
            np.testing.assert_allclose(mixed[level], 0.3 * ra + 0.7 * rb, atol=1e-10)


class TestCausality:
    """Уровень i реконструкции зависит только от z0..zi"""

    def test_perturbing_later_latent_keeps_earlier_levels(self):
        params = make_params()
        x = batch(np.random.default_rng(0))
        out = forward_full(params, x, training=False)
        for j in range(6):
            z = out.z.values.copy()
            z[:, j] += 1.0
            _, _, _, x_hats = decode_levels(params, out.z0, z)
            for level in range(j + 1):
                np.testing.assert_array_equal(x_hats[level].values, out.x_hat[level].values)
            assert not np.allclose(x_hats[j + 1].values, out.x_hat[j + 1].values)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_mask(self, seed):
        params = make_params(seed=seed)
        rng = np.random.default_rng(seed)
        z0 = Tensor(rng.standard_normal((8, 1)), requires_grad=True)
        z = Tensor(rng.standard_normal((8, 6)), requires_grad=True)
        with Tape() as tape:
            _, _, _, x_hats = decode_levels(params, z0, z)
            projections = [T.sum(T.mul(x_hat, Tensor(rng.standard_normal(x_hat.shape)))) for x_hat in x_hats]
        for level, projection in enumerate(projections):
            g_z0, g_z = T.grad(tape, projection, [z0, z])
            assert np.all(g_z[:, level:] == 0.0)
            assert np.all(np.abs(g_z[:, :level]).sum(axis=0) > 0)
            assert np.abs(g_z0).sum() > 0


class TestPatchRules:

    def test_two_step(self):
        out = patch(np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]]), np.array([[2.0, 0.0]]), "two-step")
        np.testing.assert_array_equal(out.values, [[2.5, 0.5]])

    def test_additive_ignores_p2(self):
        out = patch(np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]]), None, "additive")
        np.testing.assert_array_equal(out.values, [[1.5, 2.5]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            patch(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 2)), "two-step")

    def test_unknown_rule(self):
        with pytest.raises(ConfigError):
            patch(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), "multiplicative")


class TestReparameterize:

    def test_tiny_sigma(self):
        mu = np.array([[0.3, -1.2]])
        z = reparameterize(mu, np.full((1, 2), 1e-12), rng=np.random.default_rng(0))
        np.testing.assert_allclose(z.values, mu, atol=1e-10)

    def test_moments(self):
        mu, sigma = np.full((100000, 1), 0.5), np.full((100000, 1), 2.0)
        z = reparameterize(mu, sigma, rng=np.random.default_rng(0)).values
        assert z.mean() == pytest.approx(0.5, abs=0.03)
        assert z.std() == pytest.approx(2.0, rel=0.01)

    def test_gradients(self):
        mu = Tensor(np.zeros((3, 2)), requires_grad=True)
        sigma = Tensor(np.ones((3, 2)), requires_grad=True)
        eps = np.random.default_rng(0).standard_normal((3, 2))
        with Tape() as tape:
            loss = T.sum(reparameterize(mu, sigma, eps=eps))
        g_mu, g_sigma = T.grad(tape, loss, [mu, sigma])
        np.testing.assert_array_equal(g_mu, np.ones((3, 2)))
        np.testing.assert_array_equal(g_sigma, eps)


class TestLosses:

    def test_weight_multiplier(self):
        assert weight_multiplier(0, 1.0, 2 / 3) == 1.0
        assert weight_multiplier(1, 1.0, 2 / 3) == pytest.approx(2.0)
        assert weight_multiplier(200, 1.0, 2 / 3) == pytest.approx(4.0)
        assert weight_multiplier(5, 0.0, 2 / 3) == 1.0
        weights = [weight_multiplier(i, 1.0, 2 / 3) for i in range(30)]
        assert all(b > a for a, b in zip(weights, weights[1:]))
        with pytest.raises(ConfigError):
            weight_multiplier(1, 1.0, 1.0)

    def test_keys_match_groups(self):
        params = make_params(n_latents=3)
        rng = np.random.default_rng(0)
        x = batch(rng)
        losses = compute_losses(forward_full(params, x, rng=rng), x, None, params.config)
        assert list(losses) == list(params.groups())
        assert all(loss.item() >= 0 for loss in losses.values())

    def test_perfect_reconstruction_is_zero_loss(self):
        config = ModelConfig(n_latents=1, n_outputs=3, median_dim=4)
        x = np.arange(6.0).reshape(2, 3)
        outputs = ForwardOutputs(
            levels=[0, 1], x_hat=[Tensor(x), Tensor(x)],
            mu=Tensor(np.zeros((2, 1))), sigma=Tensor(np.ones((2, 1))),
            mu0=Tensor(np.zeros((2, 1))), sigma0=Tensor(np.ones((2, 1))),
        )
        losses = compute_losses(outputs, x, None, config)
        assert all(loss.item() == 0.0 for loss in losses.values())

    def test_supervised_requires_labels(self):
        params = FEParams.init(ModelConfig.for_kind("supervised-fe", 5), np.random.default_rng(0))
        x = batch(np.random.default_rng(0))
        outputs = forward_full(params, x, training=False)
        with pytest.raises(ConfigError):
            compute_losses(outputs, x, None, params.config)

    def test_non_variational_has_no_kl(self):
        params = FEParams.init(ModelConfig.for_kind("linear-fe", 2), np.random.default_rng(0))
        rng = np.random.default_rng(1)
        outputs = forward_full(params, batch(rng), rng=rng)
        assert latent_kl(outputs, params.config).item() == 0.0
        np.testing.assert_array_equal(outputs.z.values, outputs.mu.values)

    def test_beta_scales_kl(self):
        x = batch(np.random.default_rng(0))
        plain = make_params(n_latents=2, xi=0.0)
        heavy = make_params(n_latents=2, xi=0.0, beta=4.0)
        out_plain = forward_full(plain, x, rng=np.random.default_rng(1))
        out_heavy = forward_full(heavy, x, rng=np.random.default_rng(1))
        kl = latent_kl(out_plain, plain.config).item()
        loss_plain = compute_losses(out_plain, x, None, plain.config)["encoder"].item()
        loss_heavy = compute_losses(out_heavy, x, None, heavy.config)["encoder"].item()
        assert loss_heavy - loss_plain == pytest.approx(3.0 * kl, rel=1e-9)

    def test_reconstruction_sums_over_outputs(self):
        x_hat = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        x = np.zeros((2, 3))
        # (1 + 4 + 9 + 0) / 2 образца
        assert reconstruction_loss(x_hat, x).item() == pytest.approx(7.0)

    def test_encoder0_loss_uses_summed_reconstruction(self):
        params = make_params(n_latents=1)
        rng = np.random.default_rng(0)
        x = batch(rng, rows=64)
        out = forward_full(params, x, rng=rng)
        losses = compute_losses(out, x, None, params.config)
        kl0 = T.gaussian_kl(out.mu0, out.sigma0).item()
        recon0 = np.mean(np.sum((out.x_hat[0].values - x) ** 2, axis=1))
        assert losses["encoder0"].item() == pytest.approx(recon0 + kl0)
        assert recon0 == pytest.approx(48 * np.mean((out.x_hat[0].values - x) ** 2))

    def test_baseline_vae_sums_kl(self):
        params = FEParams.init(ModelConfig.for_kind("vae", 6), np.random.default_rng(0))
        rng = np.random.default_rng(1)
        out = forward_full(params, batch(rng), rng=rng)
        full = T.gaussian_kl(out.mu, out.sigma).item()
        assert latent_kl(out, params.config).item() == pytest.approx(full)
        fe = make_params(n_latents=6)
        out_fe = forward_full(fe, batch(rng), rng=rng)
        assert latent_kl(out_fe, fe.config).item() == pytest.approx(
            T.gaussian_kl(out_fe.mu, out_fe.sigma).item() / 6)


def _selu(x):
    return np.where(x > 0, T.SELU_LAMBDA * x, T.SELU_LAMBDA * T.SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def _mlp(layers, x):
    h = x
    for layer in layers[:-1]:
        h = _selu(h @ layer.weight.values + layer.bias.values)
    return h @ layers[-1].weight.values + layers[-1].bias.values


class TestDegeneration:
    """FE с одним латентом, xi = 0 и beta = 1 - это обычный VAE"""

    @pytest.mark.parametrize("seed", range(5))
    def test_encoder_loss_matches_vae(self, seed):
        params = make_params(seed=seed, n_latents=1, xi=0.0, beta=1.0, drop_ratio=0.0)
        rng = np.random.default_rng(seed + 100)
        x = batch(rng, rows=32)
        out = forward_full(params, x, rng=rng)
        loss = compute_losses(out, x, None, params.config)["encoder"].item()

        modules = params.modules
        head0 = _mlp(modules["encoder0"], x)
        z0 = head0[:, :1] + np.exp(np.clip(head0[:, 1:2], -6.0, 3.0)) * out.eps0
        head = _mlp(modules["encoder"], x)
        mu, sigma = head[:, :1], np.exp(np.clip(head[:, 1:2], -6.0, 3.0))
        z = mu + sigma * out.eps
        m0 = _mlp(modules["nn0"], z0)
        patcher = _mlp(modules["nn1"], z)
        m1 = patcher[:, :50] + (patcher[:, 50:] + 1.0) * m0
        x_hat = _mlp(modules["decoder"], m1)
        recon = np.mean(np.sum((x_hat - x) ** 2, axis=1))
        kl = 0.5 * np.sum(mu ** 2 + sigma ** 2 - 1.0 - 2.0 * np.log(sigma)) / x.shape[0]

        assert abs(loss - (recon + kl)) <= 1e-12 * max(1.0, abs(loss))


class TestLatents:

    def test_labels(self):
        assert latent_labels(ModelConfig(n_latents=6)) == [f"L{i}" for i in range(1, 8)]
        assert latent_labels(ModelConfig.for_kind("vae", 6)) == [f"L{i}" for i in range(1, 7)]
        supervised = latent_labels(ModelConfig.for_kind("supervised-fe", 5))
        assert supervised[:5] == [f"L1.{j}" for j in range(1, 6)]
        assert supervised[5:] == [f"L{i}" for i in range(2, 7)]

    def test_encode_latents_shape(self):
        params = make_params(n_latents=4)
        x = batch(np.random.default_rng(0), rows=10)
        latents, labels = encode_latents(params, x)
        assert latents.shape == (10, 5)
        mu, _ = encode(params, x)
        np.testing.assert_array_equal(latents[:, 1:], mu.values)
        assert labels[0] == "L1"


class TestLossGradients:
    """Градиенты каждой группы от своей функции потерь против центральных разностей"""

    @pytest.mark.parametrize("seed", range(50))
    def test_routed_gradients(self, seed):
        rng = np.random.default_rng(seed)
        n_latents = int(rng.integers(1, 4))
        config = ModelConfig(
            n_latents=n_latents, n_outputs=5, median_dim=n_latents + 2,
            encoder_hidden=(4,), nn_hidden=(3,), decoder_hidden=(4,),
            patch_rule=["additive", "two-step"][seed % 2], xi=float(rng.uniform(0, 2)),
        )
        params = FEParams.init(config, np.random.default_rng(seed))
        x = rng.standard_normal((6, 5))
        groups = params.groups()

        def losses():
            out = forward_full(params, x, rng=np.random.default_rng(1000 + seed))
            return compute_losses(out, x, None, config)

        with Tape() as tape:
            analytic = losses()
        for name, loss in analytic.items():
            T.backward(tape, loss, params=groups[name])

        pick_rng = np.random.default_rng(seed)
        h = 1e-5
        for name, tensors in groups.items():
            for tensor in tensors:
                flat = tensor.values.reshape(-1)
                for idx in pick_rng.choice(flat.size, size=min(3, flat.size), replace=False):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    plus = losses()[name].item()
                    flat[idx] = orig - h
                    minus = losses()[name].item()
                    flat[idx] = orig
                    numeric = (plus - minus) / (2 * h)
                    value = 0.0 if tensor.grad is None else tensor.grad.reshape(-1)[idx]
                    assert abs(value - numeric) <= 1e-4 * max(1.0, abs(numeric)), (name, tensor.name)

    def test_forward_backward_keeps_inputs(self):
        params = make_params(n_latents=2)
        x = batch(np.random.default_rng(0))
        snapshot = x.copy()
        with Tape() as tape:
            losses = compute_losses(forward_full(params, x, rng=np.random.default_rng(1)), x, None, params.config)
        T.backward(tape, losses["decoder"])
        np.testing.assert_array_equal(x, snapshot)
