import math

import numpy as np
import pytest
import torch

from bsdgan.errors import TrainingDiverged
from bsdgan.gan import (
    GanTrainState,
    LossBreakdown,
    StepDraws,
    TrainConfig,
    bsdgan_value,
    discriminator_step,
    discriminator_training_loss,
    generator_step,
    generator_training_loss,
    gradient_penalty,
    init_train_state,
    input_gradient_norms,
    interpolate,
    load_train_state,
    sample_balanced_labels,
    sample_wrong_labels,
    save_train_state,
    train_gan,
    write_loss_curve,
)
from bsdgan.networks import (
    ArchitectureDescriptor,
    build_autoencoder,
    build_discriminator,
    class_probability,
)
from bsdgan.pretrain import LatentPrior
from bsdgan.toy import make_toy_dataset


def tiny_desc(T=16, K=3, latent=6, activation="leaky_relu"):
    return ArchitectureDescriptor(
        input_shape=(3, T),
        latent_dim=latent,
        conv_blocks=((4, 5, 2), (8, 5, 2)),
        activations=(activation, activation),
        class_count=K,
        label_embed_dim=4,
        fusion_width=16,
    )


def flat_prior(K, latent):
    return LatentPrior(
        means=np.zeros((K, latent), dtype=np.float32),
        stds=np.ones((K, latent), dtype=np.float32),
    )


def tiny_state(seed=0, T=16, K=3, latent=6, **cfg):
    desc = tiny_desc(T=T, K=K, latent=latent)
    enc, dec = build_autoencoder(desc, seed=seed)
    config = TrainConfig(batch_size=cfg.pop("batch_size", 8), seed=seed, **cfg)
    return init_train_state(enc, dec, flat_prior(K, latent), config)


def fd_gradient_norms(score_fn, x, y, h=1e-3):
    """Central-difference oracle for per-sample input-gradient norms."""
    with torch.no_grad():
        grads = torch.zeros_like(x)
        flat = x.flatten(1)
        for j in range(flat.shape[1]):
            delta = torch.zeros_like(flat)
            delta[:, j] = h
            up = score_fn((flat + delta).view_as(x), y)
            down = score_fn((flat - delta).view_as(x), y)
            grads.flatten(1)[:, j] = (up - down) / (2 * h)
        return grads.flatten(1).norm(2, dim=1)


class TestGradientPenalty:
    def test_unit_gradient_linear_map_gives_zero(self):
        score = lambda x, y: 0.6 * x[:, 0] + 0.8 * x[:, 1]
        x_r = torch.randn(5, 2)
        x_g = torch.randn(5, 2)
        alpha = torch.rand(5)
        assert float(gradient_penalty(score, x_r, x_g, torch.zeros(5, dtype=torch.long), alpha)) == pytest.approx(0.0, abs=1e-6)

    def test_norm_five_linear_map_gives_sixteen(self):
        score = lambda x, y: 3.0 * x[:, 0] + 4.0 * x[:, 1]
        x_r = torch.randn(4, 2)
        x_g = torch.randn(4, 2)
        alpha = torch.rand(4)
        pen = float(gradient_penalty(score, x_r, x_g, torch.zeros(4, dtype=torch.long), alpha))
        assert pen == pytest.approx(16.0, abs=1e-6)
        assert 10.0 * pen == pytest.approx(160.0, abs=1e-5)

    def test_alpha_one_recovers_real_batch(self):
        x_r = torch.randn(3, 2, 5)
        x_g = torch.randn(3, 2, 5)
        x_hat = interpolate(x_r, x_g, torch.ones(3))
        assert torch.equal(x_hat, x_r)

    def test_alpha_zero_recovers_generated_batch(self):
        x_r = torch.randn(3, 2, 5)
        x_g = torch.randn(3, 2, 5)
        assert torch.equal(interpolate(x_r, x_g, torch.zeros(3)), x_g)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            interpolate(torch.zeros(2, 3), torch.zeros(2, 4), torch.rand(2))

    @pytest.mark.parametrize("seed", range(20))
    def test_analytic_matches_finite_differences(self, seed):
        # smooth activations keep the central-difference oracle inside 1e-4
        desc = ArchitectureDescriptor(
            input_shape=(2, 8),
            latent_dim=4,
            conv_blocks=((4, 3, 2), (6, 3, 2)),
            activations=("tanh", "tanh"),
            class_count=3,
            label_embed_dim=4,
            fusion_width=8,
        )
        enc, _ = build_autoencoder(desc, seed=seed)
        disc = build_discriminator(enc, 3, seed=seed).double()
        score = lambda x, y: class_probability(disc(x, y), y)
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(4, 2, 8, generator=gen, dtype=torch.float64)
        y = torch.randint(0, 3, (4,), generator=gen)
        analytic = input_gradient_norms(score, x, y).detach()
        numeric = fd_gradient_norms(score, x, y)
        rel = ((analytic - numeric).abs() / numeric.abs().clamp_min(1e-12)).max()
        assert float(rel) < 1e-4

    def test_constant_score_gives_unit_penalty(self):
        score = lambda x, y: torch.full((len(x),), 0.25)
        pen = gradient_penalty(score, torch.randn(6, 3), torch.randn(6, 3), torch.zeros(6, dtype=torch.long), torch.rand(6))
        assert float(pen) == pytest.approx(1.0)


class TestBsdganValue:
    def _uniform_stub(self, K):
        return lambda x, y: torch.full((len(x), K + 1), 1.0 / (K + 1))

    def _generate_stub(self, shape):
        return lambda z, y: torch.zeros((len(z),) + shape)

    def _draws(self, B, K, seed=0):
        gen = torch.Generator().manual_seed(seed)
        y_r = torch.randint(0, K, (B,), generator=gen)
        return {
            "x_r": torch.randn(B, 2, 6, generator=gen),
            "y_r": y_r,
            "z": torch.randn(B, 4, generator=gen),
            "y_g": torch.randint(0, K, (B,), generator=gen),
            "y_wrong": sample_wrong_labels(y_r, K, gen),
            "alpha": torch.rand(B, generator=gen),
        }

    def test_uniform_discriminator_hand_values(self):
        K = 2
        kw = self._draws(8, K)
        out = bsdgan_value(
            self._uniform_stub(K), self._generate_stub((2, 6)), lambda_gp=10.0, **kw
        )
        assert out.real_term == pytest.approx(math.log(1 / 3), abs=1e-6)
        assert out.fake_term == pytest.approx(math.log(2 / 3), abs=1e-6)
        assert out.wrong_label_term == pytest.approx(math.log(2 / 3), abs=1e-6)
        assert out.gp_term == pytest.approx(1.0, abs=1e-6)  # constant D, zero gradient
        expected_total = math.log(1 / 3) + 2 * math.log(2 / 3) + 10.0 * 1.0
        assert out.total_d == pytest.approx(expected_total, abs=1e-6)
        assert out.total_g == pytest.approx(out.fake_term)

    def test_fully_confident_discriminator_hits_both_clamps(self):
        # probability exactly 1 at the conditioning label: the real term clamps
        # at log(1 - 1e-7) ~ 0 and the complement terms clamp at log(1e-7)
        K = 3

        def stub(x, y):
            probs = torch.zeros((len(x), K + 1), dtype=torch.float64)
            probs.scatter_(1, y.view(-1, 1), 1.0)
            return probs

        kw = self._draws(6, K, seed=1)
        out = bsdgan_value(stub, self._generate_stub((2, 6)), lambda_gp=0.0, **kw)
        assert out.real_term == pytest.approx(0.0, abs=1e-6)
        assert out.wrong_label_term == pytest.approx(math.log(1e-7), rel=1e-9)
        assert out.fake_term == pytest.approx(math.log(1e-7), rel=1e-9)

    def test_lambda_zero_total_ignores_gp(self):
        K = 2
        kw = self._draws(5, K, seed=2)
        out = bsdgan_value(self._uniform_stub(K), self._generate_stub((2, 6)), lambda_gp=0.0, **kw)
        assert out.total_d == pytest.approx(out.real_term + out.fake_term + out.wrong_label_term, abs=1e-9)

    def test_lambda_linearity(self):
        K = 3
        desc = tiny_desc(T=12, K=K)
        enc, dec = build_autoencoder(desc, seed=3)
        disc = build_discriminator(enc, K, seed=4)
        gen = torch.Generator().manual_seed(5)
        B = 6
        y_r = torch.randint(0, K, (B,), generator=gen)
        kw = {
            "x_r": torch.randn(B, 3, 12, generator=gen),
            "y_r": y_r,
            "z": torch.randn(B, desc.latent_dim, generator=gen),
            "y_g": torch.randint(0, K, (B,), generator=gen),
            "y_wrong": sample_wrong_labels(y_r, K, gen),
            "alpha": torch.rand(B, generator=gen),
        }
        gen_fn = lambda z, y: torch.randn(len(z), 3, 12, generator=torch.Generator().manual_seed(9))
        a = bsdgan_value(disc, gen_fn, lambda_gp=2.5, **kw)
        b = bsdgan_value(disc, gen_fn, lambda_gp=7.5, **kw)
        assert b.total_d - a.total_d == pytest.approx((7.5 - 2.5) * a.gp_term, abs=1e-6)
        assert a.gp_term == pytest.approx(b.gp_term, abs=1e-9)

    def test_wrong_equals_real_rejected(self):
        K = 2
        kw = self._draws(4, K, seed=3)
        kw["y_wrong"] = kw["y_r"].clone()
        with pytest.raises(ValueError):
            bsdgan_value(self._uniform_stub(K), self._generate_stub((2, 6)), lambda_gp=1.0, **kw)

    def test_wrong_label_sampler_requires_two_classes(self):
        gen = torch.Generator().manual_seed(0)
        with pytest.raises(ValueError):
            sample_wrong_labels(torch.zeros(3, dtype=torch.long), 1, gen)


class TestLabelSampling:
    def test_balanced_labels_uniform_within_three_sigma(self):
        gen = torch.Generator().manual_seed(42)
        K, n = 5, 10_000
        draws = sample_balanced_labels(n, K, gen)
        counts = torch.bincount(draws, minlength=K).float()
        p = 1.0 / K
        sigma = math.sqrt(n * p * (1 - p))
        assert ((counts - n * p).abs() <= 3 * sigma).all(), counts

    def test_wrong_labels_never_equal_real(self):
        gen = torch.Generator().manual_seed(1)
        for K in (2, 3, 6):
            y_r = torch.randint(0, K, (500,), generator=gen)
            y_w = sample_wrong_labels(y_r, K, gen)
            assert (y_w != y_r).all()
            assert (0 <= y_w).all() and (y_w < K).all()

    def test_wrong_labels_uniform_over_other_classes(self):
        gen = torch.Generator().manual_seed(2)
        K, n = 4, 12_000
        y_r = torch.zeros(n, dtype=torch.long)
        y_w = sample_wrong_labels(y_r, K, gen)
        counts = torch.bincount(y_w, minlength=K).float()
        assert counts[0] == 0
        p = 1.0 / (K - 1)
        sigma = math.sqrt(n * p * (1 - p))
        assert ((counts[1:] - n * p).abs() <= 3 * sigma).all()


class TestSteps:
    def _fixed_draws(self, state, B, seed=0):
        gen = torch.Generator().manual_seed(seed)
        latent = state.generator.descriptor.latent_dim
        K = state.generator.descriptor.class_count
        y_r = torch.randint(0, K, (B,), generator=gen)
        return y_r, StepDraws(
            z=torch.randn(B, latent, generator=gen),
            y_g=torch.randint(0, K, (B,), generator=gen),
            y_wrong=sample_wrong_labels(y_r, K, gen),
            alpha=torch.rand(B, generator=gen),
        )

    def test_discriminator_step_leaves_generator_bitwise_unchanged(self):
        state = tiny_state(seed=0)
        before = {k: v.clone() for k, v in state.generator.state_dict().items()}
        x_r = torch.randn(8, 3, 16)
        y_r = torch.randint(0, 3, (8,))
        discriminator_step(state, x_r, y_r)
        for k, v in state.generator.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_generator_step_leaves_discriminator_bitwise_unchanged(self):
        state = tiny_state(seed=0)
        before = {k: v.clone() for k, v in state.discriminator.state_dict().items()}
        generator_step(state)
        for k, v in state.discriminator.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_optimizer_moments_update_only_for_stepped_network(self):
        state = tiny_state(seed=1)
        x_r = torch.randn(8, 3, 16)
        y_r = torch.randint(0, 3, (8,))
        discriminator_step(state, x_r, y_r)
        assert len(state.opt_d.state_dict()["state"]) > 0
        assert len(state.opt_g.state_dict()["state"]) == 0

    def test_discriminator_descent_on_fixed_batch(self):
        # lambda 0, one step, loss on the same batch and draws decreases (3-seed majority)
        wins = 0
        for seed in (0, 1, 2):
            state = tiny_state(seed=seed, lambda_gp=0.0)
            gen = torch.Generator().manual_seed(100 + seed)
            x_r = torch.randn(8, 3, 16, generator=gen)
            y_r, draws = self._fixed_draws(state, 8, seed=seed)
            before, _ = discriminator_training_loss(
                state.generator, state.discriminator, x_r, y_r, draws, 0.0
            )
            discriminator_step(state, x_r, y_r, draws=draws)
            after, _ = discriminator_training_loss(
                state.generator, state.discriminator, x_r, y_r, draws, 0.0
            )
            wins += int(float(after.detach()) < float(before.detach()))
        assert wins >= 2

    def test_generator_descent_on_fixed_noise(self):
        wins = 0
        for seed in (0, 1, 2):
            state = tiny_state(seed=seed)
            _, draws = self._fixed_draws(state, 8, seed=seed)
            before = generator_training_loss(state.generator, state.discriminator, draws.z, draws.y_g)
            generator_step(state, draws=draws)
            after = generator_training_loss(state.generator, state.discriminator, draws.z, draws.y_g)
            wins += int(float(after.detach()) < float(before.detach()))
        assert wins >= 2

    def test_small_batch_rejected(self):
        state = tiny_state()
        with pytest.raises(ValueError):
            discriminator_step(state, torch.randn(1, 3, 16), torch.zeros(1, dtype=torch.long))


class TestTrainGan:
    def _toy_splits(self, seed=0):
        ds = make_toy_dataset((30, 40, 20), length=16, seed=seed)
        return ds

    def test_zero_epochs_returns_initialization(self):
        desc = tiny_desc()
        enc, dec = build_autoencoder(desc, seed=5)
        prior = flat_prior(3, 6)
        cfg = TrainConfig(epochs=0, batch_size=8, seed=5)
        state = train_gan(self._toy_splits(), enc, dec, prior, cfg)
        ref = init_train_state(enc, dec, prior, cfg)
        for k, v in state.generator.state_dict().items():
            assert torch.equal(v, ref.generator.state_dict()[k])
        for k, v in state.discriminator.state_dict().items():
            assert torch.equal(v, ref.discriminator.state_dict()[k])
        assert state.step == 0 and state.history == []

    def test_history_rows_match_steps(self, tmp_path):
        desc = tiny_desc()
        enc, dec = build_autoencoder(desc, seed=5)
        cfg = TrainConfig(epochs=2, batch_size=16, seed=5)
        ds = self._toy_splits()
        state = train_gan(ds, enc, dec, flat_prior(3, 6), cfg)
        assert len(state.history) == state.step
        path = write_loss_curve(state.history, tmp_path / "loss.tsv")
        lines = path.read_text().strip().splitlines()
        assert len(lines) == state.step + 1  # header
        assert lines[0].split("\t") == list(
            ("step", "epoch", "d_loss", "g_loss", "real_term", "fake_term", "wrong_term", "gp_term")
        )

    def test_all_losses_finite(self):
        desc = tiny_desc()
        enc, dec = build_autoencoder(desc, seed=6)
        cfg = TrainConfig(epochs=3, batch_size=16, seed=6)
        state = train_gan(self._toy_splits(seed=1), enc, dec, flat_prior(3, 6), cfg)
        for row in state.history:
            for col in ("d_loss", "real_term", "fake_term", "wrong_term", "gp_term"):
                assert math.isfinite(row[col])

    def test_determinism_same_seed(self):
        desc = tiny_desc()
        enc, dec = build_autoencoder(desc, seed=7)
        cfg = TrainConfig(epochs=2, batch_size=16, seed=7)
        ds = self._toy_splits(seed=2)
        s1 = train_gan(ds, enc, dec, flat_prior(3, 6), cfg)
        s2 = train_gan(ds, enc, dec, flat_prior(3, 6), cfg)
        for k, v in s1.generator.state_dict().items():
            assert torch.equal(v, s2.generator.state_dict()[k]), k

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        desc = tiny_desc()
        enc, dec = build_autoencoder(desc, seed=8)
        ds = self._toy_splits(seed=3)
        prior = flat_prior(3, 6)
        full = train_gan(ds, enc, dec, prior, TrainConfig(epochs=4, batch_size=16, seed=8))

        half_cfg = TrainConfig(epochs=2, batch_size=16, seed=8)
        half = train_gan(ds, enc, dec, prior, half_cfg)
        save_train_state(half, tmp_path / "state.bsd")
        resumed = load_train_state(tmp_path / "state.bsd")
        assert resumed.step == half.step and resumed.epoch == 2
        done = train_gan(ds, enc, dec, prior, TrainConfig(epochs=4, batch_size=16, seed=8), state=resumed)
        assert done.step == full.step
        for k, v in full.generator.state_dict().items():
            assert torch.equal(v, done.generator.state_dict()[k]), k
        for k, v in full.discriminator.state_dict().items():
            assert torch.equal(v, done.discriminator.state_dict()[k]), k

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            TrainConfig(lambda_gp=-1)
        with pytest.raises(ValueError):
            TrainConfig(critic_steps=0)
