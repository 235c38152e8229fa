import math

import numpy as np
import pytest
import torch

from conftest import randomize_module
from mangagen.dataset import build_record
from mangagen.diffusion import (
    ancestral_sample,
    expand_intra_mask,
    init_train_state,
    load_train_state,
    make_schedule,
    masked_denoising_loss,
    q_sample,
    run_training,
    sample,
    save_train_state,
    smoothed_losses,
    train_step,
)
from mangagen.errors import ConfigError
from mangagen.model import CaptionEmbedding, MaskSet, ModelConfig, build_model
from mangagen.scripts import pad_scripts
from mangagen.synthetic import synth_pages

MICRO = ModelConfig(
    d_model=16, depth=1, heads=2, k_max=4, d_text=8, max_text_tokens=8, num_timesteps=40
)


def _records(n=4, seed=50):
    return [
        build_record(p.image, p.annotation, p.order, p.captions, p.bubble_boxes, 4)
        for p in synth_pages(n, seed=seed, width=48, height=64, max_panels=4)
    ]


class TestSchedule:
    def test_first_alpha_bar_is_one_minus_beta_start(self):
        sched = make_schedule(100, 1e-4, 2e-2)
        assert float(sched.alpha_bar[0]) == 1.0 - 1e-4

    def test_alpha_bar_monotone_decreasing(self):
        sched = make_schedule(1000)
        diffs = sched.alpha_bar[1:] - sched.alpha_bar[:-1]
        assert (diffs < 0).all()

    def test_terminal_alpha_bar_matches_direct_product(self):
        sched = make_schedule(1000, 1e-4, 2e-2)
        # Independent oracle: multiply the linspace terms one by one.
        betas = [1e-4 + (2e-2 - 1e-4) * i / 999 for i in range(1000)]
        product = 1.0
        for b in betas:
            product *= 1.0 - b
        assert math.isclose(float(sched.alpha_bar[-1]), product, rel_tol=1e-9)
        assert float(sched.alpha_bar[-1]) < 0.01

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ConfigError):
            make_schedule(10, 0.0, 0.5)
        with pytest.raises(ConfigError):
            make_schedule(10, 0.2, 0.1)
        with pytest.raises(ConfigError):
            make_schedule(10, kind="cosine")


class TestQSample:
    def test_near_one_alpha_bar_returns_z0(self):
        sched = make_schedule(2, 1e-12, 2e-12)
        z0 = torch.randn(2, 1, 4, 4, 4, generator=torch.Generator().manual_seed(0))
        eps = torch.randn_like(z0)
        assert torch.allclose(q_sample(z0, 0, eps, sched), z0, atol=1e-5)

    def test_zero_noise_scales_by_sqrt_alpha_bar(self):
        sched = make_schedule(50)
        z0 = torch.ones(1, 2, 4, 4, 4)
        got = q_sample(z0, 30, torch.zeros_like(z0), sched)
        want = float(sched.alpha_bar[30]) ** 0.5
        assert torch.allclose(got, torch.full_like(z0, want), atol=1e-6)

    def test_marginal_variance_matches_closed_form(self):
        sched = make_schedule(100)
        t = 60
        gen = torch.Generator().manual_seed(1)
        eps = torch.randn(10_000, 1, 1, 1, 1, generator=gen)
        z_t = q_sample(torch.zeros_like(eps), t, eps, sched)
        want = 1.0 - float(sched.alpha_bar[t])
        assert abs(z_t.var().item() - want) < 0.05 * want

    def test_out_of_range_timestep(self):
        sched = make_schedule(10)
        z = torch.zeros(1, 1, 4, 2, 2)
        with pytest.raises(ValueError):
            q_sample(z, 10, torch.zeros_like(z), sched)


def _mask_set(intra):
    inter = torch.zeros(intra.shape[:2], dtype=torch.bool)
    return MaskSet(intra, inter)


class TestMaskedLoss:
    def test_empty_mask_equals_plain_mse_exactly(self):
        gen = torch.Generator().manual_seed(2)
        eps = torch.randn(2, 2, 4, 4, 4, generator=gen)
        eps_hat = torch.randn(2, 2, 4, 4, 4, generator=gen)
        masks = _mask_set(torch.zeros(2, 2, 4, dtype=torch.bool))
        got = masked_denoising_loss(eps, eps_hat, masks)
        want = torch.mean((eps - eps_hat) ** 2)
        assert got == want

    def test_full_mask_is_zero_with_warning(self):
        eps = torch.ones(1, 1, 4, 4, 4)
        masks = MaskSet(torch.ones(1, 1, 4, dtype=torch.bool), torch.tensor([[False]]))
        with pytest.warns(UserWarning, match="masked"):
            loss = masked_denoising_loss(eps, torch.zeros_like(eps), masks)
        assert loss == 0.0

    def test_half_masked_unit_error_gives_one(self):
        eps = torch.zeros(1, 2, 4, 4, 4)
        eps_hat = torch.ones_like(eps)  # unit error everywhere
        intra = torch.zeros(1, 2, 4, dtype=torch.bool)
        intra[0, 0] = True  # mask all of panel 0 = half of all positions
        loss = masked_denoising_loss(eps, eps_hat, _mask_set(intra))
        assert loss == 1.0

    def test_loss_blind_to_masked_predictions(self):
        gen = torch.Generator().manual_seed(3)
        eps = torch.randn(1, 2, 4, 4, 4, generator=gen)
        eps_hat = torch.randn_like(eps)
        intra = torch.zeros(1, 2, 4, dtype=torch.bool)
        intra[0, 0, :2] = True
        masks = _mask_set(intra)
        base = masked_denoising_loss(eps, eps_hat, masks)
        noisy = eps_hat.clone()
        excluded = expand_intra_mask(intra, (4, 4), 2).expand_as(eps)
        noisy[excluded] = torch.randn(int(excluded.sum()), generator=gen) * 100
        assert masked_denoising_loss(eps, noisy, masks) == base

    def test_gradient_is_exactly_zero_at_masked_positions(self):
        gen = torch.Generator().manual_seed(4)
        eps = torch.randn(1, 2, 4, 4, 4, generator=gen)
        eps_hat = torch.randn_like(eps).requires_grad_(True)
        intra = torch.zeros(1, 2, 4, dtype=torch.bool)
        intra[0, 1, 1:3] = True
        masks = _mask_set(intra)
        masked_denoising_loss(eps, eps_hat, masks).backward()
        excluded = expand_intra_mask(intra, (4, 4), 2).expand_as(eps)
        assert (eps_hat.grad[excluded] == 0).all()
        assert (eps_hat.grad[~excluded] != 0).any()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            masked_denoising_loss(
                torch.zeros(1, 1, 4, 4, 4),
                torch.zeros(1, 1, 4, 4, 2),
                _mask_set(torch.zeros(1, 1, 4, dtype=torch.bool)),
            )


class TestTraining:
    def test_same_seed_reproduces_loss_sequence(self):
        records = _records()
        sched = make_schedule(MICRO.num_timesteps)
        runs = []
        for _ in range(2):
            state = init_train_state(MICRO, seed=7)
            losses = run_training(state, records, sched, steps=4, batch_size=2)
            runs.append(losses)
        assert runs[0] == runs[1]

    def test_zero_lr_leaves_parameters_unchanged(self):
        records = _records()
        sched = make_schedule(MICRO.num_timesteps)
        state = init_train_state(MICRO, seed=8, lr=0.0)
        before = [p.detach().clone() for p in state.model.parameters()]
        train_step(state, records[:2], sched)
        for old, new in zip(before, state.model.parameters()):
            assert (old == new).all()

    def test_non_finite_loss_aborts(self):
        records = _records()
        sched = make_schedule(MICRO.num_timesteps)
        state = init_train_state(MICRO, seed=9)

        class _NaNWrap(torch.nn.Module):
            def __init__(self, inner):
                super().__init__()
                self.inner = inner
                self.config = inner.config

            def forward(self, *args, **kwargs):
                return self.inner(*args, **kwargs) * float("nan")

        state.model = _NaNWrap(state.model)
        with pytest.raises(RuntimeError, match="non-finite"):
            train_step(state, records[:2], sched)

    def test_checkpoint_resume_is_bit_exact(self, tmp_path):
        records = _records()
        sched = make_schedule(MICRO.num_timesteps)

        state = init_train_state(MICRO, seed=10)
        run_training(state, records, sched, steps=3, batch_size=2)
        save_train_state(state, tmp_path / "ckpt")
        continued = run_training(state, records, sched, steps=3, batch_size=2)

        restored, _ = load_train_state(tmp_path / "ckpt")
        resumed = run_training(restored, records, sched, steps=3, batch_size=2)
        assert continued == resumed

    def test_mid_epoch_resume_matches_continuous_run(self):
        records = _records()
        sched = make_schedule(MICRO.num_timesteps)
        full_state = init_train_state(MICRO, seed=11)
        full = run_training(full_state, records, sched, steps=5, batch_size=2)

        split_state = init_train_state(MICRO, seed=11)
        first = run_training(split_state, records, sched, steps=3, batch_size=2)
        second = run_training(split_state, records, sched, steps=2, batch_size=2)
        assert full == first + second

    def test_smoothed_losses_window(self):
        assert smoothed_losses([2.0, 4.0, 6.0], window=2) == [2.0, 3.0, 5.0]


class TestSampling:
    def test_single_step_oracle_recovers_target(self):
        sched = make_schedule(1, 1e-4, 2e-2)
        gen = torch.Generator().manual_seed(5)
        target = torch.randn(1, 2, 4, 4, 4, generator=gen)
        ab0 = float(sched.alpha_bar[0])

        def oracle(z, t, captions, masks):
            return (z - ab0**0.5 * target) / (1.0 - ab0) ** 0.5

        out = ancestral_sample(oracle, tuple(target.shape), None, None, sched, seed=3)
        assert torch.allclose(out, target, atol=1e-5)

    def test_fixed_seed_gives_identical_stacks(self):
        torch.manual_seed(0)
        model = build_model(MICRO, seed=12)
        randomize_module(model, 13, scale=0.02)
        from mangagen.model import build_codec, build_embedder

        codec = build_codec(MICRO.codec)
        embedder = build_embedder(MICRO.embedder, MICRO.d_text)
        sched = make_schedule(MICRO.num_timesteps)
        scripts = pad_scripts(["A hero runs.", "A door opens."], MICRO.k_max)
        a = sample(model, codec, embedder, scripts, sched, seed=4, page_size=(48, 64))
        b = sample(model, codec, embedder, scripts, sched, seed=4, page_size=(48, 64))
        assert (a.images == b.images).all()
        assert a.images.shape == (4, 64, 48, 3)
        assert a.images.min() >= 0.0 and a.images.max() <= 1.0

    def test_script_count_must_match_k_max(self):
        model = build_model(MICRO, seed=14)
        from mangagen.model import build_codec, build_embedder

        codec = build_codec(MICRO.codec)
        embedder = build_embedder(MICRO.embedder, MICRO.d_text)
        sched = make_schedule(MICRO.num_timesteps)
        scripts = pad_scripts(["Only one."], 2)
        with pytest.raises(ValueError, match="pad"):
            sample(model, codec, embedder, scripts, sched, seed=0, page_size=(48, 64))
