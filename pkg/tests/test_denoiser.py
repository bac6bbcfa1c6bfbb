import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from thermodiff.denoiser import (
    CrossAttention2d,
    Denoiser,
    DenoiserConfig,
    SelfAttention2d,
    _attention,
    cross_attention_weights,
    timestep_embedding,
)

TINY = DenoiserConfig(
    inner_channels=4,
    channel_mult=(1, 2),
    blocks_per_stage=1,
    attn_resolutions=(8,),
    n_heads=2,
    norm_groups=2,
    context_dim=8,
    image_size=16,
)


def _inputs(cfg, batch=2, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    s = cfg.image_size
    kw = dict(generator=gen, dtype=dtype)
    R_t = torch.randn(batch, 1, s, s, **kw)
    X = torch.randn(batch, 1, s, s, **kw)
    Z = torch.randn(batch, 10, cfg.context_dim, **kw)
    S = torch.rand(batch, cfg.bands, s, s, **kw)
    t = torch.tensor([3.0] * batch, dtype=dtype)
    return R_t, X, Z, S, t


class TestCrossAttentionMath:
    def test_two_key_hand_case(self):
        # logits (0, ln 3) with d_h = 1 give weights (1/4, 3/4); values
        # (0, 1) make the attended output exactly 0.75.
        q = torch.tensor([[[1.0]]])
        k = torch.tensor([[[0.0], [math.log(3.0)]]])
        v = torch.tensor([[[0.0], [1.0]]])
        out = _attention(q, k, v, n_heads=1)
        assert abs(out.item() - 0.75) < 1e-6
        w = cross_attention_weights(q, k, 1)
        assert torch.allclose(w, torch.tensor([[[[0.25, 0.75]]]]), atol=1e-6)

    def test_weights_row_stochastic(self):
        gen = torch.Generator().manual_seed(1)
        q = torch.randn(3, 5, 8, generator=gen)
        k = torch.randn(3, 7, 8, generator=gen)
        w = cross_attention_weights(q, k, 2)
        assert w.shape == (3, 2, 5, 7)
        assert torch.allclose(w.sum(dim=-1), torch.ones(3, 2, 5), atol=1e-6)
        assert (w >= 0).all()

    def test_identical_tokens_collapse_to_value(self):
        torch.manual_seed(0)
        ca = CrossAttention2d(channels=8, context_dim=6, n_heads=2)
        z = torch.randn(1, 1, 6).repeat(1, 9, 1)  # nine identical tokens
        x = torch.randn(1, 8, 4, 4)
        out = ca.attend(x.reshape(1, 8, 16).transpose(1, 2), z)
        expected = ca.to_v(z[:, :1])  # (1, 1, 8)
        assert torch.allclose(out, expected.expand(1, 16, 8), atol=1e-5)

    def test_key_value_permutation_invariance(self):
        torch.manual_seed(1)
        ca = CrossAttention2d(channels=8, context_dim=6, n_heads=2)
        x = torch.randn(2, 8, 4, 4)
        z = torch.randn(2, 11, 6)
        perm = torch.randperm(11, generator=torch.Generator().manual_seed(7))
        a = ca(x, z)
        b = ca(x, z[:, perm])
        assert torch.allclose(a, b, atol=1e-6)

    def test_zero_projection_makes_output_context_free(self):
        torch.manual_seed(2)
        ca = CrossAttention2d(channels=8, context_dim=6, n_heads=2)
        with torch.no_grad():
            ca.proj.weight.zero_()
            ca.proj.bias.zero_()
        x = torch.randn(1, 8, 4, 4)
        assert torch.equal(ca(x, torch.randn(1, 5, 6)), x)

    def test_output_shape_matches_input(self):
        torch.manual_seed(3)
        ca = CrossAttention2d(channels=4, context_dim=6, n_heads=2)
        x = torch.randn(2, 4, 8, 8)
        assert ca(x, torch.randn(2, 3, 6)).shape == x.shape

    def test_self_attention_shape(self):
        torch.manual_seed(4)
        sa = SelfAttention2d(8, n_heads=2, norm_groups=2)
        x = torch.randn(2, 8, 4, 4)
        assert sa(x).shape == x.shape


class TestTimestepEmbedding:
    def test_zero_timestep(self):
        emb = timestep_embedding(torch.tensor([0.0]), 8)
        assert torch.allclose(emb[0, :4], torch.zeros(4))
        assert torch.allclose(emb[0, 4:], torch.ones(4))

    def test_known_values(self):
        emb = timestep_embedding(torch.tensor([1.0]), 4)
        expected = torch.tensor([math.sin(1.0), math.sin(1e-2), math.cos(1.0), math.cos(1e-2)])
        assert torch.allclose(emb[0], expected, atol=1e-6)

    def test_rejects_odd_dim(self):
        with pytest.raises(ValueError):
            timestep_embedding(torch.tensor([1.0]), 7)


class TestDenoiserForward:
    @pytest.mark.parametrize("head_mode", ["epsilon", "x0"])
    def test_cross_attention_mode_shape(self, head_mode):
        torch.manual_seed(0)
        cfg = DenoiserConfig(**{**TINY.to_dict(), "head_mode": head_mode})
        model = Denoiser(cfg)
        R_t, X, Z, _, t = _inputs(cfg)
        out = model(R_t, X, t=t, Z=Z)
        assert out.shape == (2, 1, cfg.image_size, cfg.image_size)

    def test_channel_concat_mode(self):
        torch.manual_seed(1)
        cfg = DenoiserConfig(**{**TINY.to_dict(), "conditioning": "channel_concat"})
        assert cfg.in_channels == 2 + cfg.bands
        model = Denoiser(cfg)
        R_t, X, _, S, t = _inputs(cfg)
        assert model(R_t, X, t=t, S=S).shape == R_t.shape

    def test_unconditioned_mode(self):
        torch.manual_seed(2)
        cfg = DenoiserConfig(**{**TINY.to_dict(), "conditioning": "none"})
        model = Denoiser(cfg)
        R_t, X, _, _, t = _inputs(cfg)
        assert model(R_t, X, t=t).shape == R_t.shape

    def test_regression_baseline_no_time_no_noise(self):
        torch.manual_seed(3)
        cfg = DenoiserConfig(**{**TINY.to_dict(), "use_diffusion_state": False,
                                "conditioning": "none"})
        assert cfg.in_channels == 1
        model = Denoiser(cfg)
        _, X, _, _, _ = _inputs(cfg)
        assert model(None, X).shape == X.shape
        assert model.time_mlp is None

    def test_missing_context_rejected(self):
        torch.manual_seed(4)
        model = Denoiser(TINY)
        R_t, X, _, _, t = _inputs(TINY)
        with pytest.raises(ValueError):
            model(R_t, X, t=t)

    def test_missing_reflectance_rejected_in_concat_mode(self):
        torch.manual_seed(5)
        cfg = DenoiserConfig(**{**TINY.to_dict(), "conditioning": "channel_concat"})
        model = Denoiser(cfg)
        R_t, X, _, _, t = _inputs(cfg)
        with pytest.raises(ValueError):
            model(R_t, X, t=t)

    def test_nonfinite_output_aborts(self):
        torch.manual_seed(6)
        model = Denoiser(TINY)
        with torch.no_grad():
            model.conv_out.weight.fill_(float("nan"))
        R_t, X, Z, _, t = _inputs(TINY)
        with pytest.raises(RuntimeError):
            model(R_t, X, t=t, Z=Z)

    def test_scalar_timestep_broadcasts(self):
        torch.manual_seed(7)
        model = Denoiser(TINY)
        R_t, X, Z, _, _ = _inputs(TINY)
        a = model(R_t, X, t=torch.tensor([3.0, 3.0]), Z=Z)
        b = model(R_t, X, t=3, Z=Z)
        assert torch.allclose(a, b)


class TestArchitectureContract:
    def test_encoder_path_has_no_attention(self):
        torch.manual_seed(0)
        model = Denoiser(TINY)
        down = nn.ModuleList([model.conv_in, model.down_stages, model.downsamples])
        for m in down.modules():
            assert not isinstance(m, (SelfAttention2d, CrossAttention2d))

    def test_attention_present_in_bottleneck_and_decoder(self):
        torch.manual_seed(1)
        model = Denoiser(TINY)
        assert isinstance(model.mid_self_attn, SelfAttention2d)
        assert isinstance(model.mid_cross_attn, CrossAttention2d)
        decoder_cross = [m for m in model.up_stages.modules()
                         if isinstance(m, CrossAttention2d)]
        assert len(decoder_cross) >= 1

    def test_attention_only_at_configured_resolutions(self):
        torch.manual_seed(2)
        cfg = DenoiserConfig(**{**TINY.to_dict(), "attn_resolutions": ()})
        model = Denoiser(cfg)
        decoder_attn = [m for m in model.up_stages.modules()
                        if isinstance(m, (SelfAttention2d, CrossAttention2d))]
        assert decoder_attn == []

    def test_no_cross_attention_without_efm_conditioning(self):
        torch.manual_seed(3)
        cfg = DenoiserConfig(**{**TINY.to_dict(), "conditioning": "channel_concat"})
        model = Denoiser(cfg)
        assert all(not isinstance(m, CrossAttention2d) for m in model.modules())

    def test_context_changes_output(self):
        torch.manual_seed(4)
        model = Denoiser(TINY)
        R_t, X, Z, _, t = _inputs(TINY)
        a = model(R_t, X, t=t, Z=Z)
        b = model(R_t, X, t=t, Z=Z + 1.0)
        assert not torch.allclose(a, b)

    def test_timestep_changes_output(self):
        torch.manual_seed(5)
        model = Denoiser(TINY)
        R_t, X, Z, _, _ = _inputs(TINY)
        a = model(R_t, X, t=1, Z=Z)
        b = model(R_t, X, t=9, Z=Z)
        assert not torch.allclose(a, b)


class TestConfig:
    def test_dict_round_trip(self):
        assert DenoiserConfig.from_dict(TINY.to_dict()) == TINY

    def test_rejects_bad_modes(self):
        with pytest.raises(ValueError):
            DenoiserConfig(head_mode="noise")
        with pytest.raises(ValueError):
            DenoiserConfig(conditioning="film")
        with pytest.raises(ValueError):
            DenoiserConfig(inner_channels=6, n_heads=4)

    def test_in_channels(self):
        assert DenoiserConfig().in_channels == 2
        assert DenoiserConfig(conditioning="channel_concat").in_channels == 8


class TestGradientCorrectness:
    def test_finite_difference_full_model(self):
        """Central-difference check of analytic gradients through the whole
        tiny UNet, including a cross-attention site, in double precision."""
        torch.manual_seed(0)
        cfg = DenoiserConfig(
            inner_channels=4, channel_mult=(1, 2), blocks_per_stage=1,
            attn_resolutions=(4,), n_heads=2, norm_groups=2,
            context_dim=8, image_size=8,
        )
        model = Denoiser(cfg).double()
        R_t, X, Z, _, t = _inputs(cfg, batch=1, seed=3, dtype=torch.float64)
        probe = torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(9),
                            dtype=torch.float64)

        def objective():
            return (model(R_t, X, t=t[:1], Z=Z) * probe).sum()

        loss = objective()
        loss.backward()

        rng = np.random.default_rng(0)
        named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]
        # Always include one cross-attention weight; then probe a random
        # spread of coordinates across every other parameter tensor.
        targets = [(n, p, 0) for n, p in named if "mid_cross_attn.to_k" in n][:1]
        for i in rng.choice(len(named), size=20, replace=False):
            name, p = named[i]
            targets.append((name, p, int(rng.integers(p.numel()))))

        h = 1e-6
        for name, p, idx in targets:
            flat = p.data.view(-1)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                f_plus = objective().item()
                flat[idx] = orig - h
                f_minus = objective().item()
                flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            analytic = p.grad.view(-1)[idx].item()
            denom = max(abs(numeric), abs(analytic), 1e-8)
            rel = abs(numeric - analytic) / denom
            assert rel < 1e-5, f"{name}[{idx}]: analytic {analytic}, numeric {numeric}"

    def test_frozen_context_receives_no_gradient_when_detached(self):
        torch.manual_seed(1)
        model = Denoiser(TINY)
        R_t, X, Z, _, t = _inputs(TINY)
        Z = Z.detach()
        out = model(R_t, X, t=t, Z=Z)
        out.sum().backward()
        assert Z.grad is None
