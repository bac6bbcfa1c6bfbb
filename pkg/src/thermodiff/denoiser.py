"""Conditional UNet denoiser.

The thermal input (noisy residual concatenated with the upsampled coarse
field) enters the encoder path alone; external conditioning tokens are
fused via cross-attention in the bottleneck and decoder only. A
channel-concatenation mode (reflectance stacked into the input) and an
unconditioned mode exist as ablations, and a no-diffusion-state variant
serves as the single-pass regression baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import torch
import torch.nn as nn
import torch.nn.functional as F_


CONDITIONING_MODES = ("efm_cross_attention", "channel_concat", "none")
HEAD_MODES = ("epsilon", "x0")


@dataclass(frozen=True)
class DenoiserConfig:
    inner_channels: int = 32
    channel_mult: tuple[int, ...] = (1, 2, 4)
    blocks_per_stage: int = 2
    attn_resolutions: tuple[int, ...] = (16, 32)
    n_heads: int = 4
    norm_groups: int = 8
    head_mode: str = "x0"
    conditioning: str = "efm_cross_attention"
    context_dim: int = 64
    bands: int = 6
    image_size: int = 64
    use_diffusion_state: bool = True  # False for the regression baseline

    def __post_init__(self):
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}")
        for m in self.channel_mult:
            ch = self.inner_channels * m
            if ch % self.n_heads:
                raise ValueError(f"channels {ch} not divisible by n_heads {self.n_heads}")
            if ch % self.norm_groups:
                raise ValueError(f"channels {ch} not divisible by norm_groups {self.norm_groups}")

    @property
    def in_channels(self) -> int:
        base = 2 if self.use_diffusion_state else 1
        if self.conditioning == "channel_concat":
            base += self.bands
        return base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attn_resolutions"] = list(self.attn_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        d["attn_resolutions"] = tuple(d["attn_resolutions"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Raw sinusoidal features of integer timesteps, (B, dim)."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None].to(freqs) * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeMLP(nn.Module):
    """Sinusoidal features projected through a two-layer MLP."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t):
        return self.net(timestep_embedding(t, self.dim))


class ResBlock(nn.Module):
    """GroupNorm/SiLU/conv residual block with the time embedding injected
    as an additive per-channel bias."""

    def __init__(self, in_ch, out_ch, temb_dim, norm_groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(norm_groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F_.silu(self.norm1(x)))
        if self.temb_proj is not None and temb is not None:
            h = h + self.temb_proj(temb)[:, :, None, None]
        h = self.conv2(F_.silu(self.norm2(h)))
        return h + self.skip(x)


def _attention(q, k, v, n_heads):
    """Multi-head scaled dot-product attention over token sequences.

    q: (B, Nq, C), k/v: (B, Nk, C); returns (B, Nq, C).
    """
    B, Nq, C = q.shape
    d_h = C // n_heads
    q = q.reshape(B, Nq, n_heads, d_h).transpose(1, 2)
    k = k.reshape(B, -1, n_heads, d_h).transpose(1, 2)
    v = v.reshape(B, -1, n_heads, d_h).transpose(1, 2)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d_h), dim=-1)
    out = w @ v
    return out.transpose(1, 2).reshape(B, Nq, C)


class SelfAttention2d(nn.Module):
    def __init__(self, channels, n_heads, norm_groups):
        super().__init__()
        self.n_heads = n_heads
        self.norm = nn.GroupNorm(norm_groups, channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        flat = lambda u: u.reshape(B, C, H * W).transpose(1, 2)
        out = _attention(flat(q), flat(k), flat(v), self.n_heads)
        return x + self.proj(out.transpose(1, 2).reshape(B, C, H, W))


class CrossAttention2d(nn.Module):
    """Queries from flattened feature-map positions, keys/values from the
    external token set; output is projected and added back residually."""

    def __init__(self, channels, context_dim, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.proj = nn.Linear(channels, channels)

    def attend(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Pre-residual attention output for (B, N, C) query tokens."""
        q = self.to_q(self.norm(tokens))
        return _attention(q, self.to_k(context), self.to_v(context), self.n_heads)

    def forward(self, x, context):
        B, C, H, W = x.shape
        tokens = x.reshape(B, C, H * W).transpose(1, 2)
        out = self.proj(self.attend(tokens, context))
        return x + out.transpose(1, 2).reshape(B, C, H, W)


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F_.interpolate(x, scale_factor=2, mode="nearest"))


class _DecoderStage(nn.Module):
    def __init__(self, blocks, self_attns, cross_attns, upsample):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.self_attns = nn.ModuleList(self_attns)
        self.cross_attns = nn.ModuleList(cross_attns)
        self.upsample = upsample


class Denoiser(nn.Module):
    """UNet predicting either the added noise or the clean residual.

    Block order at attention sites is residual block, self-attention,
    cross-attention. The encoder path never attends to the context.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        ch = config.inner_channels
        temb_dim = ch * 4 if config.use_diffusion_state else 0
        self.time_mlp = TimeMLP(ch, temb_dim) if config.use_diffusion_state else None
        self.conv_in = nn.Conv2d(config.in_channels, ch, 3, padding=1)

        cross = config.conditioning == "efm_cross_attention"
        g = config.norm_groups

        # Encoder path: residual blocks + downsampling only.
        self.down_stages = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        chans = [ch]
        cur = ch
        res = config.image_size
        self.stage_res = []
        for i, mult in enumerate(config.channel_mult):
            out_ch = config.inner_channels * mult
            blocks = nn.ModuleList()
            for _ in range(config.blocks_per_stage):
                blocks.append(ResBlock(cur, out_ch, temb_dim, g))
                cur = out_ch
                chans.append(cur)
            self.down_stages.append(blocks)
            self.stage_res.append(res)
            if i < len(config.channel_mult) - 1:
                self.downsamples.append(Downsample(cur))
                chans.append(cur)
                res //= 2
        self.bottleneck_res = res

        def make_attn(channels):
            sa = SelfAttention2d(channels, config.n_heads, g)
            ca = CrossAttention2d(channels, config.context_dim, config.n_heads) if cross else None
            return sa, ca

        self.mid_block1 = ResBlock(cur, cur, temb_dim, g)
        self.mid_self_attn, self.mid_cross_attn = make_attn(cur)
        self.mid_block2 = ResBlock(cur, cur, temb_dim, g)

        # Decoder path mirrors the encoder with skip connections; attention
        # only at the configured resolutions.
        self.up_stages = nn.ModuleList()
        for i, mult in reversed(list(enumerate(config.channel_mult))):
            out_ch = config.inner_channels * mult
            res_i = self.stage_res[i]
            blocks, sas, cas = [], [], []
            for _ in range(config.blocks_per_stage + 1):
                blocks.append(ResBlock(cur + chans.pop(), out_ch, temb_dim, g))
                cur = out_ch
                if res_i in config.attn_resolutions:
                    sa, ca = make_attn(cur)
                    sas.append(sa)
                    cas.append(ca if ca is not None else nn.Identity())
                else:
                    sas.append(nn.Identity())
                    cas.append(nn.Identity())
            upsample = Upsample(cur) if i > 0 else None
            self.up_stages.append(_DecoderStage(blocks, sas, cas, upsample))

        self.norm_out = nn.GroupNorm(g, cur)
        self.conv_out = nn.Conv2d(cur, 1, 3, padding=1)

    def forward(self, R_t, X_tilde, t=None, Z=None, S=None):
        cfg = self.config
        if cfg.conditioning == "efm_cross_attention" and Z is None:
            raise ValueError("conditioning tokens Z required in efm_cross_attention mode")
        parts = []
        if cfg.use_diffusion_state:
            if R_t is None or t is None:
                raise ValueError("R_t and t required when use_diffusion_state is set")
            parts.append(R_t)
        parts.append(X_tilde)
        if cfg.conditioning == "channel_concat":
            if S is None:
                raise ValueError("reflectance stack S required in channel_concat mode")
            parts.append(S)
        x = torch.cat(parts, dim=1)
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")

        temb = None
        if cfg.use_diffusion_state:
            t = torch.as_tensor(t, dtype=x.dtype, device=x.device).reshape(-1)
            if t.numel() == 1:
                t = t.expand(x.shape[0])
            temb = self.time_mlp(t)

        h = self.conv_in(x)
        skips = [h]
        for i, blocks in enumerate(self.down_stages):
            for blk in blocks:
                h = blk(h, temb)
                skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
                skips.append(h)

        h = self.mid_block1(h, temb)
        h = self.mid_self_attn(h)
        if self.mid_cross_attn is not None:
            h = self.mid_cross_attn(h, Z)
        h = self.mid_block2(h, temb)

        for stage in self.up_stages:
            for blk, sa, ca in zip(stage.blocks, stage.self_attns, stage.cross_attns):
                h = blk(torch.cat([h, skips.pop()], dim=1), temb)
                if not isinstance(sa, nn.Identity):
                    h = sa(h)
                if not isinstance(ca, nn.Identity):
                    h = ca(h, Z)
            if stage.upsample is not None:
                h = stage.upsample(h)

        out = self.conv_out(F_.silu(self.norm_out(h)))
        if not torch.all(torch.isfinite(out)):
            raise RuntimeError("non-finite activations in denoiser output")
        return out


def cross_attention_weights(q, k, n_heads):
    """Softmax attention weight matrix, exposed for contract tests.

    q: (B, Nq, C), k: (B, Nk, C); returns (B, heads, Nq, Nk).
    """
    B, Nq, C = q.shape
    d_h = C // n_heads
    qh = q.reshape(B, Nq, n_heads, d_h).transpose(1, 2)
    kh = k.reshape(B, -1, n_heads, d_h).transpose(1, 2)
    return torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d_h), dim=-1)
