"""Frozen reflectance encoder: a small vision transformer, optionally
pretrained with a masked-autoencoder objective on synthetic reflectance,
then used as a fixed feature extractor producing the conditioning tokens.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class EncoderConfig:
    img_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    n_heads: int = 4
    bands: int = 6
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.img_size % self.patch_size:
            raise ValueError(f"img_size {self.img_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid**2


def sincos_pos_embed_2d(dim: int, grid: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal positional encoding, (grid*grid, dim), row-major."""
    if dim % 4:
        raise ValueError("embed dim must be divisible by 4")
    d = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(d, dtype=np.float64) / d))
    pos = np.arange(grid, dtype=np.float64)
    out = pos[:, None] * omega[None, :]  # (grid, d)
    enc_1d = np.concatenate([np.sin(out), np.cos(out)], axis=1)  # (grid, dim/2)
    yy = np.repeat(enc_1d, grid, axis=0)  # row index varies slowly
    xx = np.tile(enc_1d, (grid, 1))
    return torch.from_numpy(np.concatenate([yy, xx], axis=1)).float()


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ReflectanceEncoder(nn.Module):
    """ViT over non-overlapping reflectance patches; outputs one token per
    patch (no class token), row-major over the patch grid."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        p, c = config.patch_size, config.bands
        self.patch_embed = nn.Linear(p * p * c, config.embed_dim)
        self.register_buffer("pos_embed", sincos_pos_embed_2d(config.embed_dim, config.grid))
        self.blocks = nn.ModuleList(
            TransformerBlock(config.embed_dim, config.n_heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        self.frozen = False

    def patchify(self, S: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, N, p*p*C) flat patches, row-major grid order."""
        B, C, H, W = S.shape
        p = self.config.patch_size
        if H % p or W % p:
            raise ValueError(f"input {H}x{W} not divisible by patch size {p}")
        x = S.reshape(B, C, H // p, p, W // p, p)
        return x.permute(0, 2, 4, 3, 5, 1).reshape(B, (H // p) * (W // p), p * p * C)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        B, N, _ = tokens.shape
        p, c, g = self.config.patch_size, self.config.bands, self.config.grid
        x = tokens.reshape(B, g, g, p, p, c)
        return x.permute(0, 5, 1, 3, 2, 4).reshape(B, c, g * p, g * p)

    def tokens(self, S: torch.Tensor) -> torch.Tensor:
        """Patch tokens with positional encoding, before the blocks."""
        return self.patch_embed(self.patchify(S)) + self.pos_embed

    def forward(self, S: torch.Tensor) -> torch.Tensor:
        x = self.tokens(S)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def embed(S: np.ndarray | torch.Tensor, encoder: ReflectanceEncoder) -> np.ndarray:
    """Deterministic embedding of one normalized (C, H, W) reflectance
    stack into an (N, d) token matrix."""
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(S), dtype=torch.float32).unsqueeze(0)
        return encoder(x).squeeze(0).numpy()


def embed_batch(S: torch.Tensor, encoder: ReflectanceEncoder) -> torch.Tensor:
    """(B, C, H, W) -> (B, N, d), no gradient into the encoder."""
    with torch.no_grad():
        return encoder(S)


def freeze(encoder: ReflectanceEncoder) -> ReflectanceEncoder:
    """Disable gradients and put the encoder into eval mode; downstream
    training must leave its parameter checksum unchanged."""
    encoder.requires_grad_(False)
    encoder.eval()
    encoder.frozen = True
    return encoder


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class MAEDecoder(nn.Module):
    """Lightweight decoder used only during pretraining, then discarded."""

    def __init__(self, config: EncoderConfig, dim: int = 32, depth: int = 2, n_heads: int = 4):
        super().__init__()
        self.embed = nn.Linear(config.embed_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.register_buffer("pos_embed", sincos_pos_embed_2d(dim, config.grid))
        self.blocks = nn.ModuleList(TransformerBlock(dim, n_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        p, c = config.patch_size, config.bands
        self.pred = nn.Linear(dim, p * p * c)

    def forward(self, latent, ids_restore):
        x = self.embed(latent)
        B, n_vis, d = x.shape
        n = ids_restore.shape[1]
        mask_tokens = self.mask_token.expand(B, n - n_vis, d)
        x = torch.cat([x, mask_tokens], dim=1)
        x = torch.gather(x, 1, ids_restore.unsqueeze(-1).expand(-1, -1, d))
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))


def _random_masking(x, mask_ratio, gen):
    B, N, d = x.shape
    n_keep = max(1, int(round(N * (1.0 - mask_ratio))))
    noise = torch.rand(B, N, generator=gen)
    ids_shuffle = torch.argsort(noise, dim=1)
    ids_restore = torch.argsort(ids_shuffle, dim=1)
    ids_keep = ids_shuffle[:, :n_keep]
    x_vis = torch.gather(x, 1, ids_keep.unsqueeze(-1).expand(-1, -1, d))
    mask = torch.ones(B, N)
    mask.scatter_(1, ids_keep, 0.0)  # 1 = masked
    return x_vis, mask, ids_restore


def masked_reconstruction_loss(encoder, decoder, S, mask_ratio, gen):
    """MSE on masked patches only. Also returns the mask for baselines."""
    target = encoder.patchify(S)
    tokens = encoder.tokens(S)
    x_vis, mask, ids_restore = _random_masking(tokens, mask_ratio, gen)
    for blk in encoder.blocks:
        x_vis = blk(x_vis)
    pred = decoder(encoder.norm(x_vis), ids_restore)
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    loss = (per_patch * mask).sum() / mask.sum()
    return loss, mask


def mae_pretrain(
    dataset: np.ndarray,
    config: EncoderConfig,
    mask_ratio: float = 0.75,
    steps: int = 2000,
    batch_size: int = 8,
    lr: float = 1e-3,
    seed: int = 0,
) -> ReflectanceEncoder:
    """Pretrain an encoder on (N, C, H, W) reflectance stacks with the
    masked-autoencoder objective; the decoder is discarded. Seeded and
    reproducible on a single worker."""
    if not (0.0 < mask_ratio < 1.0):
        raise ValueError(f"mask_ratio must be in (0,1), got {mask_ratio}")
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError(f"expected a nonempty (N, C, H, W) array, got shape {data.shape}")

    torch.manual_seed(seed)
    encoder = ReflectanceEncoder(config)
    decoder = MAEDecoder(config)
    gen = torch.Generator().manual_seed(seed + 1)
    rng = np.random.default_rng(seed + 2)
    opt = torch.optim.Adam(list(encoder.parameters()) + list(decoder.parameters()), lr=lr)

    for step in range(steps):
        idx = rng.integers(0, data.shape[0], size=min(batch_size, data.shape[0]))
        S = torch.from_numpy(data[idx])
        loss, _ = masked_reconstruction_loss(encoder, decoder, S, mask_ratio, gen)
        if not torch.isfinite(loss):
            raise RuntimeError(f"pretraining diverged at step {step}: loss={loss.item()}")
        opt.zero_grad()
        loss.backward()
        opt.step()
    return encoder


def save_encoder(path: str | Path, encoder: ReflectanceEncoder):
    path = Path(path)
    state = {k: v.numpy() for k, v in encoder.state_dict().items()}
    np.savez(path, **state)
    manifest = dict(asdict(encoder.config), frozen=encoder.frozen)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))


def load_encoder(path: str | Path) -> ReflectanceEncoder:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    frozen = manifest.pop("frozen", False)
    config = EncoderConfig(**manifest)
    encoder = ReflectanceEncoder(config)
    with np.load(path if path.suffix == ".npz" else str(path) + ".npz") as z:
        state = {k: torch.from_numpy(z[k]) for k in z.files}
    expected = {k: tuple(v.shape) for k, v in encoder.state_dict().items()}
    got = {k: tuple(v.shape) for k, v in state.items()}
    if expected != got:
        raise ValueError("stored weights do not match encoder config")
    encoder.load_state_dict(state)
    if frozen:
        freeze(encoder)
    return encoder
