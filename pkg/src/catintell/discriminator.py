"""Lightweight windowed self-attention discriminator.

Patch embedding, then ``stages`` stages of Window-based Self-attention Blocks
(pairs of regular/shifted windows) with patch merging in between, global
average pooling and a single-logit head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .generator import init_parameters, to_nchw


@dataclass(frozen=True)
class DiscriminatorConfig:
    stages: int = 4
    embed_dim: int = 32
    window: int = 8
    heads_per_stage: tuple[int, ...] = (1, 2, 4, 8)
    patch_embed: int = 4
    blocks_per_stage: int = 2
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "heads_per_stage", tuple(self.heads_per_stage))
        if self.stages < 1 or self.embed_dim < 1 or self.window < 1 or self.patch_embed < 1:
            raise ConfigError("stages, embed_dim, window and patch_embed must be >= 1")
        if self.blocks_per_stage < 1:
            raise ConfigError("each stage needs at least one block")
        if len(self.heads_per_stage) != self.stages:
            raise ConfigError(
                f"heads_per_stage has {len(self.heads_per_stage)} entries for {self.stages} stages"
            )
        for s, heads in enumerate(self.heads_per_stage):
            dim = self.embed_dim * 2**s
            if heads < 1 or dim % heads:
                raise ConfigError(f"stage {s}: {heads} heads do not divide {dim} channels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads_per_stage"] = list(self.heads_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown discriminator config keys: {sorted(unknown)}")
        return cls(**d)


RES_DISC_CONFIG = DiscriminatorConfig(embed_dim=32)
SYN_DISC_CONFIG = DiscriminatorConfig(embed_dim=16)


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, ws * ws, C)."""
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.view(-1, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, h, w, c)


def _window_mask(hp: int, wp: int, h: int, w: int, ws: int, shift: int) -> torch.Tensor | None:
    """Additive attention mask (nW, N, N) for shifted regions and padded keys."""
    if shift == 0 and hp == h and wp == w:
        return None
    labels = torch.zeros(1, hp, wp, 1)
    if shift:
        cuts = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
        region = 0
        for hs in cuts:
            for wsl in cuts:
                labels[:, hs, wsl, :] = region
                region += 1
    valid = torch.zeros(1, hp, wp, 1)
    valid[:, :h, :w] = 1.0
    if shift:
        valid = torch.roll(valid, shifts=(-shift, -shift), dims=(1, 2))
    lab = window_partition(labels, ws).squeeze(-1)
    val = window_partition(valid, ws).squeeze(-1) > 0
    n = ws * ws
    allowed = (lab[:, :, None] == lab[:, None, :]) & (val[:, None, :] | torch.eye(n, dtype=torch.bool))
    mask = torch.zeros(allowed.shape)
    return mask.masked_fill(~allowed, float("-inf"))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside windows with a learned relative position bias."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))

    def relative_index(self, ws: int) -> torch.Tensor:
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + (self.window - 1)
        return rel[0] * (2 * self.window - 1) + rel[1]

    def forward(self, x, ws: int, mask=None):
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.relative_index(ws).reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0).to(attn.dtype)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None].to(attn.dtype)
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class WindowBlock(nn.Module):
    """Pre-norm window attention and MLP, each wrapped by a residual."""

    def __init__(self, dim: int, heads: int, window: int, shifted: bool, mlp_ratio: int = 4):
        super().__init__()
        self.window = window
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x):
        b, h, w, c = x.shape
        ws = min(self.window, h, w)
        shift = ws // 2 if self.shifted and min(h, w) > ws else 0
        y = self.norm1(x)
        ph, pw = (-h) % ws, (-w) % ws
        if ph or pw:
            y = F.pad(y, (0, 0, 0, pw, 0, ph))
        hp, wp = h + ph, w + pw
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
        mask = _window_mask(hp, wp, h, w, ws, shift)
        y = self.attn(window_partition(y, ws), ws, mask)
        y = window_reverse(y, ws, hp, wp)
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        x = x + y[:, :h, :w]
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Concatenate 2x2 neighbourhoods and project 4C -> 2C (halves the grid)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        _, h, w, _ = x.shape
        if h % 2 or w % 2:
            x = F.pad(x, (0, 0, 0, w % 2, 0, h % 2))
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x))


class Discriminator(nn.Module):
    """NCHW image batch -> one realness logit per image."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        p, c = config.patch_embed, config.embed_dim
        self.patch_embed = nn.Conv2d(3, c, p, stride=p)
        self.embed_norm = nn.LayerNorm(c)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for s in range(config.stages):
            dim = c * 2**s
            self.stages.append(
                nn.Sequential(
                    *[
                        WindowBlock(dim, config.heads_per_stage[s], config.window, shifted=bool(j % 2),
                                    mlp_ratio=config.mlp_ratio)
                        for j in range(config.blocks_per_stage)
                    ]
                )
            )
            if s < config.stages - 1:
                self.merges.append(PatchMerging(dim))
        last = c * 2 ** (config.stages - 1)
        self.norm = nn.LayerNorm(last)
        self.head = nn.Linear(last, 1)

    def tokens(self, x) -> list[torch.Tensor]:
        """Per-stage token grids (B, H_s, W_s, C_s)."""
        p = self.config.patch_embed
        h, w = x.shape[-2:]
        if h % p or w % p:
            x = F.pad(x, (0, (-w) % p, 0, (-h) % p))
        x = self.embed_norm(self.patch_embed(x).permute(0, 2, 3, 1))
        grids = []
        for s, stage in enumerate(self.stages):
            x = stage(x)
            grids.append(x)
            if s < len(self.merges):
                x = self.merges[s](x)
        return grids

    def forward(self, x):
        feat = self.tokens(x)[-1].mean(dim=(1, 2))
        return self.head(self.norm(feat)).squeeze(-1)


def build_discriminator(config: DiscriminatorConfig, seed: int = 0, zero_head: bool = False) -> Discriminator:
    if not isinstance(config, DiscriminatorConfig):
        raise ConfigError(f"expected DiscriminatorConfig, got {type(config).__name__}")
    model = init_parameters(Discriminator(config), seed)
    if zero_head:
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
    return model


@torch.no_grad()
def predict(model: Discriminator, batch) -> np.ndarray:
    """Realness probabilities for an NHWC batch, one per image."""
    model.eval()
    return torch.sigmoid(model(to_nchw(batch))).double().numpy()
