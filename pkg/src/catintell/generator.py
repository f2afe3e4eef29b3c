"""U-shaped dense-conv generator shared by the synthesis and restoration models.

Layout: 5x5 input projection -> ``stages`` x (Conv Encoder, stride-2 down conv)
-> bottleneck Dense Conv Blocks -> ``stages`` x (upsample, skip merge, Dense
Conv Block) -> 5x5 output projection.  Encoder stage ``i`` emits a feature of
shape ``H/2^(i+1) x W/2^(i+1) x 2^(i+1)C``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class GeneratorConfig:
    stages: int = 4
    width: int = 32
    blocks_per_encoder_stage: int = 3
    blocks_per_decoder_stage: int = 1
    bottleneck_blocks: int = 3
    kernel_large: int = 5
    # None means depthwise (one group per channel) for the large-kernel convs
    conv_groups: int | None = None
    expansion: int = 4
    global_residual: bool = True
    io_channels: int = 3

    def __post_init__(self):
        if self.stages < 1 or self.width < 1:
            raise ConfigError(f"stages and width must be >= 1 (got {self.stages}, {self.width})")
        if min(self.blocks_per_encoder_stage, self.blocks_per_decoder_stage, self.bottleneck_blocks) < 0:
            raise ConfigError("block counts must be non-negative")
        if self.kernel_large < 1 or self.kernel_large % 2 == 0:
            raise ConfigError("kernel_large must be a positive odd number")
        if self.conv_groups is not None:
            if self.conv_groups < 1 or self.width % self.conv_groups:
                raise ConfigError(f"width {self.width} not divisible by conv_groups {self.conv_groups}")
        if self.expansion < 1:
            raise ConfigError("expansion must be >= 1")
        if self.io_channels != 3:
            raise ConfigError("only 3-channel images are supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


RES_CONFIG = GeneratorConfig(stages=4, width=32)
SYN_CONFIG = GeneratorConfig(stages=3, width=16)


class DenseConvBlock(nn.Module):
    """conv5x5 -> LN -> 1x1 (expand) -> GELU -> 1x1, then a second 5x5 conv over
    the block input concatenated with that branch output.  Spatial size is kept.

    In the depthwise case the second conv (2C -> C, one group per output
    channel) is stored as two depthwise convs, one over the block input and one
    over the branch, whose sum is exactly the grouped conv over the
    interleaved concatenation.
    """

    def __init__(self, dim: int, kernel: int = 5, groups: int | None = None, expansion: int = 4):
        super().__init__()
        g = dim if groups is None else groups
        pad = kernel // 2
        self.conv1 = nn.Conv2d(dim, dim, kernel, padding=pad, groups=g)
        # pointwise part runs channels-last: LN over channels, 1x1 convs as Linear
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pw1 = nn.Linear(dim, expansion * dim)
        self.act = nn.GELU()
        self.pw2 = nn.Linear(expansion * dim, dim)
        self.depthwise = g == dim
        if self.depthwise:
            self.conv2 = nn.Conv2d(dim, dim, kernel, padding=pad, groups=dim)
            self.conv2_branch = nn.Conv2d(dim, dim, kernel, padding=pad, groups=dim, bias=False)
        else:
            self.conv2 = nn.Conv2d(2 * dim, dim, kernel, padding=pad, groups=g)

    def forward(self, x):
        y = self.conv1(x).permute(0, 2, 3, 1)
        y = self.pw2(self.act(self.pw1(self.norm(y)))).permute(0, 3, 1, 2)
        if self.depthwise:
            return self.conv2(x) + self.conv2_branch(y)
        # interleave so every group sees matching input and branch channels
        return self.conv2(torch.stack([x, y], dim=2).flatten(1, 2))


class ConvEncoder(nn.Module):
    """A stack of Dense Conv Blocks wrapped by a residual connection."""

    def __init__(self, dim: int, n_blocks: int, **block_kw):
        super().__init__()
        self.blocks = nn.Sequential(*[DenseConvBlock(dim, **block_kw) for _ in range(n_blocks)])

    def forward(self, x):
        return x + self.blocks(x)


class Upsample(nn.Module):
    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.conv = nn.Conv2d(dim_in, dim_out, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DecoderStage(nn.Module):
    def __init__(self, dim_in: int, dim: int, n_blocks: int, **block_kw):
        super().__init__()
        self.up = Upsample(dim_in, dim)
        self.merge = nn.Conv2d(2 * dim, dim, 1)
        self.blocks = nn.Sequential(*[DenseConvBlock(dim, **block_kw) for _ in range(n_blocks)])

    def forward(self, x, skip):
        x = self.merge(torch.cat([self.up(x), skip], dim=1))
        return self.blocks(x)


class Generator(nn.Module):
    """Operates on NCHW tensors and returns unclamped output (training path)."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c, k = config.width, config.kernel_large
        block_kw = dict(kernel=k, groups=config.conv_groups, expansion=config.expansion)
        self.input_proj = nn.Conv2d(config.io_channels, c, k, padding=k // 2)
        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(config.stages):
            dim = c * 2**i
            self.encoders.append(ConvEncoder(dim, config.blocks_per_encoder_stage, **block_kw))
            self.downs.append(nn.Conv2d(dim, 2 * dim, 2, stride=2))
        deep = c * 2**config.stages
        self.bottleneck = nn.Sequential(
            *[DenseConvBlock(deep, **block_kw) for _ in range(config.bottleneck_blocks)]
        )
        self.decoders = nn.ModuleList(
            DecoderStage(c * 2 ** (i + 1), c * 2**i, config.blocks_per_decoder_stage, **block_kw)
            for i in reversed(range(config.stages))
        )
        self.output_proj = nn.Conv2d(c, config.io_channels, k, padding=k // 2)

    @property
    def multiple(self) -> int:
        return 2**self.config.stages

    def _pad(self, x):
        h, w = x.shape[-2:]
        m = self.multiple
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        return x, h, w

    def encode(self, x):
        """Return the padded input, per-stage skips and downsampled stage features."""
        feat = self.input_proj(x)
        skips, stage_feats = [], []
        for enc, down in zip(self.encoders, self.downs):
            feat = enc(feat)
            skips.append(feat)
            feat = down(feat)
            stage_feats.append(feat)
        return skips, stage_feats

    def forward(self, x):
        x, h, w = self._pad(x)
        # channels-last is markedly faster for depthwise convs on CPU
        x = x.contiguous(memory_format=torch.channels_last)
        skips, stage_feats = self.encode(x)
        feat = self.bottleneck(stage_feats[-1])
        for dec, skip in zip(self.decoders, reversed(skips)):
            feat = dec(feat, skip)
        out = self.output_proj(feat)
        if self.config.global_residual:
            out = out + x
        return out[..., :h, :w]


def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Fan-in scaled uniform init for conv/linear layers from an explicit seed."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = 1.0 / np.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=g)
    return module


def build_generator(config: GeneratorConfig, seed: int = 0) -> Generator:
    if not isinstance(config, GeneratorConfig):
        raise ConfigError(f"expected GeneratorConfig, got {type(config).__name__}")
    model = init_parameters(Generator(config), seed)
    return model.to(memory_format=torch.channels_last)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_nchw(batch) -> torch.Tensor:
    """Accept an NHWC array/tensor (or a single HWC image) and return NCHW float32."""
    t = torch.as_tensor(np.asarray(batch) if not torch.is_tensor(batch) else batch)
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ShapeError(f"expected a B x H x W x 3 batch, got shape {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).float().contiguous()


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()


@torch.no_grad()
def forward(model: Generator, batch) -> np.ndarray:
    """Inference on an NHWC batch; output has the input's shape, clamped to [0, 1]."""
    model.eval()
    out = model(to_nchw(batch)).clamp(0.0, 1.0)
    return to_nhwc(out)


@torch.no_grad()
def encoder_trace(model: Generator, batch) -> list[np.ndarray]:
    """Encoder stage features as NHWC arrays, one per stage."""
    model.eval()
    x, _, _ = model._pad(to_nchw(batch))
    _, stage_feats = model.encode(x)
    return [to_nhwc(f) for f in stage_feats]
