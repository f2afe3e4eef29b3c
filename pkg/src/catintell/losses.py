"""Pixel, identity, adversarial and composite generator objectives."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, NumericalError, ShapeError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_pixel: float
    w_fp: float
    w_identity: float
    w_gan: float

    def __post_init__(self):
        if min(self.w_pixel, self.w_fp, self.w_identity, self.w_gan) < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "syn": LossWeights(w_pixel=0.01, w_fp=1.0, w_identity=0.1, w_gan=0.1),
    "res": LossWeights(w_pixel=1.0, w_fp=0.1, w_identity=0.01, w_gan=0.1),
}


@dataclass(frozen=True)
class LossReport:
    pixel: float
    fp: float
    fp_style: float
    identity: float
    gan: float
    total: float
    d_loss: float = 0.0
    p_real: float = math.nan
    p_fake: float = math.nan
    lr: float = math.nan


def _as_tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def smooth_l1(a, b) -> torch.Tensor:
    """Mean SmoothL1: 0.5 d^2 where |d| < 1, |d| - 0.5 elsewhere."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"smooth_l1 inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = (a - b).abs()
    return torch.where(d < 1.0, 0.5 * d * d, d - 0.5).mean()


def identity_loss(gen: Callable, img) -> torch.Tensor:
    """SmoothL1 between ``img`` and ``gen(img)``; ``gen`` is the raw (unclamped) mapping."""
    img = _as_tensor(img)
    return smooth_l1(img, gen(img))


def gan_bce(p_target, p_out) -> torch.Tensor:
    """Mean binary cross-entropy with ``p_out`` clamped to [eps, 1 - eps]."""
    t, p = _as_tensor(p_target), _as_tensor(p_out)
    p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)
    t = torch.broadcast_to(t.to(p.dtype), p.shape)
    return -(t * torch.log(p) + (1.0 - t) * torch.log1p(-p)).mean()


def weighted_total(pixel, fp, fp_style, identity, gan, weights: LossWeights, style_weight: float = 1.0):
    return (
        weights.w_pixel * pixel
        + weights.w_fp * (fp + style_weight * fp_style)
        + weights.w_identity * identity
        + weights.w_gan * gan
    )


def composite(components: dict, weights: LossWeights | str, style_weight: float = 1.0) -> LossReport:
    """Combine scalar components (pixel, fp, fp_style, identity, gan) into a report."""
    if isinstance(weights, str):
        weights = PRESETS[weights]
    vals = {k: float(components.get(k, 0.0)) for k in ("pixel", "fp", "fp_style", "identity", "gan")}
    bad = [k for k, v in vals.items() if not math.isfinite(v)]
    if bad:
        raise NumericalError(f"non-finite loss components: {bad}")
    return LossReport(total=weighted_total(**vals, weights=weights, style_weight=style_weight), **vals)
