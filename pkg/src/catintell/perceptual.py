"""Fundus perceptual loss: a quality-trained VGG-style extractor plus feature
and Gram-matrix distances."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import imaging
from .errors import ConfigError, DegenerateLabelsError, EmptyCorpusError, ShapeError
from .generator import init_parameters, to_nchw

QUALITY_LABELS = ("good", "usable", "reject")
QUALITY_MANIFEST = "quality.tsv"


@dataclass(frozen=True)
class ExtractorConfig:
    stem_width: int = 16
    # one entry per tapped block; block k runs at stride 4 * 2^k
    widths: tuple[int, ...] = (32, 64, 128, 256)
    convs_per_block: int = 2
    bias: bool = True
    n_classes: int = len(QUALITY_LABELS)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        if not self.widths or min(self.widths) < 1 or self.stem_width < 1 or self.convs_per_block < 1:
            raise ConfigError("extractor widths and conv counts must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown extractor config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class QualitySample:
    path: Path
    quality_label: str

    def __post_init__(self):
        if self.quality_label not in QUALITY_LABELS:
            raise ValueError(f"unknown quality label {self.quality_label!r}")


def _conv_relu(cin: int, cout: int, bias: bool) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, padding=1, bias=bias), nn.ReLU()]


class FeatureExtractor(nn.Module):
    """Reduced VGG: a stride-4 stem followed by one block per tap.

    Taps are the (ReLU'd) outputs of the last conv in each block, at strides
    4, 8, 16, 32 for the default four blocks.
    """

    def __init__(self, config: ExtractorConfig = ExtractorConfig()):
        super().__init__()
        self.config = config
        b, w0 = config.bias, config.stem_width
        self.stem = nn.Sequential(
            *_conv_relu(3, w0, b), nn.MaxPool2d(2), *_conv_relu(w0, w0, b), nn.MaxPool2d(2)
        )
        blocks, cin = [], w0
        for k, width in enumerate(config.widths):
            layers: list[nn.Module] = [nn.MaxPool2d(2)] if k else []
            for j in range(config.convs_per_block):
                layers += _conv_relu(cin if j == 0 else width, width, b)
            blocks.append(nn.Sequential(*layers))
            cin = width
        self.blocks = nn.ModuleList(blocks)
        self.classifier = nn.Linear(cin, config.n_classes)
        self.frozen = False

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return taps

    def forward(self, x):
        return self.classifier(self.features(x)[-1].mean(dim=(2, 3)))

    def freeze(self) -> "FeatureExtractor":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self


def build_extractor(config: ExtractorConfig = ExtractorConfig(), seed: int = 0) -> FeatureExtractor:
    return init_parameters(FeatureExtractor(config), seed)


def read_quality_manifest(path: str | os.PathLike) -> list[QualitySample]:
    path = Path(path)
    base = path.parent
    samples = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rel, label = line.split("\t")
            samples.append(QualitySample(base / rel, label))
    return samples


def write_quality_manifest(path: str | os.PathLike, samples: Sequence[QualitySample]) -> Path:
    path = Path(path)
    base = os.path.abspath(path.parent)
    lines = []
    for s in samples:
        p = os.path.abspath(s.path)
        rel = os.path.relpath(p, base) if p.startswith(base + os.sep) else p
        lines.append(f"{Path(rel).as_posix()}\t{s.quality_label}\n")
    path.write_text("".join(lines), encoding="utf-8")
    return path


def train_on_arrays(
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int = 5,
    seed: int = 0,
    config: ExtractorConfig = ExtractorConfig(),
    batch: int = 8,
    lr: float = 1e-3,
) -> FeatureExtractor:
    """Cross-entropy training on an (N, H, W, 3) stack; returns a frozen extractor."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise EmptyCorpusError("no quality samples to train on")
    if len(np.unique(labels)) < 2:
        raise DegenerateLabelsError("quality training needs at least two distinct labels")
    model = build_extractor(config, seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    x_all = to_nchw(images)
    y_all = torch.as_tensor(labels)
    rng = np.random.default_rng([seed, 7])
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch):
            idx = torch.as_tensor(order[start : start + batch])
            loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.freeze()


def train_quality_backbone(
    samples: Sequence[QualitySample],
    epochs: int = 5,
    seed: int = 0,
    config: ExtractorConfig = ExtractorConfig(),
    image_size: int = 64,
    lr: float = 1e-3,
) -> FeatureExtractor:
    if not samples:
        raise EmptyCorpusError("no quality samples to train on")
    if len({s.quality_label for s in samples}) < 2:
        raise DegenerateLabelsError("quality training needs at least two distinct labels")
    images = np.stack([imaging.resize(imaging.load_image(s.path), image_size, image_size) for s in samples])
    labels = np.array([QUALITY_LABELS.index(s.quality_label) for s in samples])
    return train_on_arrays(images, labels, epochs=epochs, seed=seed, config=config, lr=lr)


@torch.no_grad()
def classify(ex: FeatureExtractor, batch) -> np.ndarray:
    ex.eval()
    return ex(to_nchw(batch)).argmax(dim=1).numpy()


@torch.no_grad()
def extract_features(ex: FeatureExtractor, img: np.ndarray) -> list[np.ndarray]:
    """Feature maps (H_f, W_f, C_f) at every tap for a single image."""
    ex.eval()
    imaging.check_image(img)
    return [f[0].permute(1, 2, 0).numpy() for f in ex.features(to_nchw(img))]


def gram(f) -> np.ndarray | torch.Tensor:
    """Gram matrix of a feature map normalised by its spatial size.

    Accepts an (H, W, C) array, returning (C, C), or an NCHW tensor, returning
    (N, C, C).
    """
    if torch.is_tensor(f):
        n, c, h, w = f.shape
        flat = f.reshape(n, c, h * w)
        return flat @ flat.transpose(1, 2) / (h * w)
    f = np.asarray(f, dtype=np.float64)
    h, w, c = f.shape
    flat = f.reshape(h * w, c)
    return flat.T @ flat / (h * w)


def fp_terms(ex: FeatureExtractor, out: torch.Tensor, ref: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable (perceptual, style) terms for NCHW batches.

    Each tap contributes the mean squared feature difference and the mean
    squared difference of Gram matrices; taps are weighted equally.
    """
    if out.shape != ref.shape:
        raise ShapeError(f"fp loss inputs differ in shape: {tuple(out.shape)} vs {tuple(ref.shape)}")
    fo, fr = ex.features(out), ex.features(ref)
    perceptual = torch.stack([(a - b).pow(2).mean() for a, b in zip(fo, fr)]).mean()
    style = torch.stack([(gram(a) - gram(b)).pow(2).mean() for a, b in zip(fo, fr)]).mean()
    return perceptual, style


@torch.no_grad()
def fp_loss(ex: FeatureExtractor, out: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    out, ref = np.asarray(out), np.asarray(ref)
    if out.shape != ref.shape:
        raise ShapeError(f"fp loss inputs differ in shape: {out.shape} vs {ref.shape}")
    ex.eval()
    p, s = fp_terms(ex, to_nchw(out), to_nchw(ref))
    return float(p), float(s)
