"""Parametric clouding degradation and a procedural toy fundus corpus.

The degradation is a simple blur-and-veil model,
``t * (img * Gaussian_sigma) + (1 - t) * A``.  It is a stand-in for classic
hand-designed cataract simulators, used for visual comparisons, for labelling
toy quality data and for self-contained smoke tests.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw, ImageFilter
from scipy.ndimage import gaussian_filter

from . import imaging
from .dataset import Corpus
from .perceptual import QUALITY_MANIFEST, QualitySample, write_quality_manifest

# transmission / blur ranges of the three toy severity tiers (light -> heavy)
SEVERITY_TIERS = (
    {"t": (0.72, 0.82), "sigma": (0.5, 1.0)},
    {"t": (0.52, 0.62), "sigma": (1.0, 2.0)},
    {"t": (0.32, 0.42), "sigma": (2.0, 3.0)},
)


@dataclass(frozen=True)
class HazeParams:
    transmission: float = 0.6
    sigma: float = 1.5
    airlight: tuple[float, float, float] = (0.85, 0.8, 0.7)

    def __post_init__(self):
        object.__setattr__(self, "airlight", tuple(float(a) for a in self.airlight))
        if not 0.0 <= self.transmission <= 1.0:
            raise ValueError(f"transmission must be in [0, 1], got {self.transmission}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if len(self.airlight) != 3 or not all(0.0 <= a <= 1.0 for a in self.airlight):
            raise ValueError(f"airlight must be three values in [0, 1], got {self.airlight}")

    @property
    def severity(self) -> str:
        return severity_label(self.transmission)


def severity_label(transmission: float) -> str:
    """Quality label implied by a transmission value."""
    if transmission >= 0.9:
        return "good"
    if transmission >= 0.7:
        return "usable"
    return "reject"


def degrade_traditional(img: np.ndarray, p: HazeParams) -> np.ndarray:
    img = imaging.check_image(img).astype(np.float64)
    if p.sigma > 0:
        img = gaussian_filter(img, sigma=(p.sigma, p.sigma, 0), mode="reflect")
    out = p.transmission * img + (1.0 - p.transmission) * np.asarray(p.airlight)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_fundus(size: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural fundus-like image: an orange retina disc on black with a
    bright optic disc and darker branching vessels."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1) * 2 - 1
    r = np.hypot(yy, xx)
    base = np.array([0.78, 0.36, 0.16]) * rng.uniform(0.85, 1.1, 3)
    shade = np.clip(1.0 - 0.45 * r**2, 0, 1)[..., None]
    img = base * shade

    # optic disc
    cy, cx = rng.uniform(-0.25, 0.25), rng.choice([-1, 1]) * rng.uniform(0.3, 0.45)
    disc = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.09**2))[..., None]
    img = img + disc * (np.array([1.0, 0.92, 0.65]) - img) * 0.9

    # vessels: random walks out of the optic disc, darker and redder
    layer = PILImage.new("L", (size, size), 0)
    draw = ImageDraw.Draw(layer)
    to_px = lambda y, x: ((x + 1) / 2 * (size - 1), (y + 1) / 2 * (size - 1))
    for _ in range(int(rng.integers(6, 10))):
        angle = rng.uniform(0, 2 * np.pi)
        y, x, width = cy, cx, rng.uniform(0.018, 0.03) * size
        pts = [to_px(y, x)]
        for _ in range(int(rng.integers(14, 22))):
            angle += rng.normal(0, 0.25)
            y, x = y + 0.07 * np.sin(angle), x + 0.07 * np.cos(angle)
            pts.append(to_px(y, x))
        draw.line(pts, fill=255, width=max(1, int(round(width))))
        mid = pts[len(pts) // 2]
        branch_angle = angle + rng.choice([-1, 1]) * rng.uniform(0.5, 1.0)
        y, x = (mid[1] / (size - 1)) * 2 - 1, (mid[0] / (size - 1)) * 2 - 1
        bpts = [mid]
        for _ in range(int(rng.integers(6, 10))):
            branch_angle += rng.normal(0, 0.3)
            y, x = y + 0.06 * np.sin(branch_angle), x + 0.06 * np.cos(branch_angle)
            bpts.append(to_px(y, x))
        draw.line(bpts, fill=255, width=max(1, int(round(width * 0.6))))
    layer = layer.filter(ImageFilter.GaussianBlur(radius=max(0.5, size / 256)))
    vessels = (np.asarray(layer, dtype=np.float64) / 255.0)[..., None]
    img = img * (1 - 0.55 * vessels) + vessels * np.array([0.35, 0.05, 0.03]) * 0.3

    # fine choroidal texture
    tex = gaussian_filter(rng.normal(0, 1, (size, size)), 1.5)[..., None]
    img = img * (1 + 0.06 * tex / (tex.std() + 1e-12))

    mask = (r <= 0.95)[..., None]
    return np.clip(img * mask, 0, 1).astype(np.float32)


def random_haze(tier: int, rng: np.random.Generator) -> HazeParams:
    spec = SEVERITY_TIERS[tier]
    airlight = np.clip(np.array([0.85, 0.78, 0.62]) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    return HazeParams(
        transmission=float(rng.uniform(*spec["t"])),
        sigma=float(rng.uniform(*spec["sigma"])),
        airlight=tuple(airlight),
    )


def make_toy_corpus(n: int, seed: int, out_dir: str | os.PathLike, size: int = 128) -> tuple[Corpus, Path]:
    """Render ``n`` HQ images plus one degraded twin per severity tier.

    Layout: ``out_dir/hq/toy_XXX.png``, ``out_dir/cataract/toy_XXX_sK.png`` and
    ``out_dir/quality.tsv`` (HQ labelled good, tiers by transmission).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Path(out_dir)
    (root / "hq").mkdir(parents=True, exist_ok=True)
    (root / "cataract").mkdir(parents=True, exist_ok=True)
    hq_paths, cat_paths, samples = [], [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img = render_fundus(size, rng)
        hq_path = root / "hq" / f"toy_{i:03d}.png"
        imaging.save_image(img, hq_path)
        hq_paths.append(hq_path)
        samples.append(QualitySample(hq_path, "good"))
        for tier in range(len(SEVERITY_TIERS)):
            params = random_haze(tier, rng)
            cat_path = root / "cataract" / f"toy_{i:03d}_s{tier + 1}.png"
            imaging.save_image(degrade_traditional(img, params), cat_path)
            cat_paths.append(cat_path)
            samples.append(QualitySample(cat_path, params.severity))
    manifest = write_quality_manifest(root / QUALITY_MANIFEST, samples)
    corpus = Corpus(root=root, hq_paths=tuple(sorted(hq_paths)), cataract_paths=tuple(sorted(cat_paths)))
    return corpus, manifest


def synthetic_quality_set(
    images: list[np.ndarray], seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Label clean images as good and baseline-degraded copies by severity.

    Used to train the perceptual backbone when no labelled quality data is at hand.
    """
    from .perceptual import QUALITY_LABELS

    rng = np.random.default_rng([seed, 11])
    out, labels = [], []
    for img in images:
        out.append(img)
        labels.append(QUALITY_LABELS.index("good"))
        for tier in range(len(SEVERITY_TIERS)):
            p = random_haze(tier, rng)
            out.append(degrade_traditional(img, p))
            labels.append(QUALITY_LABELS.index(p.severity))
    return np.stack(out), np.array(labels)
