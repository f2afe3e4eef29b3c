"""Learning-rate schedule, the alternating GAN step and the two training phases.

Phase ``syn`` trains the degradation model on unpaired HQ/cataract patches.
Its checkpoint is then used by :func:`generate_pairs` to build a synthetic
paired set. Phase ``res`` trains the restoration model on that set, and
``res-finetune`` continues it at a lower, linearly decaying rate.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import dataset, imaging
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import FoldSplit, PairRecord
from .discriminator import Discriminator, DiscriminatorConfig, build_discriminator
from .errors import ConfigError, EmptyCorpusError, NumericalError, PhaseError, RangeError
from .generator import Generator, GeneratorConfig, build_generator, to_nchw, to_nhwc
from .losses import PRESETS, LossReport, LossWeights, gan_bce, smooth_l1, weighted_total
from .perceptual import ExtractorConfig, FeatureExtractor, fp_terms

log = logging.getLogger(__name__)

PHASES = ("syn", "res", "res-finetune")
_PHASE_SALT = {"syn": 1, "res": 2, "res-finetune": 3}
LOG_COLUMNS = ("step", "lr", "pixel", "fp", "fp_style", "identity", "gan", "total", "d_loss", "p_real", "p_fake")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 80000
    batch: int = 8
    lr_base: float = 1e-5
    lr_finetune: float = 1e-6
    finetune_iterations: int = 8000
    warmup_iters: int = 1000
    decay: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    patch: int = 256
    resize: int | None = 768
    checkpoint_every: int = 5000
    validate_every: int = 5000
    grad_clip: float | None = 1.0
    soft_target: bool = False
    style_weight: float = 1.0

    def __post_init__(self):
        if self.iterations < 1 or self.batch < 1 or self.patch < 1:
            raise ConfigError("iterations, batch and patch must be >= 1")
        if not 0 <= self.warmup_iters < self.iterations:
            raise ConfigError(f"warmup_iters ({self.warmup_iters}) must be < iterations ({self.iterations})")
        if self.lr_base <= 0 or self.lr_finetune <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.decay not in ("cosine", "linear"):
            raise ConfigError(f"decay must be 'cosine' or 'linear', got {self.decay!r}")
        if self.resize is not None and self.resize < self.patch:
            raise ConfigError(f"resize ({self.resize}) smaller than patch ({self.patch})")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def finetune_schedule(cfg: TrainConfig) -> TrainConfig:
    """Schedule for the fine-tune phase: lr_finetune, linear decay, no warmup."""
    return replace(cfg, iterations=cfg.finetune_iterations, lr_base=cfg.lr_finetune,
                   decay="linear", warmup_iters=0)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``lr_base`` then cosine or linear decay to 0 at ``iterations``."""
    if not 0 <= step <= cfg.iterations:
        raise RangeError(f"step {step} outside [0, {cfg.iterations}]")
    if step < cfg.warmup_iters:
        return cfg.lr_base * step / cfg.warmup_iters
    progress = (step - cfg.warmup_iters) / (cfg.iterations - cfg.warmup_iters)
    if cfg.decay == "cosine":
        return cfg.lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.lr_base * (1.0 - progress)


@dataclass
class TrainState:
    phase: str
    gen: Generator
    disc: Discriminator
    extractor: FeatureExtractor
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    cfg: TrainConfig
    weights: LossWeights
    step: int = 0

    @property
    def schedule(self) -> TrainConfig:
        return finetune_schedule(self.cfg) if self.phase == "res-finetune" else self.cfg


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=0.0, betas=(cfg.beta1, cfg.beta2))


def new_state(
    phase: str,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    cfg: TrainConfig,
    extractor: FeatureExtractor,
    weights: LossWeights | None = None,
) -> TrainState:
    if phase not in PHASES:
        raise PhaseError(f"unknown phase {phase!r}")
    salt = _PHASE_SALT[phase]
    gen = build_generator(gen_cfg, seed=cfg.seed * 1000 + 10 * salt)
    disc = build_discriminator(disc_cfg, seed=cfg.seed * 1000 + 10 * salt + 1)
    extractor.freeze()
    weights = weights or PRESETS["syn" if phase == "syn" else "res"]
    return TrainState(phase, gen, disc, extractor, _adam(gen.parameters(), cfg),
                      _adam(disc.parameters(), cfg), cfg, weights)


def _set_lr(opt, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _clip(params, max_norm: float | None) -> None:
    if max_norm is not None:
        torch.nn.utils.clip_grad_norm_(list(params), max_norm)


def _snapshot(module, opt) -> tuple[dict, dict]:
    clone = lambda d: {k: (v.clone() if torch.is_tensor(v) else v) for k, v in d.items()}
    opt_sd = opt.state_dict()
    opt_state = {i: clone(s) for i, s in opt_sd["state"].items()}
    return clone(module.state_dict()), {"state": opt_state, "param_groups": opt_sd["param_groups"]}


def _restore(module, opt, snap) -> None:
    module.load_state_dict(snap[0])
    opt.load_state_dict(snap[1])


def gan_step(state: TrainState, hq_batch, other_batch, lr: float | None = None) -> tuple[TrainState, LossReport]:
    """One discriminator update followed by one generator update.

    ``other_batch`` is the unpaired cataract batch in phase ``syn`` and the
    degraded twin of ``hq_batch`` in the restoration phases.
    """
    hq, other = to_nchw(hq_batch), to_nchw(other_batch)
    for name, t in (("hq", hq), ("other", other)):
        if not torch.isfinite(t).all():
            raise NumericalError(f"non-finite values in {name} batch at step {state.step}")
    if state.phase == "syn":
        src, real, probe, pixel_ref, fp_ref = hq, other, other, hq, other
    else:
        src, real, probe, pixel_ref, fp_ref = other, hq, hq, hq, hq
    if lr is None:
        lr = lr_at(state.schedule, state.step + 1)
    _set_lr(state.opt_g, lr)
    _set_lr(state.opt_d, lr)
    clip = state.cfg.grad_clip
    gen, disc = state.gen, state.disc
    gen.train()
    disc.train()

    fake = gen(src)

    disc.requires_grad_(True)
    p_real = torch.sigmoid(disc(real))
    p_fake = torch.sigmoid(disc(fake.detach()))
    d_loss = 0.5 * (gan_bce(1.0, p_real) + gan_bce(0.0, p_fake))
    if not torch.isfinite(d_loss):
        raise NumericalError(
            f"non-finite discriminator loss at step {state.step}",
            {"d_loss": float(d_loss.detach()), "p_real": p_real.detach().tolist(), "p_fake": p_fake.detach().tolist()},
        )
    d_snap = _snapshot(disc, state.opt_d)
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    _clip(disc.parameters(), clip)
    state.opt_d.step()

    disc.requires_grad_(False)
    pixel = smooth_l1(fake, pixel_ref)
    fp, fp_style = fp_terms(state.extractor, fake, fp_ref)
    identity = smooth_l1(probe, gen(probe))
    p_out = torch.sigmoid(disc(fake))
    target = torch.sigmoid(disc(real)).detach() if state.cfg.soft_target else 1.0
    gan = gan_bce(target, p_out)
    total = weighted_total(pixel, fp, fp_style, identity, gan, state.weights, state.cfg.style_weight)
    parts = {"pixel": pixel, "fp": fp, "fp_style": fp_style, "identity": identity, "gan": gan, "total": total}
    if not all(torch.isfinite(v) for v in parts.values()):
        _restore(disc, state.opt_d, d_snap)
        disc.requires_grad_(True)
        raise NumericalError(
            f"non-finite generator loss at step {state.step}",
            {k: float(v.detach()) for k, v in parts.items()},
        )
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    _clip(gen.parameters(), clip)
    state.opt_g.step()
    disc.requires_grad_(True)

    state.step += 1
    report = LossReport(
        **{k: float(v.detach()) for k, v in parts.items()},
        d_loss=float(d_loss.detach()), p_real=float(p_real.detach().mean()), p_fake=float(p_fake.detach().mean()), lr=lr,
    )
    return state, report


# --- serialization ---------------------------------------------------------

def _module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _opt_arrays(prefix: str, opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for idx, s in sorted(opt.state_dict()["state"].items()):
        for key in sorted(s):
            out[f"{prefix}/{idx}/{key}"] = torch.as_tensor(s[key]).detach().cpu().numpy()
    return out


def _load_module(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}, strict=True)


def _load_opt(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        idx, key = name.split("/")
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
    opt.load_state_dict({"state": state, "param_groups": opt.state_dict()["param_groups"]})


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    arrays = {}
    arrays.update(_module_arrays("gen", state.gen))
    arrays.update(_module_arrays("disc", state.disc))
    arrays.update(_module_arrays("fp", state.extractor))
    arrays.update(_opt_arrays("opt_g", state.opt_g))
    arrays.update(_opt_arrays("opt_d", state.opt_d))
    config = {
        "generator": state.gen.config.to_dict(),
        "discriminator": state.disc.config.to_dict(),
        "extractor": state.extractor.config.to_dict(),
        "train": state.cfg.to_dict(),
        "loss_weights": state.weights.to_dict(),
    }
    return Checkpoint(config=config, arrays=arrays, step=state.step, phase=state.phase)


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    from .perceptual import build_extractor

    c = ckpt.config
    cfg = TrainConfig.from_dict(c["train"])
    extractor = build_extractor(ExtractorConfig.from_dict(c["extractor"]))
    _load_module(extractor, ckpt.subset("fp"))
    state = new_state(
        ckpt.phase,
        GeneratorConfig.from_dict(c["generator"]),
        DiscriminatorConfig.from_dict(c["discriminator"]),
        cfg,
        extractor,
        LossWeights.from_dict(c["loss_weights"]),
    )
    _load_module(state.gen, ckpt.subset("gen"))
    _load_module(state.disc, ckpt.subset("disc"))
    _load_opt(state.opt_g, ckpt.subset("opt_g"))
    _load_opt(state.opt_d, ckpt.subset("opt_d"))
    state.step = ckpt.step
    return state


def load_generator(ckpt: Checkpoint | str | os.PathLike) -> Generator:
    """Rebuild just the generator of a checkpoint for inference."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    gen = build_generator(GeneratorConfig.from_dict(ckpt.config["generator"]))
    _load_module(gen, ckpt.subset("gen"))
    return gen.eval()


# --- training loops --------------------------------------------------------

class _CsvLog:
    """Append-only training log; rows past ``resume_step`` are dropped on resume."""

    def __init__(self, path: Path, resume_step: int):
        self.path = path
        rows = []
        if resume_step > 0 and path.is_file():
            with open(path, newline="", encoding="utf-8") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= resume_step]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            w.writerows(rows)

    def append(self, step: int, report: LossReport) -> None:
        row = {"step": step, **{k: repr(getattr(report, k)) for k in LOG_COLUMNS if k != "step"}}
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.DictWriter(fh, fieldnames=LOG_COLUMNS).writerow(row)


def step_rng(cfg: TrainConfig, phase: str, step: int) -> np.random.Generator:
    """Data randomness for ``step`` depends only on (seed, phase, step) so resumes replay exactly."""
    return np.random.default_rng([cfg.seed, _PHASE_SALT[phase], step])


def _preview(state: TrainState, images: Sequence[np.ndarray], path: Path) -> None:
    gen = state.gen
    gen.eval()
    with torch.no_grad():
        tiles = [np.concatenate([img, to_nhwc(gen(to_nchw(img)).clamp(0, 1))[0]], axis=1) for img in images]
    gen.train()
    path.parent.mkdir(parents=True, exist_ok=True)
    imaging.save_image(np.concatenate(tiles, axis=0), path)


def run_phase(
    state: TrainState,
    sampler: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
    out_dir: str | os.PathLike,
    ckpt_name: str,
    preview_images: Sequence[np.ndarray] = (),
    stop_at: int | None = None,
    on_step: Callable[[TrainState, LossReport], None] | None = None,
) -> Path:
    """Train until the schedule horizon (or ``stop_at``), checkpointing as configured."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sched = state.schedule
    end = sched.iterations if stop_at is None else min(stop_at, sched.iterations)
    ckpt_path = out_dir / ckpt_name
    train_log = _CsvLog(out_dir / f"{state.phase}_log.csv", state.step)
    while state.step < end:
        hq, other = sampler(step_rng(state.cfg, state.phase, state.step))
        state, report = gan_step(state, hq, other)
        train_log.append(state.step, report)
        if on_step is not None:
            on_step(state, report)
        if state.step % max(1, sched.validate_every) == 0 and preview_images:
            _preview(state, preview_images, out_dir / "previews" / f"{state.phase}_{state.step:06d}.png")
        if state.step % max(1, sched.checkpoint_every) == 0 and state.step < end:
            save_checkpoint(state_to_checkpoint(state), ckpt_path)
        if state.step % 100 == 0:
            log.info("%s step %d total %.5f d_loss %.4f", state.phase, state.step, report.total, report.d_loss)
    save_checkpoint(state_to_checkpoint(state), ckpt_path)
    return ckpt_path


def _previews_from(paths: Sequence[Path], resize: int | None, n: int = 2) -> list[np.ndarray]:
    return [np.array(dataset.load_resized(p, resize)) for p in list(paths)[:n]]


def train_syn(
    split: FoldSplit,
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    extractor: FeatureExtractor,
    out_dir: str | os.PathLike,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    weights: LossWeights | None = None,
    on_step=None,
) -> Path:
    """Phase A: unpaired HQ -> cataract-like training. Returns the checkpoint path."""
    if not split.train_hq or not split.train_cat:
        raise EmptyCorpusError("train_syn needs non-empty HQ and cataract lists")
    if resume is not None:
        if resume.phase != "syn":
            raise PhaseError(f"cannot resume syn training from a {resume.phase!r} checkpoint")
        state = state_from_checkpoint(resume)
    else:
        state = new_state("syn", gen_cfg, disc_cfg, cfg, extractor, weights)
    c = state.cfg
    sampler = lambda rng: dataset.sample_unpaired_batch(split, c.batch, c.patch, rng, c.resize)
    previews = _previews_from(split.val_hq or split.train_hq, c.resize)
    return run_phase(state, sampler, out_dir, "syn.ckpt", previews, stop_at, on_step)


def train_res(
    records: Sequence[PairRecord],
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    extractor: FeatureExtractor,
    out_dir: str | os.PathLike,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    weights: LossWeights | None = None,
    on_step=None,
) -> Path:
    """Phase B: paired (degraded, HQ) training of the restoration model."""
    if not records:
        raise EmptyCorpusError("train_res needs at least one pair")
    if resume is not None:
        if resume.phase != "res":
            raise PhaseError(f"cannot resume res training from a {resume.phase!r} checkpoint")
        state = state_from_checkpoint(resume)
    else:
        state = new_state("res", gen_cfg, disc_cfg, cfg, extractor, weights)
    c = state.cfg
    sampler = lambda rng: dataset.sample_paired_batch(records, c.batch, c.patch, rng, c.resize)
    previews = _previews_from([r.syn_path for r in records], c.resize)
    return run_phase(state, sampler, out_dir, "res.ckpt", previews, stop_at, on_step)


def finetune_res(
    ckpt: Checkpoint,
    records: Sequence[PairRecord],
    out_dir: str | os.PathLike,
    cfg: TrainConfig | None = None,
    stop_at: int | None = None,
    on_step=None,
) -> Path:
    """Continue a restoration checkpoint at ``lr_finetune`` with linear decay.

    A ``res`` checkpoint starts a fresh fine-tune (new optimizer moments, step 0);
    a ``res-finetune`` checkpoint resumes.
    """
    if ckpt.phase not in ("res", "res-finetune"):
        raise PhaseError(f"fine-tuning needs a restoration checkpoint, got phase {ckpt.phase!r}")
    if not records:
        raise EmptyCorpusError("finetune_res needs at least one pair")
    state = state_from_checkpoint(ckpt)
    if cfg is not None:
        state.cfg = cfg
    if ckpt.phase == "res":
        state.phase = "res-finetune"
        state.step = 0
        state.opt_g = _adam(state.gen.parameters(), state.cfg)
        state.opt_d = _adam(state.disc.parameters(), state.cfg)
    c = state.cfg
    sampler = lambda rng: dataset.sample_paired_batch(records, c.batch, c.patch, rng, c.resize)
    previews = _previews_from([r.syn_path for r in records], c.resize)
    return run_phase(state, sampler, out_dir, "res_finetune.ckpt", previews, stop_at, on_step)


def generate_pairs(
    syn_ckpt: Checkpoint,
    hq_paths: Sequence[str | os.PathLike],
    out_dir: str | os.PathLike,
    resize: int | None = None,
) -> Path:
    """Degrade every HQ image with the synthesis model and write the pair store.

    Images are resized to ``resize`` (default: the checkpoint's training
    resize) and both the resized HQ copy and its degraded twin are stored.
    """
    if syn_ckpt.phase != "syn":
        raise PhaseError(f"pair generation needs a syn checkpoint, got phase {syn_ckpt.phase!r}")
    if resize is None:
        resize = syn_ckpt.config["train"].get("resize")
    gen = load_generator(syn_ckpt)
    out_dir = Path(out_dir)
    (out_dir / "hq").mkdir(parents=True, exist_ok=True)
    (out_dir / "syn").mkdir(parents=True, exist_ok=True)
    records = []
    for p in hq_paths:
        p = Path(p)
        img = imaging.load_image(p)
        if resize is not None:
            img = imaging.resize(img, resize, resize)
        with torch.no_grad():
            deg = to_nhwc(gen(to_nchw(img)).clamp(0, 1))[0]
        name = p.stem + ".png"
        hq_out, syn_out = out_dir / "hq" / name, out_dir / "syn" / name
        imaging.save_image(img, hq_out)
        imaging.save_image(deg, syn_out)
        records.append(PairRecord(hq_out, syn_out))
    return dataset.write_pairs(out_dir, records)


def restore_images(gen: Generator, paths: Sequence[str | os.PathLike], out_dir: str | os.PathLike) -> list[Path]:
    """Run a generator over arbitrary-size images, keeping names and sizes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    gen.eval()
    for p in paths:
        p = Path(p)
        img = imaging.load_image(p)
        with torch.no_grad():
            out = to_nhwc(gen(to_nchw(img)).clamp(0, 1))[0]
        dst = out_dir / p.name
        imaging.save_image(out, dst)
        written.append(dst)
    return written
