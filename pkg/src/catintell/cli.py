"""Command-line entry point: ``catintell <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import baseline, config, dataset, imaging, metrics, perceptual, trainer
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import CatintellError

log = logging.getLogger("catintell")


def _common(p: argparse.ArgumentParser, training: bool = False) -> None:
    p.add_argument("--config", type=Path, default=None, help="nested YAML config file (default: none)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: config value, 0)")
    p.add_argument("--profile", choices=config.PROFILES, default=None,
                   help="preset: full-scale or CPU desk-scale (default: config value, full)")
    if training:
        p.add_argument("--iters", type=int, default=None,
                       help="training iterations for this phase (default: profile value)")
        p.add_argument("--fp-ckpt", type=Path, default=None,
                       help="perceptual extractor checkpoint (default: train one)")
        p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from (default: none)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catintell", description="Cataract fundus synthesis and restoration.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="render a procedural toy corpus")
    p.add_argument("--output", type=Path, required=True, help="corpus root to create")
    p.add_argument("--n", type=int, default=20, help="number of HQ images (default: 20)")
    p.add_argument("--size", type=int, default=128, help="image side in pixels (default: 128)")
    _common(p)

    p = sub.add_parser("train-syn", help="train the degradation model on unpaired data")
    p.add_argument("--data", type=Path, required=True, help="corpus root with hq/ and cataract/")
    p.add_argument("--output", type=Path, required=True, help="run directory")
    p.add_argument("--fold", type=int, default=None, help="train on fold K of the 10-fold split (default: all)")
    _common(p, training=True)

    p = sub.add_parser("synthesize", help="degrade HQ images with a syn checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help="syn checkpoint")
    p.add_argument("--input", type=Path, required=True, help="directory of HQ images")
    p.add_argument("--output", type=Path, required=True, help="pair store directory")
    p.add_argument("--resize", type=int, default=None, help="square size (default: checkpoint's training resize)")
    _common(p)

    p = sub.add_parser("train-res", help="train the restoration model on synthetic pairs")
    p.add_argument("--pairs", type=Path, required=True, help="pair store directory or pairs.tsv")
    p.add_argument("--output", type=Path, required=True, help="run directory")
    _common(p, training=True)

    p = sub.add_parser("finetune-res", help="fine-tune a restoration checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help="res checkpoint")
    p.add_argument("--pairs", type=Path, required=True, help="pair store directory or pairs.tsv")
    p.add_argument("--output", type=Path, required=True, help="run directory")
    _common(p, training=True)

    p = sub.add_parser("restore", help="restore a directory of images of any size")
    p.add_argument("--input", type=Path, required=True, help="directory of images")
    p.add_argument("--ckpt", type=Path, required=True, help="res (or res-finetune) checkpoint")
    p.add_argument("--output", type=Path, required=True, help="output directory")
    _common(p)

    p = sub.add_parser("evaluate", help="PSNR/SSIM of predictions against targets")
    p.add_argument("--pred", type=Path, required=True, help="directory of predictions")
    p.add_argument("--target", type=Path, required=True, help="directory of same-named targets")
    p.add_argument("--output", type=Path, default=None, help="where to write report.csv/report.txt (default: --pred)")
    _common(p)

    p = sub.add_parser("degrade-baseline", help="apply the parametric clouding model")
    p.add_argument("--input", type=Path, required=True, help="directory of images")
    p.add_argument("--output", type=Path, required=True, help="output directory")
    p.add_argument("--transmission", type=float, default=0.6, help="blend factor t in [0, 1] (default: 0.6)")
    p.add_argument("--sigma", type=float, default=1.5, help="Gaussian blur sigma in pixels (default: 1.5)")
    p.add_argument("--airlight", type=float, nargs=3, default=(0.85, 0.8, 0.7), metavar=("R", "G", "B"),
                   help="veil colour (default: 0.85 0.8 0.7)")
    _common(p)
    return parser


def _document(args, phase: str | None = None) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if phase and getattr(args, "iters", None) is not None:
        key = "finetune_iterations" if phase == "res-finetune" else "iterations"
        section = "res" if phase == "res-finetune" else phase
        overrides[section] = {"train": {key: args.iters}}
        if key == "iterations":
            # keep warmup valid for very short runs
            overrides[section]["train"]["warmup_iters"] = min(
                config.resolve(args.config, args.profile)["train"]["warmup_iters"], max(0, args.iters - 1)
            )
    return config.resolve(args.config, args.profile, overrides)


def _run_dir(out: Path, doc: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    config.dump_document(doc, out / "config.yaml")
    logger = logging.getLogger("catintell")
    # one run log at a time when run() is called repeatedly in-process
    for old in [h for h in logger.handlers if isinstance(h, logging.FileHandler)]:
        logger.removeHandler(old)
        old.close()
    handler = logging.FileHandler(out / "run.log", mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)
    return out


def _extractor(args, doc: dict, out: Path, images_for_labels) -> perceptual.FeatureExtractor:
    """Load ``--fp-ckpt`` or train the quality backbone and save it as ``fp.ckpt``."""
    ex_cfg = config.extractor_config(doc)
    pcfg = doc["perceptual"]
    if args.fp_ckpt is not None:
        ck = load_checkpoint(args.fp_ckpt)
        ex = perceptual.build_extractor(perceptual.ExtractorConfig.from_dict(ck.config["extractor"]))
        ex.load_state_dict({k: torch.from_numpy(v) for k, v in ck.arrays.items()})
        return ex.freeze()
    quality = images_for_labels()
    size = pcfg["image_size"]
    if isinstance(quality, Path):
        log.info("training perceptual backbone on %s", quality)
        ex = perceptual.train_quality_backbone(
            perceptual.read_quality_manifest(quality), epochs=pcfg["epochs"], seed=doc["seed"],
            config=ex_cfg, image_size=size, lr=pcfg["lr"],
        )
    else:
        log.info("training perceptual backbone on %d baseline-labelled images", len(quality))
        imgs = [imaging.resize(imaging.load_image(p), size, size) for p in quality]
        x, y = baseline.synthetic_quality_set(imgs, doc["seed"])
        ex = perceptual.train_on_arrays(x, y, epochs=pcfg["epochs"], seed=doc["seed"], config=ex_cfg, lr=pcfg["lr"])
    arrays = {k: v.detach().numpy() for k, v in ex.state_dict().items()}
    save_checkpoint(Checkpoint({"extractor": ex_cfg.to_dict()}, arrays, 0, "fp"), out / "fp.ckpt")
    return ex


def cmd_make_toy(args) -> None:
    doc = _document(args)
    corpus, manifest = baseline.make_toy_corpus(args.n, doc["seed"], args.output, size=args.size)
    print(f"wrote {len(corpus.hq_paths)} HQ and {len(corpus.cataract_paths)} degraded images; labels in {manifest}")


def cmd_train_syn(args) -> None:
    doc = _document(args, "syn")
    corpus = dataset.scan_corpus(args.data, doc["data"]["hq_subdir"], doc["data"]["cataract_subdir"])
    fold = args.fold if args.fold is not None else doc["data"]["fold"]
    split = dataset.make_folds(corpus, doc["seed"])[fold] if fold is not None else dataset.full_split(corpus)
    out = _run_dir(args.output, doc)

    def labels():
        q = corpus.root / perceptual.QUALITY_MANIFEST
        return q if q.is_file() else list(split.train_hq)

    resume = load_checkpoint(args.resume) if args.resume else None
    ex = None if resume else _extractor(args, doc, out, labels)
    path = trainer.train_syn(
        split, config.train_config(doc, "syn"), config.generator_config(doc, "syn"),
        config.discriminator_config(doc, "syn"), ex, out, resume=resume, weights=config.loss_weights(doc, "syn"),
    )
    print(f"syn checkpoint: {path}")


def cmd_synthesize(args) -> None:
    doc = _document(args)
    ckpt = load_checkpoint(args.ckpt)
    hq = dataset.list_images(args.input)
    manifest = trainer.generate_pairs(ckpt, hq, args.output, resize=args.resize)
    config.dump_document(doc, Path(args.output) / "config.yaml")
    print(f"wrote {len(hq)} pairs; manifest {manifest}")


def cmd_train_res(args) -> None:
    doc = _document(args, "res")
    records = dataset.read_pairs(args.pairs)
    out = _run_dir(args.output, doc)
    resume = load_checkpoint(args.resume) if args.resume else None
    ex = None if resume else _extractor(args, doc, out, lambda: [r.hq_path for r in records])
    path = trainer.train_res(
        records, config.train_config(doc, "res"), config.generator_config(doc, "res"),
        config.discriminator_config(doc, "res"), ex, out, resume=resume, weights=config.loss_weights(doc, "res"),
    )
    print(f"res checkpoint: {path}")


def cmd_finetune_res(args) -> None:
    doc = _document(args, "res-finetune")
    records = dataset.read_pairs(args.pairs)
    out = _run_dir(args.output, doc)
    ckpt = load_checkpoint(args.resume or args.ckpt)
    cfg = config.train_config(doc, "res")
    path = trainer.finetune_res(ckpt, records, out, cfg=cfg)
    print(f"fine-tuned checkpoint: {path}")


def cmd_restore(args) -> None:
    _document(args)
    gen = trainer.load_generator(args.ckpt)
    written = trainer.restore_images(gen, dataset.list_images(args.input), args.output)
    print(f"restored {len(written)} images into {args.output}")


def cmd_evaluate(args) -> None:
    _document(args)
    report = metrics.evaluate(args.pred, args.target, args.output or args.pred)
    print(report.summary(), end="")


def cmd_degrade_baseline(args) -> None:
    _document(args)
    params = baseline.HazeParams(args.transmission, args.sigma, tuple(args.airlight))
    args.output.mkdir(parents=True, exist_ok=True)
    paths = dataset.list_images(args.input)
    for p in paths:
        imaging.save_image(baseline.degrade_traditional(imaging.load_image(p), params), args.output / p.name)
    print(f"degraded {len(paths)} images into {args.output}")


COMMANDS = {
    "make-toy": cmd_make_toy,
    "train-syn": cmd_train_syn,
    "synthesize": cmd_synthesize,
    "train-res": cmd_train_res,
    "finetune-res": cmd_finetune_res,
    "restore": cmd_restore,
    "evaluate": cmd_evaluate,
    "degrade-baseline": cmd_degrade_baseline,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger("catintell").setLevel(logging.INFO)
    try:
        COMMANDS[args.command](args)
    except CatintellError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
