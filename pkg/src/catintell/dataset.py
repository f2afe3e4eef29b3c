"""Corpus scanning, 10-fold partitioning, batch sampling and the pair store."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imaging
from .errors import EmptyCorpusError, NotFoundError, TooFewImagesError

N_FOLDS = 10
MANIFEST_NAME = "pairs.tsv"


@dataclass(frozen=True)
class Corpus:
    root: Path
    hq_paths: tuple[Path, ...]
    cataract_paths: tuple[Path, ...]


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_hq: tuple[Path, ...]
    val_hq: tuple[Path, ...]
    train_cat: tuple[Path, ...]
    val_cat: tuple[Path, ...]


@dataclass(frozen=True)
class PairRecord:
    hq_path: Path
    syn_path: Path


def list_images(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise NotFoundError(f"no such directory: {directory}")
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in imaging.SUPPORTED_EXTENSIONS
    )


def scan_corpus(
    root: str | os.PathLike, hq_subdir: str = "hq", cataract_subdir: str = "cataract"
) -> Corpus:
    root = Path(root)
    if not root.is_dir():
        raise NotFoundError(f"no such corpus root: {root}")
    hq = list_images(root / hq_subdir)
    cat = list_images(root / cataract_subdir)
    for name, paths in ((hq_subdir, hq), (cataract_subdir, cat)):
        if not paths:
            raise EmptyCorpusError(f"no images found in {root / name}")
    return Corpus(root=root, hq_paths=tuple(hq), cataract_paths=tuple(cat))


def fold_sizes(n: int) -> list[int]:
    """Validation block sizes for ``n`` items split ten ways.

    Folds 0-8 take ``round(n / 10)`` items and the last fold takes whatever
    remains, which gives (244 x 9, 240) for 2436 and (114 x 9, 118) for 1144.
    Small corpora where that would starve the last fold fall back to floor.
    """
    if n < N_FOLDS:
        raise TooFewImagesError(f"need at least {N_FOLDS} images per class, got {n}")
    size = (n + 5) // 10
    if size * (N_FOLDS - 1) >= n:
        size = n // N_FOLDS
    return [size] * (N_FOLDS - 1) + [n - size * (N_FOLDS - 1)]


def _partition(paths: Sequence[Path], rng: np.random.Generator) -> list[tuple[Path, ...]]:
    order = rng.permutation(len(paths))
    blocks, start = [], 0
    for size in fold_sizes(len(paths)):
        blocks.append(tuple(paths[i] for i in order[start : start + size]))
        start += size
    return blocks


def make_folds(corpus: Corpus, seed: int) -> list[FoldSplit]:
    hq_blocks = _partition(corpus.hq_paths, np.random.default_rng([seed, 0]))
    cat_blocks = _partition(corpus.cataract_paths, np.random.default_rng([seed, 1]))
    folds = []
    for k in range(N_FOLDS):
        val_hq, val_cat = set(hq_blocks[k]), set(cat_blocks[k])
        folds.append(
            FoldSplit(
                fold_index=k,
                train_hq=tuple(p for p in corpus.hq_paths if p not in val_hq),
                val_hq=hq_blocks[k],
                train_cat=tuple(p for p in corpus.cataract_paths if p not in val_cat),
                val_cat=cat_blocks[k],
            )
        )
    return folds


def full_split(corpus: Corpus) -> FoldSplit:
    """A split that trains on the whole corpus (no validation hold-out)."""
    return FoldSplit(-1, corpus.hq_paths, (), corpus.cataract_paths, ())


@lru_cache(maxsize=128)
def _load_resized(path: str, side: int | None) -> np.ndarray:
    img = imaging.load_image(path)
    if side is not None:
        img = imaging.resize(img, side, side)
    img.setflags(write=False)
    return img


def load_resized(path: str | os.PathLike, side: int | None) -> np.ndarray:
    """Load an image and resize it to ``side x side`` (cached, read-only)."""
    return _load_resized(str(path), side)


def _augmented_patch(img: np.ndarray, patch: int, rng: np.random.Generator) -> np.ndarray:
    out, _ = imaging.random_crop(img, patch, rng)
    return imaging.flip(out, *imaging.random_flip_flags(rng))


def sample_unpaired_batch(
    split: FoldSplit,
    batch: int,
    patch: int,
    rng: np.random.Generator,
    resize_to: int | None = 768,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw independent HQ and cataract patch stacks of shape (batch, patch, patch, 3)."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if not split.train_hq or not split.train_cat:
        raise EmptyCorpusError("unpaired sampling needs both HQ and cataract images")
    hq_idx = rng.integers(0, len(split.train_hq), size=batch)
    cat_idx = rng.integers(0, len(split.train_cat), size=batch)
    hq = [_augmented_patch(load_resized(split.train_hq[i], resize_to), patch, rng) for i in hq_idx]
    cat = [_augmented_patch(load_resized(split.train_cat[i], resize_to), patch, rng) for i in cat_idx]
    return np.stack(hq), np.stack(cat)


def sample_paired_batch(
    records: Sequence[PairRecord],
    batch: int,
    patch: int,
    rng: np.random.Generator,
    resize_to: int | None = 768,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw aligned (hq, degraded) patch stacks; crop and flips are shared per pair."""
    if not records:
        raise EmptyCorpusError("paired sampling needs at least one record")
    hq_out, syn_out = [], []
    for i in rng.integers(0, len(records), size=batch):
        rec = records[i]
        hq = load_resized(rec.hq_path, resize_to)
        syn = load_resized(rec.syn_path, resize_to)
        hq, syn, _ = imaging.paired_random_crop(hq, syn, patch, rng)
        h, v = imaging.random_flip_flags(rng)
        hq_out.append(imaging.flip(hq, h, v))
        syn_out.append(imaging.flip(syn, h, v))
    return np.stack(hq_out), np.stack(syn_out)


def _manifest_path(store: Path) -> Path:
    return store if store.suffix == ".tsv" else store / MANIFEST_NAME


def _rel(path: Path, base: Path) -> str:
    path = Path(os.path.abspath(path))
    try:
        return path.relative_to(os.path.abspath(base)).as_posix()
    except ValueError:
        return str(path)


def write_pairs(store: str | os.PathLike, records: Sequence[PairRecord]) -> Path:
    """Write ``pairs.tsv`` into ``store``; paths inside the store are kept relative."""
    manifest = _manifest_path(Path(store))
    base = manifest.parent
    base.mkdir(parents=True, exist_ok=True)
    lines = [f"{_rel(r.hq_path, base)}\t{_rel(r.syn_path, base)}\n" for r in records]
    tmp = manifest.with_suffix(".tsv.tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    os.replace(tmp, manifest)
    return manifest


def read_pairs(store: str | os.PathLike, validate: bool = True) -> list[PairRecord]:
    manifest = _manifest_path(Path(store))
    if not manifest.is_file():
        raise NotFoundError(f"no pair manifest at {manifest}")
    base = manifest.parent
    records = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        hq, syn = line.split("\t")
        rec = PairRecord(base / hq, base / syn)
        if validate:
            for p in (rec.hq_path, rec.syn_path):
                if not p.is_file():
                    raise NotFoundError(f"manifest {manifest} references missing file {p}")
        records.append(rec)
    return records
