"""Single-file checkpoint container.

Layout::

    b"CATCKPT1" | uint64 LE header length | JSON header | raw array bytes

The header holds the config document, step, phase and a manifest of named
arrays (name, dtype, shape, byte offset into the data section, byte count).
Header JSON is written with sorted keys so save -> load -> save is byte-stable.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DecodeError, NotFoundError

MAGIC = b"CATCKPT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    step: int
    phase: str
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix/`` with the prefix stripped."""
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    manifest, blobs, offset = [], [], 0
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest.append(
            {"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
             "offset": offset, "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)
    header = {
        "format": FORMAT_VERSION,
        "config": ckpt.config,
        "step": int(ckpt.step),
        "phase": ckpt.phase,
        "meta": ckpt.meta,
        "arrays": manifest,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise DecodeError(f"{path} is not a catintell checkpoint")
    (n,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"corrupt checkpoint header in {path}") from exc
    data = memoryview(raw)[start + n :]
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        chunk = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise DecodeError(f"truncated array {entry['name']} in {path}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
    return Checkpoint(
        config=header["config"], arrays=arrays, step=header["step"], phase=header["phase"],
        meta=header.get("meta", {}),
    )
