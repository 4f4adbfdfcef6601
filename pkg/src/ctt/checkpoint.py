"""Single-file checkpoint archive.

A zip archive holding ``manifest.json`` (format version, config, iteration,
rng states, tensor index) plus one raw little-endian float32 payload per
named tensor and opaque binary blobs (memory banks, torch rng state).
Entries carry a fixed timestamp so equal states give equal bytes.
"""
from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = "ctt-ckpt-1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    blobs: dict[str, bytes] = field(default_factory=dict)

    @property
    def iteration(self) -> int:
        return self.manifest["iteration"]

    @property
    def config(self) -> dict:
        return self.manifest["config"]


def _write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(path, *, config: dict, iteration: int, tensors: dict, blobs=None, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    payloads = []
    for i, (name, t) in enumerate(tensors.items()):
        arr = t.detach().cpu().numpy().astype("<f4")
        entry = f"tensors/{i:05d}.f32"
        index.append({"name": name, "shape": list(arr.shape), "entry": entry})
        payloads.append((entry, arr.tobytes()))
    blobs = blobs or {}
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "iteration": iteration,
        "meta": meta or {},
        "tensors": index,
        "blobs": sorted(blobs),
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for entry, data in payloads:
            _write(zf, entry, data)
        for name in sorted(blobs):
            _write(zf, f"blobs/{name}", blobs[name])
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint archive ({exc})") from exc
    with zf:
        bad = zf.testzip()
        if bad is not None:
            raise CheckpointError(f"{path}: CRC mismatch in entry {bad}")
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: missing or malformed manifest.json") from exc
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format_version {version!r}, expected {FORMAT_VERSION!r} "
                f"(iteration={manifest.get('iteration')})"
            )
        tensors = {}
        for item in manifest["tensors"]:
            try:
                data = zf.read(item["entry"])
            except KeyError as exc:
                raise CheckpointError(
                    f"{path}: tensor {item['name']} missing (entry {item['entry']}, "
                    f"iteration={manifest.get('iteration')})"
                ) from exc
            expected = 4 * math.prod(item["shape"])
            if len(data) != expected:
                raise CheckpointError(
                    f"{path}: tensor {item['name']} has {len(data)} bytes, expected {expected} "
                    f"for shape {item['shape']} (iteration={manifest.get('iteration')})"
                )
            arr = np.frombuffer(data, dtype="<f4").reshape(item["shape"])
            tensors[item["name"]] = torch.from_numpy(arr.astype(np.float32))
        blobs = {}
        for name in manifest.get("blobs", []):
            try:
                blobs[name] = zf.read(f"blobs/{name}")
            except KeyError as exc:
                raise CheckpointError(f"{path}: blob {name} missing") from exc
    return Checkpoint(manifest, tensors, blobs)
