"""Desk-scale experiment grid: dataset, named training variants, cached results.

Used by the acceptance suite and by ``scripts/run_desk_experiments.py``.
Results are cached as JSON keyed by the resolved config and a fingerprint
of the package source, so any code change invalidates them.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import torch

from .config import TrainConfig, format_config
from .data import SceneSpec, SplitSpec, generate_dataset, split_labeled
from .losses import LossWeights
from .trainer import TrainData, run

DESK_SCENE = SceneSpec(seed=7, shapes_per_image=(1, 2), color_jitter=0.5)
TRAIN_COUNT = 800
VAL_COUNT = 200
VAL_SEED = 1007
LABELED_FRACTION = Fraction(1, 20)
SEEDS = (0, 1, 2)

VARIANTS = {
    "supervised_only": dict(topology="supervised_only", pairs=1),
    "ctt": {},
    "sup_ct": dict(weights=LossWeights(hc=0.0, lc=0.0)),
    "sup_hc_lc": dict(weights=LossWeights(ct=0.0)),
    "mean_teacher": dict(topology="mean_teacher", pairs=1),
    "mutual": dict(topology="mutual"),
}


@lru_cache(maxsize=None)
def _samples():
    train = generate_dataset(DESK_SCENE, TRAIN_COUNT)
    val = generate_dataset(dataclasses.replace(DESK_SCENE, seed=VAL_SEED), VAL_COUNT)
    return train, val


def desk_data(split_seed: int) -> TrainData:
    train, val = _samples()
    split = split_labeled(train, SplitSpec(LABELED_FRACTION, split_seed))
    return TrainData(
        labeled=[train[i] for i in split.labeled],
        unlabeled=[train[i] for i in split.unlabeled],
        val=val,
    )


def variant_config(name: str, seed: int, **overrides) -> TrainConfig:
    fields = dict(VARIANTS[name])
    fields.update(overrides)
    return TrainConfig(
        seed=seed, split_seed=seed, labeled_fraction=str(LABELED_FRACTION), eval_interval=1000, **fields
    )


# modules that cannot change a training result are left out of the fingerprint
_NOT_FINGERPRINTED = {"cli.py", "plotting.py", "__init__.py"}


def code_fingerprint() -> str:
    h = hashlib.sha256(torch.__version__.encode())
    for path in sorted(Path(__file__).parent.glob("*.py")):
        if path.name in _NOT_FINGERPRINTED:
            continue
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _scene_text() -> str:
    return json.dumps(
        dict(scene=dataclasses.asdict(DESK_SCENE), train=TRAIN_COUNT, val=VAL_COUNT, val_seed=VAL_SEED),
        sort_keys=True,
    )


def run_variant(name: str, seed: int, cache_dir=None, out_dir=None, **overrides) -> dict:
    """Train one variant for one seed; returns ``{"final_miou", "curve", ...}``."""
    config = variant_config(name, seed, **overrides)
    key = dict(
        variant=name,
        seed=seed,
        config=format_config(config),
        data=_scene_text(),
        code=code_fingerprint(),
    )
    cache_path = None
    if cache_dir is not None:
        digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:12]
        cache_path = Path(cache_dir) / f"{name}_seed{seed}_{digest}.json"
        if cache_path.is_file():
            return json.loads(cache_path.read_text())["result"]
    start = time.perf_counter()
    res = run(config, desk_data(seed), out_dir=out_dir)
    full = [r.iter for r in res.records if r.banks_full]
    first_full = full[0] if full else None
    before = [r for r in res.records if first_full is None or r.iter < first_full]
    after = [r for r in res.records if first_full is not None and r.iter >= first_full]
    result = dict(
        final_miou=res.final_miou,
        curve=[[r.iter, r.miou] for r in res.records if r.miou is not None],
        seconds=round(time.perf_counter() - start, 1),
        # contrastive gating evidence
        first_full=first_full,
        max_contrastive_before_full=max(
            (abs(r.weighted_hc) + abs(r.weighted_lc) for r in before), default=0.0
        ),
        nonzero_contrastive_after_full=sum(
            1 for r in after if r.weighted_hc != 0.0 or r.weighted_lc != 0.0
        ),
        steps_after_full=len(after),
    )
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(json.dumps(dict(key=key, result=result), indent=1))
    return result
