"""Procedural shape-segmentation dataset, labeled/unlabeled splits and augmentation.

Each foreground class is one shape type (disk, rectangle, triangle, ...).
Images are quantized to 8 bits at generation time so that writing them to
disk and reading them back is lossless.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image

from .errors import CheckpointError, ConfigError

IGNORE = 255
FORMAT_VERSION = "ctt-shapes-1"

SHAPES = ("disk", "rectangle", "triangle", "diamond", "ring", "cross")

# shape radius range as a fraction of the shorter image side
RADIUS_RANGE = (0.08, 0.17)

# Nominal per-class colors; color_jitter blends them towards a random color.
_PALETTE = np.array(
    [
        [0.85, 0.25, 0.20],
        [0.20, 0.70, 0.30],
        [0.25, 0.35, 0.85],
        [0.90, 0.80, 0.20],
        [0.75, 0.30, 0.80],
        [0.20, 0.80, 0.85],
    ]
)


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (2, 4)
    color_jitter: float = 1.0
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ConfigError(f"image_size: both dims must be >= 32, got {self.image_size}")
        if not 2 <= self.num_classes <= len(SHAPES) + 1:
            raise ConfigError(
                f"num_classes: must be in [2, {len(SHAPES) + 1}], got {self.num_classes}"
            )
        lo, hi = self.shapes_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(
                f"shapes_per_image: need 1 <= min <= max, got {self.shapes_per_image}"
            )
        if not 0.0 <= self.color_jitter <= 1.0:
            raise ConfigError(f"color_jitter: must be in [0, 1], got {self.color_jitter}")
        if not 0.0 <= self.noise_std <= 1.0:
            raise ConfigError(f"noise_std: must be in [0, 1], got {self.noise_std}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed: must be a 64-bit unsigned integer, got {self.seed}")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8, IGNORE marks unsupervised pixels

    def __post_init__(self):
        if self.image.shape[:2] != self.label.shape or self.image.shape[-1] != 3:
            raise ConfigError(
                f"image {self.image.shape} and label {self.label.shape} do not align"
            )


@dataclass(frozen=True)
class SplitSpec:
    labeled_fraction: Fraction = Fraction(1, 20)
    seed: int = 0

    def __post_init__(self):
        frac = Fraction(self.labeled_fraction).limit_denominator(10**6)
        if not 0 < frac <= 1:
            raise ConfigError(f"labeled_fraction: must be in (0, 1], got {self.labeled_fraction}")
        object.__setattr__(self, "labeled_fraction", frac)


class Split(NamedTuple):
    labeled: list[int]
    unlabeled: list[int]


# --------------------------------------------------------------------------
# generation


def _shape_mask(kind, yy, xx, cy, cx, r, rng):
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy**2 + dx**2 <= r**2
    if kind == "rectangle":
        a, b = rng.uniform(0.55, 1.0, size=2) * r
        return (np.abs(dx) <= a) & (np.abs(dy) <= b)
    if kind == "triangle":
        theta = rng.uniform(0, 2 * math.pi)
        angles = theta + np.array([0.0, 2 * math.pi / 3, 4 * math.pi / 3])
        vy, vx = cy + 1.2 * r * np.sin(angles), cx + 1.2 * r * np.cos(angles)
        crosses = [
            (vx[(i + 1) % 3] - vx[i]) * (yy - vy[i]) - (vy[(i + 1) % 3] - vy[i]) * (xx - vx[i])
            for i in range(3)
        ]
        return np.all([c >= 0 for c in crosses], axis=0) | np.all([c <= 0 for c in crosses], axis=0)
    if kind == "diamond":
        a, b = rng.uniform(0.7, 1.2, size=2) * r
        return np.abs(dx) / a + np.abs(dy) / b <= 1.0
    if kind == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if kind == "cross":
        t = max(1.5, 0.35 * r)
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    raise ValueError(kind)


def generate_sample(spec: SceneSpec, index: int) -> Sample:
    """Generate sample ``index``; a pure function of ``(spec, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    base = rng.uniform(0.3, 0.7, size=3)
    freq = rng.uniform(0.05, 0.3, size=2)
    phase = rng.uniform(0, 2 * math.pi, size=3)
    texture = np.sin(freq[0] * xx[..., None] + freq[1] * yy[..., None] + phase)
    image = base + 0.12 * texture
    label = np.zeros((h, w), dtype=np.uint8)

    side = min(h, w)
    n_shapes = rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1)
    for _ in range(n_shapes):
        cls = int(rng.integers(1, spec.num_classes))
        r = rng.uniform(*RADIUS_RANGE) * side
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        mask = _shape_mask(SHAPES[cls - 1], yy, xx, cy, cx, r, rng)
        color = (1 - spec.color_jitter) * _PALETTE[cls - 1] + spec.color_jitter * rng.uniform(
            0.0, 1.0, size=3
        )
        image[mask] = color
        label[mask] = cls

    image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return Sample(image=image.astype(np.float32) / 255.0, label=label)


def generate_dataset(spec: SceneSpec, count: int) -> list[Sample]:
    if count < 1:
        raise ConfigError(f"count: must be >= 1, got {count}")
    return [generate_sample(spec, i) for i in range(count)]


# --------------------------------------------------------------------------
# splits


def split_labeled(dataset: Sequence, split: SplitSpec) -> Split:
    """Seeded uniform draw of the labeled subset; the rest is unlabeled."""
    n = len(dataset)
    if n == 0:
        raise ConfigError("dataset: must be non-empty")
    n_labeled = max(1, math.floor(split.labeled_fraction * n + Fraction(1, 2)))
    n_labeled = min(n, n_labeled)
    rng = np.random.default_rng(split.seed)
    chosen = rng.choice(n, size=n_labeled, replace=False)
    labeled = sorted(int(i) for i in chosen)
    taken = set(labeled)
    return Split(labeled, [i for i in range(n) if i not in taken])


def write_split(path, indices: Sequence[int]):
    Path(path).write_text("".join(f"{i}\n" for i in indices))


def read_split(path) -> list[int]:
    return [int(line) for line in Path(path).read_text().split()]


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugParams:
    flip: bool = False
    rot_k: int = 0  # quarter turns, counter-clockwise
    shift: tuple[int, int] = (0, 0)  # (dx, dy) in pixels
    crop_origin: tuple[int, int] = (0, 0)  # (top, left)
    crop_size: tuple[int, int] | None = None


def draw_augmentation(rng: np.random.Generator, shape, crop_size) -> AugParams:
    """Draw flip / rot90 / translation (each with probability 0.5) and a crop.

    The number of draws is fixed, so rng consumption does not depend on the
    outcome.
    """
    h, w = shape
    u = rng.random(3)
    rot_k = int(rng.integers(1, 4))
    max_dx, max_dy = int(0.125 * w), int(0.125 * h)
    dx = int(rng.integers(-max_dx, max_dx + 1))
    dy = int(rng.integers(-max_dy, max_dy + 1))
    rot = rot_k if u[1] < 0.5 else 0
    if rot % 2:
        h, w = w, h
    ch, cw = crop_size
    if ch > h or cw > w:
        raise ConfigError(f"crop: crop size {crop_size} larger than image {(h, w)}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return AugParams(
        flip=bool(u[0] < 0.5),
        rot_k=rot,
        shift=(dx, dy) if u[2] < 0.5 else (0, 0),
        crop_origin=(top, left),
        crop_size=(ch, cw),
    )


def _background_color(sample: Sample):
    bg = sample.label == 0
    if not bg.any():
        return np.zeros(3, dtype=sample.image.dtype)
    return sample.image[bg].mean(axis=0).astype(sample.image.dtype)


def _shift(arr, dx, dy, fill):
    out = np.empty_like(arr)
    out[...] = fill
    h, w = arr.shape[:2]
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def apply_augmentation(sample: Sample, params: AugParams) -> Sample:
    image, label = sample.image, sample.label
    fill = _background_color(sample)
    if params.flip:
        image, label = image[:, ::-1], label[:, ::-1]
    if params.rot_k:
        image, label = np.rot90(image, params.rot_k), np.rot90(label, params.rot_k)
    dx, dy = params.shift
    if dx or dy:
        image = _shift(image, dx, dy, fill)
        label = _shift(label, dx, dy, IGNORE)
    if params.crop_size is not None:
        top, left = params.crop_origin
        ch, cw = params.crop_size
        if top + ch > image.shape[0] or left + cw > image.shape[1]:
            raise ConfigError(f"crop: crop size {params.crop_size} larger than image")
        image = image[top : top + ch, left : left + cw]
        label = label[top : top + ch, left : left + cw]
    return Sample(np.ascontiguousarray(image), np.ascontiguousarray(label))


def augment(sample: Sample, rng: np.random.Generator, crop_size=None) -> Sample:
    if crop_size is None:
        crop_size = sample.label.shape
    if isinstance(crop_size, int):
        crop_size = (crop_size, crop_size)
    return apply_augmentation(sample, draw_augmentation(rng, sample.label.shape, crop_size))


# --------------------------------------------------------------------------
# on-disk layout


def _format_manifest(spec: SceneSpec, count: int) -> str:
    lines = [f"format_version = {FORMAT_VERSION}", f"count = {count}"]
    for key, value in asdict(spec).items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _parse_manifest(text: str) -> tuple[SceneSpec, int]:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    if kv.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"dataset manifest: unsupported format_version {kv.get('format_version')!r}"
        )
    try:
        spec = SceneSpec(
            image_size=tuple(int(v) for v in kv["image_size"].split(",")),
            num_classes=int(kv["num_classes"]),
            shapes_per_image=tuple(int(v) for v in kv["shapes_per_image"].split(",")),
            color_jitter=float(kv["color_jitter"]),
            noise_std=float(kv["noise_std"]),
            seed=int(kv["seed"]),
        )
        count = int(kv["count"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"dataset manifest: malformed ({exc})") from exc
    return spec, count


def save_dataset(root, spec: SceneSpec, samples: Sequence[Sample]):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        img = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{i:06d}.png")
        Image.fromarray(s.label, mode="L").save(root / "labels" / f"{i:06d}.png")
    (root / "manifest").write_text(_format_manifest(spec, len(samples)))


def load_dataset(root) -> tuple[SceneSpec, list[Sample]]:
    root = Path(root)
    manifest = root / "manifest"
    if not manifest.is_file():
        raise CheckpointError(f"dataset: no manifest in {root}")
    spec, count = _parse_manifest(manifest.read_text())
    samples = []
    for i in range(count):
        try:
            img = np.asarray(Image.open(root / "images" / f"{i:06d}.png").convert("RGB"))
            lab = np.asarray(Image.open(root / "labels" / f"{i:06d}.png"))
        except OSError as exc:
            raise CheckpointError(f"dataset: cannot read sample {i} in {root}: {exc}") from exc
        if lab.shape != tuple(spec.image_size):
            raise CheckpointError(f"dataset: sample {i} has shape {lab.shape}")
        samples.append(Sample(img.astype(np.float32) / 255.0, lab.astype(np.uint8)))
    return spec, samples
