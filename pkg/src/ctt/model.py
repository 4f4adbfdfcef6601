"""Encoder-decoder segmentation network split into feature extractor and classifier.

Tensors crossing the module boundary are channels-last: images ``(N, H, W, 3)``,
features ``(N, h, w, d)``, logits/probs ``(N, h, w, C)``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

_ACTIVATIONS = {"relu": nn.ReLU, "silu": nn.SiLU, "tanh": nn.Tanh}


@dataclass(frozen=True)
class BackboneConfig:
    feature_dim: int = 64
    stride: int = 4
    widths: tuple[int, ...] = (16, 32, 64, 64)
    num_classes: int = 4
    init_seed: int = 0
    activation: str = "relu"
    norm_groups: int = 4  # 0 disables GroupNorm

    def __post_init__(self):
        if self.feature_dim < 8:
            raise ConfigError(f"feature_dim: must be >= 8, got {self.feature_dim}")
        if self.stride not in (2, 4, 8):
            raise ConfigError(f"stride: must be one of 2, 4, 8, got {self.stride}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes: must be >= 2, got {self.num_classes}")
        if len(self.widths) < int(math.log2(self.stride)):
            raise ConfigError(
                f"widths: need at least log2(stride)={int(math.log2(self.stride))} stages"
            )
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths: must be positive, got {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation: must be one of {sorted(_ACTIVATIONS)}")
        if self.norm_groups and any(w % self.norm_groups for w in self.widths):
            raise ConfigError(
                f"norm_groups: {self.norm_groups} must divide every width in {self.widths}"
            )
        if not 0 <= self.init_seed < 2**64:
            raise ConfigError("init_seed: must be a 64-bit unsigned integer")


def _block(cin, cout, stride, cfg):
    layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1)]
    if cfg.norm_groups:
        layers.append(nn.GroupNorm(cfg.norm_groups, cout))
    layers.append(_ACTIVATIONS[cfg.activation]())
    return layers


class SegNet(nn.Module):
    """Strided conv encoder, skip-fusing decoder back to ``stride``, 1x1 heads.

    ``extract`` is the feature extractor h, ``classifier`` is g.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        stages = []
        cin = 3
        for w in cfg.widths:
            stages.append(nn.Sequential(*_block(cin, w, 2, cfg), *_block(w, w, 1, cfg)))
            cin = w
        self.encoder = nn.ModuleList(stages)
        # stage i runs at stride 2**(i+1); fuse back down to the target stride
        self.level = int(math.log2(cfg.stride)) - 1
        fuse = []
        for i in range(len(cfg.widths) - 2, self.level - 1, -1):
            fuse.append(nn.Sequential(*_block(cin + cfg.widths[i], cfg.widths[i], 1, cfg)))
            cin = cfg.widths[i]
        self.decoder = nn.ModuleList(fuse)
        self.project = nn.Conv2d(cin, cfg.feature_dim, 1)
        self.classifier = nn.Conv2d(cfg.feature_dim, cfg.num_classes, 1)

    def extract(self, x):
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        y = skips[-1]
        for fuse, skip in zip(self.decoder, reversed(skips[self.level : -1])):
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = fuse(torch.cat([y, skip], dim=1))
        return self.project(y)

    def forward(self, x):
        z = self.extract(x)
        return z, self.classifier(z)


def init_model(config: BackboneConfig) -> SegNet:
    """Build a network whose weights depend only on ``config`` (incl. init_seed)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.init_seed)
        return SegNet(config)


@dataclass
class ForwardOutput:
    features: torch.Tensor  # (N, h, w, d)
    logits: torch.Tensor  # (N, h, w, C)
    probs: torch.Tensor
    confidence: torch.Tensor  # (N, h, w)
    hard_labels: torch.Tensor  # (N, h, w) int64

    def __getitem__(self, idx):
        return ForwardOutput(*(getattr(self, f.name)[idx] for f in fields(self)))

    @staticmethod
    def cat(outputs):
        return ForwardOutput(
            *(torch.cat([getattr(o, f.name) for o in outputs]) for f in fields(ForwardOutput))
        )


def outputs_from_logits(features, logits) -> ForwardOutput:
    probs = torch.softmax(logits, dim=-1)
    # argmax returns the first maximal index: ties go to the lowest class
    return ForwardOutput(features, logits, probs, probs.amax(dim=-1), torch.argmax(probs, dim=-1))


def forward(model: SegNet, images: torch.Tensor) -> ForwardOutput:
    """Run ``model`` on channels-last ``images`` of shape ``(N, H, W, 3)``."""
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ShapeError(f"images: expected (N, H, W, 3), got {tuple(images.shape)}")
    s = model.cfg.stride
    h, w = images.shape[1:3]
    if h % s or w % s:
        raise ShapeError(f"images: H={h}, W={w} not divisible by stride {s}")
    param = next(model.parameters())
    z, g = model(images.to(param.dtype).permute(0, 3, 1, 2))
    return outputs_from_logits(z.permute(0, 2, 3, 1), g.permute(0, 2, 3, 1))


def upsample_probs(probs: torch.Tensor, size) -> torch.Tensor:
    """Bilinearly resize channels-last probabilities to ``size`` (H, W)."""
    up = F.interpolate(
        probs.permute(0, 3, 1, 2), size=tuple(size), mode="bilinear", align_corners=False
    )
    return up.permute(0, 2, 3, 1)


@dataclass
class StudentTeacherPair:
    student: SegNet
    teacher: SegNet
    ema_decay: float = 0.99

    @classmethod
    def from_config(cls, config: BackboneConfig, ema_decay=0.99):
        student = init_model(config)
        teacher = copy.deepcopy(student)
        teacher.requires_grad_(False)
        return cls(student, teacher, ema_decay)


@torch.no_grad()
def ema_update(pair: StudentTeacherPair) -> StudentTeacherPair:
    """teacher <- decay * teacher + (1 - decay) * student, elementwise."""
    tau = pair.ema_decay
    student = dict(pair.student.named_parameters())
    teacher = dict(pair.teacher.named_parameters())
    if student.keys() != teacher.keys():
        raise RuntimeError("corrupted pair: parameter names differ between student and teacher")
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise RuntimeError(f"corrupted pair: {name} has shapes {s.shape} vs {t.shape}")
        t.mul_(tau).add_(s, alpha=1.0 - tau)
    return pair
