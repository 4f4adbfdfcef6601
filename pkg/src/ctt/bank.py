"""Per-class FIFO memory bank of unit-norm labeled-data features."""
from __future__ import annotations

import struct

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .data import IGNORE


class MemoryBank:
    """One FIFO queue of at most ``capacity`` vectors per class.

    Queues are stored oldest-first. Storage is float32 on CPU regardless of
    the dtype of pushed features.
    """

    def __init__(self, num_classes: int, capacity: int, dim: int):
        for name, value in (("num_classes", num_classes), ("capacity", capacity), ("dim", dim)):
            if value < 1:
                raise ConfigError(f"{name}: must be >= 1, got {value}")
        self.num_classes = num_classes
        self.capacity = capacity
        self.dim = dim
        self.queues = [torch.empty(0, dim) for _ in range(num_classes)]

    def __len__(self):
        return sum(len(q) for q in self.queues)

    def queue(self, cls: int) -> torch.Tensor:
        return self.queues[cls]

    def push(self, cls: int, features) -> "MemoryBank":
        if not 0 <= cls < self.num_classes:
            raise ConfigError(f"class: {cls} out of range for {self.num_classes} classes")
        features = torch.as_tensor(features).detach().to(torch.float32).cpu()
        if features.ndim == 1:
            features = features[None]
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise ShapeError(f"features: expected (n, {self.dim}), got {tuple(features.shape)}")
        if len(features) == 0:
            return self
        q = torch.cat([self.queues[cls], features])
        self.queues[cls] = q[-self.capacity :].clone()
        return self

    def is_full(self) -> bool:
        return all(len(q) == self.capacity for q in self.queues)

    def fill_fractions(self) -> list[float]:
        return [len(q) / self.capacity for q in self.queues]

    def negatives(self, cls: int) -> torch.Tensor:
        """All stored vectors outside class ``cls``, in class then queue order."""
        if not 0 <= cls < self.num_classes:
            raise ConfigError(f"class: {cls} out of range for {self.num_classes} classes")
        others = [q for c, q in enumerate(self.queues) if c != cls]
        return torch.cat(others) if others else torch.empty(0, self.dim)

    # serialization: per class an entry count (uint32 LE) then float32 LE vectors
    def to_bytes(self) -> bytes:
        parts = [struct.pack("<III", self.num_classes, self.capacity, self.dim)]
        for q in self.queues:
            parts.append(struct.pack("<I", len(q)))
            parts.append(q.numpy().astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "MemoryBank":
        num_classes, capacity, dim = struct.unpack_from("<III", payload, 0)
        bank = cls(num_classes, capacity, dim)
        offset = 12
        for c in range(num_classes):
            (n,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            size = n * dim * 4
            buf = payload[offset : offset + size]
            if len(buf) != size or n > capacity:
                raise ShapeError(f"bank payload truncated or oversized at class {c}")
            arr = np.frombuffer(buf, dtype="<f4").reshape(n, dim)
            bank.queues[c] = torch.from_numpy(arr.astype(np.float32))
            offset += size
        if offset != len(payload):
            raise ShapeError("bank payload has trailing bytes")
        return bank


def compute_k(n_labeled: int, capacity: int) -> int:
    """Per-class intake per iteration: max(1, floor(n_labeled / capacity))."""
    if n_labeled < 1 or capacity < 1:
        raise ConfigError("compute_k: need n_labeled >= 1 and capacity >= 1")
    return max(1, n_labeled // capacity)


def select_candidates(teacher_out, gt_labels, k: int, generator=None, selection="random"):
    """Pick up to ``k`` features per class from a teacher forward on labeled data.

    A pixel qualifies for class c when the teacher's hard label and the
    ground truth both equal c. With more than ``k`` qualifying pixels,
    ``selection="random"`` draws k uniformly, ``"topk"`` keeps the k most
    confident. Returns a list (one entry per class) of L2-normalized
    ``(m_c, d)`` tensors, detached.
    """
    if selection not in ("random", "topk"):
        raise ConfigError(f"selection: must be 'random' or 'topk', got {selection!r}")
    gt = torch.as_tensor(gt_labels)
    if gt.shape != teacher_out.hard_labels.shape:
        raise ShapeError(
            f"labels {tuple(gt.shape)} not aligned with features "
            f"{tuple(teacher_out.hard_labels.shape)}"
        )
    feats = teacher_out.features.detach().reshape(-1, teacher_out.features.shape[-1])
    conf = teacher_out.confidence.detach().reshape(-1)
    pred = teacher_out.hard_labels.reshape(-1)
    gt = gt.reshape(-1).to(pred.device).long()
    num_classes = teacher_out.probs.shape[-1]
    agree = (pred == gt) & (gt != IGNORE)
    out = []
    for c in range(num_classes):
        idx = torch.nonzero(agree & (gt == c)).flatten()
        if len(idx) > k:
            if selection == "random":
                pick = torch.randperm(len(idx), generator=generator)[:k]
            else:
                # stable sort keeps spatial order among equal confidences
                pick = torch.sort(conf[idx], descending=True, stable=True).indices[:k]
            idx = idx[torch.sort(pick).values]
        out.append(F.normalize(feats[idx], dim=1))
    return out
