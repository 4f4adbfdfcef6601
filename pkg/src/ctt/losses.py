"""Loss kernels: pixel cross-entropy, supervised / cross-teacher terms,
confidence masks and the two memory-bank contrastive losses.

Spatial inputs are channels-last at feature resolution. Contrastive losses
expect L2-normalized features; they do not normalize internally.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .data import IGNORE
from .errors import ConfigError, ShapeError, StateError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    sup: float = 1.0
    ct: float = 1.0
    hc: float = 0.1
    lc: float = 0.1

    def __post_init__(self):
        for name in ("sup", "ct", "hc", "lc"):
            if getattr(self, name) < 0:
                raise ConfigError(f"weights.{name}: must be >= 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class ContrastConfig:
    temperature: float = 0.5
    threshold: float = 0.75  # confidence threshold separating HC from LC pixels
    directional: bool = True  # LC only where the peer is more confident
    selection: str = "random"  # bank intake rule: "random" or "topk"
    assign_with_gt: bool = False  # class of labeled query pixels from ground truth

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"contrast.temperature: must be > 0, got {self.temperature}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"contrast.threshold: must be in [0, 1], got {self.threshold}")
        if self.selection not in ("random", "topk"):
            raise ConfigError("contrast.selection: must be 'random' or 'topk'")


def one_hot_labels(labels: torch.Tensor, num_classes: int):
    """Integer label map -> (one-hot float map, valid mask). IGNORE is invalid."""
    labels = torch.as_tensor(labels).long()
    valid = labels != IGNORE
    target = F.one_hot(torch.where(valid, labels, 0), num_classes).to(torch.get_default_dtype())
    return target * valid[..., None], valid


def pixel_cross_entropy(probs, target, valid_mask=None):
    """Mean over valid pixels of -sum_c target * log(probs)."""
    if probs.shape != target.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    if valid_mask is None:
        valid_mask = torch.ones(probs.shape[:-1], dtype=torch.bool, device=probs.device)
    elif valid_mask.shape != probs.shape[:-1]:
        raise ShapeError(f"valid_mask {tuple(valid_mask.shape)} vs probs {tuple(probs.shape)}")
    valid = valid_mask.to(probs.dtype)
    n = valid.sum()
    per_pixel = -(target.to(probs.dtype) * torch.log(probs.clamp_min(PROB_FLOOR))).sum(-1)
    if n == 0:
        return (per_pixel * valid).sum()
    return (per_pixel * valid).sum() / n


def supervised_loss(student_outputs: Sequence, labels) -> torch.Tensor:
    """Sum over students of the cross-entropy against ground-truth labels."""
    total = 0
    for out in student_outputs:
        target, valid = one_hot_labels(labels, out.probs.shape[-1])
        total = total + pixel_cross_entropy(out.probs, target.to(out.probs), valid)
    return total


def make_pseudo_labels(teacher_out) -> torch.Tensor:
    """One-hot of the teacher's per-pixel argmax (ties to the lowest class), no grad."""
    probs = teacher_out.probs.detach()
    return F.one_hot(torch.argmax(probs, dim=-1), probs.shape[-1]).to(probs.dtype)


def routed_cross_entropy(student_probs: Sequence, targets: Sequence[Sequence]) -> torch.Tensor:
    """Sum over students i of the mean CE of ``student_probs[i]`` against ``targets[i]``."""
    total = 0
    for probs, tgts in zip(student_probs, targets):
        if not tgts:
            continue
        total = total + sum(pixel_cross_entropy(probs, t.to(probs)) for t in tgts) / len(tgts)
    return total


def cross_teacher_loss(student_probs: Sequence, pseudo_labels: Sequence) -> torch.Tensor:
    """Each student learns from the pseudo-labels of every *other* pair's teacher.

    With two pairs this is H(P_A, Y_B) + H(P_B, Y_A). With n pairs each
    student takes the mean over the n - 1 foreign teachers.
    """
    n = len(student_probs)
    if n < 2 or len(pseudo_labels) != n:
        raise ShapeError(f"need >= 2 students and as many pseudo-label maps, got {n}")
    targets = [[pseudo_labels[j] for j in range(n) if j != i] for i in range(n)]
    return routed_cross_entropy(student_probs, targets)


# --------------------------------------------------------------------------
# masks


def hc_mask(confidence: torch.Tensor, threshold: float) -> torch.Tensor:
    return (confidence > threshold).to(torch.uint8)


def lc_mask(hc_m, confidence, peer_confidence, directional=True) -> torch.Tensor:
    """(1 - hc_m) * [confidence < peer_confidence]; without direction just (1 - hc_m)."""
    low = 1 - hc_m.to(torch.uint8)
    if not directional:
        return low
    return low * (confidence < peer_confidence).to(torch.uint8)


# --------------------------------------------------------------------------
# contrastive


def _flat(features, assign, mask):
    d = features.shape[-1]
    if assign.shape != features.shape[:-1] or mask.shape != features.shape[:-1]:
        raise ShapeError(
            f"features {tuple(features.shape)}, assignment {tuple(assign.shape)} "
            f"and mask {tuple(mask.shape)} are not aligned"
        )
    return features.reshape(-1, d), assign.reshape(-1).long(), mask.reshape(-1).bool()


def _neg_logsumexp(q, negatives, temperature):
    if len(negatives) == 0:
        return torch.full((len(q), 1), float("-inf"), dtype=q.dtype)
    return torch.logsumexp(q @ negatives.T / temperature, dim=1, keepdim=True)


def hc_loss(features, assign, mask, bank, temperature: float) -> torch.Tensor:
    """Query features against same-class bank positives and other-class bank negatives.

    For each class with at least one masked-in query: the mean over
    (query, positive in the class queue) of
    ``-log(e^{q.p/t} / (e^{q.p/t} + sum_n e^{q.n/t}))``; then the mean over
    those classes.
    """
    if not bank.is_full():
        raise StateError("hc_loss: memory bank is not full")
    feats, assign, mask = _flat(features, assign, mask)
    terms = []
    for c in range(bank.num_classes):
        sel = mask & (assign == c)
        if not sel.any():
            continue
        q = feats[sel]
        pos = bank.queue(c).to(q)
        s_pos = q @ pos.T / temperature  # (m, N)
        s_neg = _neg_logsumexp(q, bank.negatives(c).to(q), temperature)  # (m, 1)
        # -log(e^a / (e^a + e^b)) = softplus(b - a)
        terms.append(F.softplus(s_neg - s_pos).mean())
    if not terms:
        return feats.sum() * 0.0
    return torch.stack(terms).mean()


def lc_loss(features, peer_features, assign, mask, bank, peer_bank, temperature: float):
    """Low-confidence queries pulled towards the peer network's feature at the same pixel.

    Negatives for class c come from both banks; the peer features are
    treated as constants.
    """
    if not (bank.is_full() and peer_bank.is_full()):
        raise StateError("lc_loss: memory bank is not full")
    if peer_features.shape != features.shape:
        raise ShapeError(
            f"features {tuple(features.shape)} vs peer {tuple(peer_features.shape)}"
        )
    feats, assign, mask = _flat(features, assign, mask)
    peer = peer_features.detach().reshape(feats.shape)
    terms = []
    for c in range(bank.num_classes):
        sel = mask & (assign == c)
        if not sel.any():
            continue
        q = feats[sel]
        s_pos = (q * peer[sel]).sum(dim=1, keepdim=True) / temperature  # (m, 1)
        negatives = torch.cat([bank.negatives(c), peer_bank.negatives(c)]).to(q)
        s_neg = _neg_logsumexp(q, negatives, temperature)
        terms.append(F.softplus(s_neg - s_pos).mean())
    if not terms:
        return feats.sum() * 0.0
    return torch.stack(terms).mean()


# --------------------------------------------------------------------------
# total


def weighted_terms(components: Mapping, weights: LossWeights, bank_full: bool) -> dict:
    """Per-term weighted contributions; contrastive terms are 0 until the banks fill."""
    out = {
        "sup": weights.sup * components.get("sup", 0.0),
        "ct": weights.ct * components.get("ct", 0.0),
    }
    if bank_full:
        out["hc"] = weights.hc * components.get("hc", 0.0)
        out["lc"] = weights.lc * components.get("lc", 0.0)
    else:
        out["hc"] = out["lc"] = 0.0
    return out


def total_loss(components: Mapping, weights: LossWeights, bank_full: bool):
    terms = weighted_terms(components, weights, bank_full)
    return terms["sup"] + terms["ct"] + terms["hc"] + terms["lc"]
