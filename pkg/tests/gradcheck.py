"""Finite-difference checks of every loss term through a small network."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from ctt.bank import MemoryBank
from ctt.losses import (
    cross_teacher_loss,
    hc_loss,
    hc_mask,
    lc_loss,
    lc_mask,
    make_pseudo_labels,
    supervised_loss,
)
from ctt.model import BackboneConfig, forward, init_model

from oracles import central_differences, relative_errors


def toy_config(widths=(2, 2), seed=0):
    return BackboneConfig(
        feature_dim=8, stride=4, widths=widths, num_classes=3, activation="tanh",
        norm_groups=0, init_seed=seed,
    )


def _full_bank(gen, num_classes, capacity, dim):
    bank = MemoryBank(num_classes, capacity, dim)
    for c in range(num_classes):
        bank.push(c, F.normalize(torch.randn(capacity, dim, generator=gen, dtype=torch.float64), dim=1))
    return bank


def loss_closures(widths=(2, 2), seed=0):
    """Build two float64 toy nets and return (params, {name: closure}).

    Masks, class assignments and pseudo-labels are computed once and then
    held fixed, so each closure is a smooth function of the parameters.
    """
    torch.set_default_dtype(torch.float64)
    gen = torch.Generator().manual_seed(seed)
    nets = [init_model(toy_config(widths, seed + i)).double() for i in range(2)]
    images = torch.rand(2, 8, 8, 3, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, 3, (2, 2, 2), generator=gen)
    labels[0, 0, 0] = 255
    with torch.no_grad():
        outs = [forward(n, images) for n in nets]
        teachers = [make_pseudo_labels(o) for o in outs[::-1]]
        conf = [o.confidence for o in outs]
        assign = [o.hard_labels for o in outs]
        # a threshold at the median confidence splits pixels into HC and LC sets
        thr = float(conf[0].median())
        hcm = [hc_mask(c, thr) for c in conf]
        lcm = lc_mask(hcm[0], conf[0], conf[1], directional=False)
    banks = [_full_bank(gen, 3, 3, 8) for _ in nets]
    peer = F.normalize(outs[1].features, dim=-1)

    def feats(i):
        return F.normalize(forward(nets[i], images).features, dim=-1)

    closures = {
        "sup": lambda: supervised_loss([forward(n, images) for n in nets], labels),
        "ct": lambda: cross_teacher_loss([forward(n, images).probs for n in nets], teachers),
        "hc": lambda: hc_loss(feats(0), assign[0], hcm[0], banks[0], 0.5),
        "lc": lambda: lc_loss(feats(0), peer, assign[0], lcm, banks[0], banks[1], 0.5),
    }
    params = [p for n in nets for p in n.parameters()]
    return params, closures


def check_term(params, closure, step=1e-3):
    """Relative errors between autograd and central differences for ``closure``."""
    for p in params:
        p.grad = None
    closure().backward()
    analytic = [p.grad.clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    numeric = central_differences(closure, params, step)
    return relative_errors(analytic, numeric, floor=1e-7)
