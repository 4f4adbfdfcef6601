"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops and floats so that it
shares no code path with the vectorized kernels under test.
"""
from __future__ import annotations

import math
from collections import deque

import torch


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _term(pos_sim, neg_sims, temperature):
    """-log(e^{p/t} / (e^{p/t} + sum e^{n/t})), computed with a max shift."""
    logits = [pos_sim / temperature] + [n / temperature for n in neg_sims]
    m = max(logits)
    denom = sum(math.exp(v - m) for v in logits)
    return -(logits[0] - m - math.log(denom))


def hc_loss_ref(features, assign, mask, queues, temperature):
    """features: list of vectors; assign/mask: lists; queues: list (per class) of lists of vectors."""
    per_class = []
    for c, positives in enumerate(queues):
        negatives = [v for k, q in enumerate(queues) if k != c for v in q]
        terms = []
        for f, a, m in zip(features, assign, mask):
            if not m or a != c:
                continue
            neg = [_dot(f, n) for n in negatives]
            for p in positives:
                terms.append(_term(_dot(f, p), neg, temperature))
        if terms:
            per_class.append(sum(terms) / len(terms))
    return sum(per_class) / len(per_class) if per_class else 0.0


def lc_loss_ref(features, peer_features, assign, mask, queues, peer_queues, temperature):
    per_class = []
    for c in range(len(queues)):
        negatives = [v for k, q in enumerate(queues) if k != c for v in q]
        negatives += [v for k, q in enumerate(peer_queues) if k != c for v in q]
        terms = []
        for f, g, a, m in zip(features, peer_features, assign, mask):
            if not m or a != c:
                continue
            terms.append(_term(_dot(f, g), [_dot(f, n) for n in negatives], temperature))
        if terms:
            per_class.append(sum(terms) / len(terms))
    return sum(per_class) / len(per_class) if per_class else 0.0


class FifoRef:
    """Per-class bounded queue built on collections.deque."""

    def __init__(self, num_classes, capacity):
        self.capacity = capacity
        self.queues = [deque(maxlen=capacity) for _ in range(num_classes)]

    def push(self, cls, rows):
        for r in rows:
            self.queues[cls].append(tuple(r))

    def is_full(self):
        return all(len(q) == self.capacity for q in self.queues)


def central_differences(fn, params, step):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor in ``params`` (in place)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def relative_errors(analytic, numeric, floor=1e-6):
    a = torch.cat([g.reshape(-1) for g in analytic]).double()
    n = torch.cat([g.reshape(-1) for g in numeric]).double()
    return (a - n).abs() / torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(floor))
