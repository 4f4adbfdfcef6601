"""Training loop: one student-teacher pair per network, cross-routed pseudo-labels,
memory-bank contrastive terms, SGD with poly decay and EMA teachers.

Baseline topologies share the same step with a different routing of
unsupervised targets:

* ``cross_teacher``   student i <- mean over teachers j != i
* ``mean_teacher``    student i <- its own teacher
* ``ensemble``        as mean_teacher; evaluation averages all students
* ``dual_teacher``    student i <- mean over all teachers
* ``mutual``          student i <- argmax of the other students, no teachers
* ``self_training``   phase 1 supervised, phase 2 fresh student <- frozen phase-1 net
* ``supervised_only`` labeled loss only

The memory banks and contrastive terms are used by ``cross_teacher`` only.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .bank import MemoryBank, compute_k, select_candidates
from .config import TrainConfig, config_from_dict, config_to_dict, format_config
from .data import IGNORE, SplitSpec, augment, load_dataset, split_labeled, write_split
from .errors import ConfigError, DivergenceError
from .evaluation import evaluate, miou, pseudo_label_quality
from .losses import (
    hc_loss,
    hc_mask,
    lc_loss,
    lc_mask,
    make_pseudo_labels,
    routed_cross_entropy,
    supervised_loss,
    weighted_terms,
)
from .model import ForwardOutput, SegNet, StudentTeacherPair, ema_update, forward, init_model

log = logging.getLogger(__name__)

TEACHERLESS = ("mutual",)


def poly_lr(base_lr: float, it: int, max_iters: int, power: float) -> float:
    """base_lr * (1 - it / max_iters) ** power."""
    if not 0 <= it <= max_iters:
        raise ValueError(f"poly_lr: iteration {it} outside [0, {max_iters}]")
    if max_iters == 0:
        return base_lr
    return base_lr * (1.0 - it / max_iters) ** power


def downsample_labels(labels: torch.Tensor, stride: int) -> torch.Tensor:
    """Nearest-neighbour label downsampling: the pixel nearest each cell centre."""
    return labels[:, stride // 2 :: stride, stride // 2 :: stride]


@dataclass
class TrainData:
    labeled: list
    unlabeled: list = field(default_factory=list)
    val: list = field(default_factory=list)


@dataclass
class Batch:
    images: torch.Tensor  # (N, H, W, 3)
    labels: torch.Tensor  # (N, H, W) int64; hidden for unlabeled batches


@dataclass
class MetricsRecord:
    iter: int
    lr: float
    loss_sup: float = 0.0
    loss_ct: float = 0.0
    loss_hc: float = 0.0
    loss_lc: float = 0.0
    weighted_sup: float = 0.0
    weighted_ct: float = 0.0
    weighted_hc: float = 0.0
    weighted_lc: float = 0.0
    total: float = 0.0
    banks_full: bool = False
    bank_fill: list = field(default_factory=list)
    pl_agreement: Optional[float] = None
    pl_accuracy: Optional[float] = None
    miou: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in dataclasses.asdict(self).items() if v is not None})


@dataclass
class TrainState:
    config: TrainConfig
    pairs: list
    banks: list
    optimizer: torch.optim.Optimizer
    rng_labeled: np.random.Generator
    rng_unlabeled: np.random.Generator
    bank_gen: torch.Generator
    n_labeled: int
    iteration: int = 0
    unlabeled_seen: int = 0
    frozen: Optional[SegNet] = None  # self-training pseudo-labeler
    phase_start: int = 0
    phase_iters: int = 0

    @property
    def students(self):
        return [p.student for p in self.pairs]

    @property
    def teachers(self):
        return [p.teacher for p in self.pairs]


def _pair_seed(config: TrainConfig, index: int, phase: int = 0) -> int:
    ss = np.random.SeedSequence([config.seed, config.backbone.init_seed, index, phase])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _make_pairs(config: TrainConfig, phase: int = 0):
    pairs = []
    for i in range(config.pairs):
        backbone = dataclasses.replace(config.backbone, init_seed=_pair_seed(config, i, phase))
        pairs.append(StudentTeacherPair.from_config(backbone, config.ema_decay))
    return pairs


def _make_optimizer(config: TrainConfig, pairs):
    params = [p for pair in pairs for p in pair.student.parameters()]
    return torch.optim.SGD(
        params, lr=config.base_lr, momentum=config.momentum, weight_decay=config.weight_decay
    )


def init_state(config: TrainConfig, n_labeled: int) -> TrainState:
    if n_labeled < 1:
        raise ConfigError("labeled set is empty")
    pairs = _make_pairs(config)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    bank_gen = torch.Generator().manual_seed(int(seeds[2].generate_state(1, dtype=np.uint64)[0] >> 1))
    return TrainState(
        config=config,
        pairs=pairs,
        banks=[
            MemoryBank(config.backbone.num_classes, config.bank_capacity, config.backbone.feature_dim)
            for _ in pairs
        ],
        optimizer=_make_optimizer(config, pairs),
        rng_labeled=np.random.default_rng(seeds[0]),
        rng_unlabeled=np.random.default_rng(seeds[1]),
        bank_gen=bank_gen,
        n_labeled=n_labeled,
        phase_iters=config.max_iters // 2 if config.topology == "self_training" else config.max_iters,
    )


def draw_batch(samples, rng: np.random.Generator, size: int, crop: int) -> Batch:
    idx = rng.choice(len(samples), size=size, replace=len(samples) < size)
    aug = [augment(samples[i], rng, crop) for i in idx]
    return Batch(
        torch.from_numpy(np.stack([a.image for a in aug])),
        torch.from_numpy(np.stack([a.label for a in aug]).astype(np.int64)),
    )


# --------------------------------------------------------------------------
# one step


def _unsupervised_targets(state: TrainState, unl_images, out_u):
    """Pseudo-label targets per student, plus the maps used for diagnostics."""
    topo = state.config.topology
    n = len(state.pairs)
    if topo == "mutual":
        maps = [make_pseudo_labels(o) for o in out_u]
        return [[maps[j] for j in range(n) if j != i] for i in range(n)], maps
    if topo == "self_training":
        with torch.no_grad():
            frozen = make_pseudo_labels(forward(state.frozen, unl_images))
        return [[frozen] for _ in range(n)], [frozen]
    with torch.no_grad():
        maps = [make_pseudo_labels(forward(t, unl_images)) for t in state.teachers]
    if topo == "cross_teacher":
        return [[maps[j] for j in range(n) if j != i] for i in range(n)], maps
    if topo in ("mean_teacher", "ensemble"):
        return [[maps[i]] for i in range(n)], maps
    if topo == "dual_teacher":
        return [list(maps) for _ in range(n)], maps
    raise ConfigError(f"topology {topo} has no unsupervised targets")


def _agreement(maps) -> Optional[float]:
    if len(maps) < 2:
        return None
    labels = [m.argmax(-1) for m in maps]
    vals = [
        float((labels[i] == labels[j]).float().mean())
        for i in range(len(labels))
        for j in range(i + 1, len(labels))
    ]
    return sum(vals) / len(vals)


def _contrastive_terms(state: TrainState, outs, gt_all):
    cfg = state.config.contrast
    n = len(outs)
    feats = [F.normalize(o.features, dim=-1) for o in outs]
    assign = []
    for o in outs:
        a = o.hard_labels
        if cfg.assign_with_gt:
            a = torch.where(gt_all != IGNORE, gt_all, a)
        assign.append(a)
    masks = [hc_mask(o.confidence, cfg.threshold) for o in outs]
    hc = sum(
        hc_loss(feats[i], assign[i], masks[i], state.banks[i], cfg.temperature) for i in range(n)
    )
    lc = 0
    for i in range(n):
        peers = [j for j in range(n) if j != i]
        lc = lc + sum(
            lc_loss(
                feats[i],
                feats[j],
                assign[i],
                lc_mask(masks[i], outs[i].confidence, outs[j].confidence, cfg.directional),
                state.banks[i],
                state.banks[j],
                cfg.temperature,
            )
            for j in peers
        ) / len(peers)
    return hc, lc


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def train_step(state: TrainState, labeled: Batch, unlabeled: Optional[Batch] = None) -> MetricsRecord:
    """One iteration; mutates ``state`` and returns its metrics record."""
    config = state.config
    topo = config.topology
    stride = config.backbone.stride
    it = state.iteration - state.phase_start
    lr = poly_lr(config.base_lr, it, state.phase_iters, config.lr_power)

    gt_l = downsample_labels(labeled.labels, stride)
    out_l = [forward(m, labeled.images) for m in state.students]
    comps = {"sup": supervised_loss(out_l, gt_l)}
    record = MetricsRecord(iter=state.iteration, lr=lr)

    use_unlabeled = unlabeled is not None and topo != "supervised_only"
    if topo == "self_training" and state.frozen is None:
        use_unlabeled = False
    out_u = None
    if use_unlabeled:
        state.unlabeled_seen += len(unlabeled.images)
        out_u = [forward(m, unlabeled.images) for m in state.students]
        targets, maps = _unsupervised_targets(state, unlabeled.images, out_u)
        comps["ct"] = routed_cross_entropy([o.probs for o in out_u], targets)
        record.pl_agreement = _agreement(maps)
        gt_u = downsample_labels(unlabeled.labels, stride)
        record.pl_accuracy = sum(pseudo_label_quality(m, gt_u) for m in maps) / len(maps)

    banks_full = False
    if topo == "cross_teacher":
        k = compute_k(state.n_labeled, config.bank_capacity)
        with torch.no_grad():
            for pair, bank in zip(state.pairs, state.banks):
                cands = select_candidates(
                    forward(pair.teacher, labeled.images),
                    gt_l,
                    k,
                    generator=state.bank_gen,
                    selection=config.contrast.selection,
                )
                for c, vecs in enumerate(cands):
                    bank.push(c, vecs)
        banks_full = all(b.is_full() for b in state.banks)
        record.bank_fill = [b.fill_fractions() for b in state.banks]
        if banks_full and (config.weights.hc > 0 or config.weights.lc > 0):
            if out_u is not None:
                outs = [ForwardOutput.cat([a, b]) for a, b in zip(out_l, out_u)]
                gt_all = torch.cat([gt_l, torch.full_like(gt_u, IGNORE)])
            else:
                outs, gt_all = out_l, gt_l
            comps["hc"], comps["lc"] = _contrastive_terms(state, outs, gt_all)
    record.banks_full = banks_full

    # zero-weight terms stay out of the graph
    weights = config.weights
    for name in list(comps):
        if getattr(weights, name) == 0 and torch.is_tensor(comps[name]):
            comps[name] = comps[name].detach()
    terms = weighted_terms(comps, weights, banks_full)
    total = terms["sup"] + terms["ct"] + terms["hc"] + terms["lc"]

    for name in ("sup", "ct", "hc", "lc"):
        setattr(record, f"loss_{name}", _scalar(comps.get(name, 0.0)))
        setattr(record, f"weighted_{name}", _scalar(terms[name]))
    record.total = _scalar(total)
    if not np.isfinite(record.total):
        raise DivergenceError(f"non-finite loss at iteration {state.iteration}", record)

    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    if torch.is_tensor(total) and total.requires_grad:
        total.backward()
    state.optimizer.step()

    if topo not in TEACHERLESS:
        for pair in state.pairs:
            ema_update(pair)
    state.iteration += 1
    return record


# --------------------------------------------------------------------------
# evaluation helpers


def eval_models(state: TrainState, network: Optional[str] = None):
    network = network or state.config.eval_network
    if state.config.topology == "ensemble":
        network = "ensemble"
    if network == "ensemble":
        return state.students
    if network == "teacherA":
        if state.config.topology in TEACHERLESS:
            raise ConfigError("eval_network: teacherA unavailable for a teacherless topology")
        return [state.pairs[0].teacher]
    return [state.pairs[0].student]


def evaluate_state(state: TrainState, samples, network=None) -> float:
    cm = evaluate(
        eval_models(state, network), samples, state.config.backbone.num_classes, state.config.eval_batch
    )
    return miou(cm)[1]


# --------------------------------------------------------------------------
# checkpoints


def state_tensors(state: TrainState) -> dict:
    tensors = {}
    momentum = state.optimizer.state
    for i, pair in enumerate(state.pairs):
        for name, t in pair.student.state_dict().items():
            tensors[f"pair{i}/student/{name}"] = t
        for name, t in pair.teacher.state_dict().items():
            tensors[f"pair{i}/teacher/{name}"] = t
        for name, p in pair.student.named_parameters():
            buf = momentum.get(p, {}).get("momentum_buffer")
            if buf is not None:
                tensors[f"pair{i}/momentum/{name}"] = buf
    if state.frozen is not None:
        for name, t in state.frozen.state_dict().items():
            tensors[f"frozen/{name}"] = t
    return tensors


def save_state(state: TrainState, path):
    blobs = {f"bank{i}": b.to_bytes() for i, b in enumerate(state.banks)}
    blobs["rng_bank"] = state.bank_gen.get_state().numpy().tobytes()
    meta = {
        "rng_labeled": state.rng_labeled.bit_generator.state,
        "rng_unlabeled": state.rng_unlabeled.bit_generator.state,
        "n_labeled": state.n_labeled,
        "unlabeled_seen": state.unlabeled_seen,
        "phase_start": state.phase_start,
        "phase_iters": state.phase_iters,
    }
    return ckpt_io.save_checkpoint(
        path,
        config=config_to_dict(state.config),
        iteration=state.iteration,
        tensors=state_tensors(state),
        blobs=blobs,
        meta=meta,
    )


def _load_module(module, tensors, prefix):
    sd = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(sd)


def restore_state(checkpoint: ckpt_io.Checkpoint) -> TrainState:
    config = config_from_dict(checkpoint.config)
    meta = checkpoint.manifest["meta"]
    state = init_state(config, meta["n_labeled"])
    tensors = checkpoint.tensors
    for i, pair in enumerate(state.pairs):
        _load_module(pair.student, tensors, f"pair{i}/student/")
        _load_module(pair.teacher, tensors, f"pair{i}/teacher/")
        for name, p in pair.student.named_parameters():
            key = f"pair{i}/momentum/{name}"
            if key in tensors:
                state.optimizer.state[p]["momentum_buffer"] = tensors[key].clone()
    if any(k.startswith("frozen/") for k in tensors):
        state.frozen = init_model(config.backbone)
        _load_module(state.frozen, tensors, "frozen/")
        state.frozen.requires_grad_(False)
    state.banks = [MemoryBank.from_bytes(checkpoint.blobs[f"bank{i}"]) for i in range(config.pairs)]
    rng_bank = torch.frombuffer(bytearray(checkpoint.blobs["rng_bank"]), dtype=torch.uint8)
    state.bank_gen.set_state(rng_bank.clone())
    state.rng_labeled.bit_generator.state = meta["rng_labeled"]
    state.rng_unlabeled.bit_generator.state = meta["rng_unlabeled"]
    state.iteration = checkpoint.iteration
    state.unlabeled_seen = meta["unlabeled_seen"]
    state.phase_start = meta["phase_start"]
    state.phase_iters = meta["phase_iters"]
    return state


# --------------------------------------------------------------------------
# full runs


@dataclass
class RunResult:
    records: list
    checkpoints: list
    state: TrainState
    final_miou: Optional[float] = None


class _RunWriter:
    def __init__(self, out_dir):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.checkpoints = []
        if self.out_dir is not None:
            (self.out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            self.log = open(self.out_dir / "metrics.jsonl", "a")

    def record(self, rec: MetricsRecord):
        if self.out_dir is not None:
            self.log.write(rec.to_json() + "\n")
            self.log.flush()

    def checkpoint(self, state: TrainState, name=None):
        if self.out_dir is None:
            return
        path = self.out_dir / "checkpoints" / (name or f"iter_{state.iteration:06d}.ckpt")
        save_state(state, path)
        self.checkpoints.append(path)

    def close(self):
        if self.out_dir is not None:
            self.log.close()


def _loop(state, data, writer, records, n_steps, use_unlabeled):
    config = state.config
    for _ in range(n_steps):
        lab = draw_batch(data.labeled, state.rng_labeled, config.batch_labeled, config.crop)
        unl = None
        if use_unlabeled and data.unlabeled and config.batch_unlabeled > 0:
            unl = draw_batch(data.unlabeled, state.rng_unlabeled, config.batch_unlabeled, config.crop)
        rec = train_step(state, lab, unl)
        done = state.iteration
        last = done == config.max_iters
        if data.val and (last or (config.eval_interval and done % config.eval_interval == 0)):
            rec.miou = evaluate_state(state, data.val)
        if last or done % config.log_interval == 0 or rec.miou is not None:
            records.append(rec)
            writer.record(rec)
        if config.checkpoint_interval and done % config.checkpoint_interval == 0 and not last:
            writer.checkpoint(state)


def run(config: TrainConfig, data: TrainData, out_dir=None, resume=None) -> RunResult:
    """Train from scratch (or from ``resume``) for ``config.max_iters`` iterations.

    With ``out_dir`` the run writes ``config.cfg``, ``metrics.jsonl`` and
    ``checkpoints/``. An initial checkpoint is always written.
    """
    if resume is not None:
        state = restore_state(ckpt_io.load_checkpoint(resume))
        if state.config.topology == "self_training":
            raise ConfigError("resume: not supported for self_training runs")
        config = state.config
    else:
        state = init_state(config, len(data.labeled))
    writer = _RunWriter(out_dir)
    if out_dir is not None:
        (Path(out_dir) / "config.cfg").write_text(format_config(config))
    records = []
    try:
        if resume is None:
            writer.checkpoint(state)
        if config.topology == "self_training":
            _run_self_training(state, data, writer, records)
        else:
            _loop(state, data, writer, records, config.max_iters - state.iteration, True)
        if state.iteration > 0 and (resume is None or records):
            writer.checkpoint(state)
    finally:
        writer.close()
    final = records[-1].miou if records else None
    return RunResult(records, writer.checkpoints, state, final)


def _run_self_training(state: TrainState, data: TrainData, writer, records):
    config = state.config
    phase1 = config.max_iters // 2
    _loop(state, data, writer, records, phase1, use_unlabeled=False)
    writer.checkpoint(state, "phase1.ckpt")

    frozen = copy.deepcopy(state.pairs[0].student)
    frozen.requires_grad_(False)
    state.frozen = frozen
    state.pairs = _make_pairs(config, phase=1)
    state.optimizer = _make_optimizer(config, state.pairs)
    state.phase_start = state.iteration
    state.phase_iters = config.max_iters - phase1
    _loop(state, data, writer, records, state.phase_iters, use_unlabeled=True)


def run_baseline_topology(config: TrainConfig, data: TrainData, out_dir=None) -> RunResult:
    if config.topology == "cross_teacher":
        raise ConfigError("run_baseline_topology: topology must not be cross_teacher")
    return run(config, data, out_dir)


# --------------------------------------------------------------------------
# data from disk


def load_train_data(config: TrainConfig, split_dir=None) -> TrainData:
    if not config.data_dir:
        raise ConfigError("data_dir: not set")
    _, samples = load_dataset(config.data_dir)
    split = split_labeled(samples, SplitSpec(Fraction(config.labeled_fraction), config.split_seed))
    if split_dir is not None:
        write_split(Path(split_dir) / "labeled.txt", split.labeled)
        write_split(Path(split_dir) / "unlabeled.txt", split.unlabeled)
    val = load_dataset(config.val_dir)[1] if config.val_dir else []
    return TrainData(
        labeled=[samples[i] for i in split.labeled],
        unlabeled=[samples[i] for i in split.unlabeled],
        val=val,
    )
