"""``ctt`` command-line entry point.

Subcommands: generate-data, train, eval, ablate, plot, export-features.
Exit codes: 0 success, 2 usage, 3 config, 4 data integrity, 5 divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import TOPOLOGIES, config_from_dict, load_config
from .data import SceneSpec, SplitSpec, generate_dataset, load_dataset, save_dataset, split_labeled
from .errors import CheckpointError, ConfigError, DivergenceError
from .evaluation import evaluate, export_features, format_report
from .trainer import eval_models, load_train_data, restore_state, run

EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4, 5
MODULES = ("sup", "ct", "hc", "lc")

log = logging.getLogger("ctt")


class UsageError(Exception):
    pass


def _prepare_dir(path: Path, force: bool):
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _load_config(path, overrides):
    if path and not Path(path).is_file():
        raise UsageError(f"config file {path} does not exist")
    return load_config(path, overrides)


def _parse_overrides(tokens) -> dict[str, str]:
    overrides = {}
    for tok in tokens:
        if not tok.startswith("--") or "=" not in tok:
            raise UsageError(f"unrecognized argument {tok!r}; overrides use --key=value")
        key, value = tok[2:].split("=", 1)
        overrides[key] = value
    return overrides


# --------------------------------------------------------------------------
# generate-data


def cmd_generate_data(args):
    spec = SceneSpec(
        image_size=(args.size, args.size),
        num_classes=args.classes,
        shapes_per_image=(args.shapes_min, args.shapes_max),
        color_jitter=args.color_jitter,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    out = Path(args.out)
    _prepare_dir(out, args.force)
    samples = generate_dataset(spec, args.count)
    save_dataset(out, spec, samples)
    print((out / "manifest").read_text(), end="")
    return 0


# --------------------------------------------------------------------------
# train


def cmd_train(args, extra):
    overrides = _parse_overrides(extra)
    if args.resume:
        if overrides or args.config:
            raise UsageError("--resume takes its configuration from the checkpoint")
        if not Path(args.resume).is_file():
            raise UsageError(f"checkpoint {args.resume} does not exist")
        config = config_from_dict(load_checkpoint(args.resume).config)
        # checkpoints live in <run>/checkpoints/
        out = Path(args.out) if args.out else Path(args.resume).resolve().parent.parent
        out.mkdir(parents=True, exist_ok=True)
        result = run(config, load_train_data(config), out_dir=out, resume=args.resume)
    else:
        config = _load_config(args.config, overrides)
        stem = Path(args.config).stem if args.config else "default"
        out = Path(args.out) if args.out else Path("runs") / stem
        _prepare_dir(out, args.force)
        data = load_train_data(config, split_dir=out)
        result = run(config, data, out_dir=out)
    if result.final_miou is not None:
        print(f"final mIoU {result.final_miou:.4f}")
    print(f"run directory {out}")
    return 0


# --------------------------------------------------------------------------
# eval


def _split_samples(config, split, data_dir):
    if split == "val":
        src = data_dir or config.val_dir
        if not src:
            raise ConfigError("val_dir: not set; pass --data")
        return load_dataset(src)[1]
    src = data_dir or config.data_dir
    if not src:
        raise ConfigError("data_dir: not set; pass --data")
    samples = load_dataset(src)[1]
    if split == "all":
        return samples
    parts = split_labeled(samples, SplitSpec(Fraction(config.labeled_fraction), config.split_seed))
    return [samples[i] for i in getattr(parts, split)]


def cmd_eval(args):
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    state = restore_state(load_checkpoint(args.checkpoint))
    config = state.config
    samples = _split_samples(config, args.split, args.data)
    cm = evaluate(eval_models(state, args.network), samples, config.backbone.num_classes, config.eval_batch)
    report = format_report(cm)
    print(report, end="")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(f".{args.split}.tsv")
    out.write_text(report)
    return 0


# --------------------------------------------------------------------------
# ablate


def _csv(text, cast=str):
    return [cast(v) for v in text.split(",") if v.strip()] if text else None


def _toggle_sets(text):
    if text is None:
        return None
    sets = []
    for group in text.split(";"):
        mods = frozenset(m.strip() for m in group.split(",") if m.strip())
        unknown = mods - set(MODULES)
        if unknown:
            raise UsageError(f"unknown module toggle(s) {sorted(unknown)}; choose from {MODULES}")
        if "sup" not in mods:
            raise UsageError("every toggle set must include 'sup'")
        sets.append(mods)
    if not sets:
        raise UsageError("empty toggle set; 'sup' is mandatory")
    return sets


def ablation_grid(base, toggles=None, topologies=None, pairs=None, bank_sizes=None, phis=None,
                  directional=None):
    """Cartesian product of the requested axes -> list of (key, config)."""
    axes = {
        "modules": toggles or [None],
        "topology": topologies or [None],
        "pairs": pairs or [None],
        "N": bank_sizes or [None],
        "phi": phis or [None],
        "directional": directional or [None],
    }
    grid = []
    for combo in itertools.product(*axes.values()):
        setting = dict(zip(axes, combo))
        cfg = base
        parts = []
        if setting["modules"] is not None:
            mods = setting["modules"]
            w = {m: (getattr(base.weights, m) if m in mods else 0.0) for m in MODULES}
            cfg = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, **w))
            if mods == {"sup"}:
                cfg = dataclasses.replace(cfg, topology="supervised_only")
            parts.append("modules=" + "+".join(m for m in MODULES if m in mods))
        if setting["topology"] is not None:
            cfg = dataclasses.replace(cfg, topology=setting["topology"])
            parts.append(f"topology={setting['topology']}")
        if setting["pairs"] is not None:
            n = setting["pairs"]
            topo = cfg.topology
            if n == 1 and topo == "cross_teacher":
                topo = "mean_teacher"
            cfg = dataclasses.replace(cfg, pairs=n, topology=topo)
            parts.append(f"pairs={n}")
        if setting["N"] is not None:
            n_bank = setting["N"]
            if n_bank == 0:
                cfg = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, hc=0.0, lc=0.0))
            else:
                cfg = dataclasses.replace(cfg, bank_capacity=n_bank)
            parts.append(f"N={n_bank}")
        if setting["phi"] is not None:
            cfg = dataclasses.replace(cfg, contrast=dataclasses.replace(cfg.contrast, threshold=setting["phi"]))
            parts.append(f"phi={setting['phi']}")
        if setting["directional"] is not None:
            cfg = dataclasses.replace(
                cfg, contrast=dataclasses.replace(cfg.contrast, directional=setting["directional"])
            )
            parts.append(f"directional={'on' if setting['directional'] else 'off'}")
        grid.append((";".join(parts) or "base", cfg))
    return grid


def _ablation_job(job):
    key, config, seed, data, out_dir = job
    config = dataclasses.replace(config, seed=seed)
    result = run(config, data, out_dir=out_dir)
    return key, seed, result.final_miou


def cmd_ablate(args, extra):
    toggles = _toggle_sets(args.toggles)
    base = _load_config(args.config, _parse_overrides(extra))
    on_off = {"on": True, "off": False}
    directional = None
    if args.directional:
        try:
            directional = [on_off[v] for v in _csv(args.directional)]
        except KeyError as exc:
            raise UsageError("--directional takes on/off values") from exc
    topologies = _csv(args.topologies)
    for t in topologies or []:
        if t not in TOPOLOGIES:
            raise UsageError(f"unknown topology {t!r}")
    grid = ablation_grid(
        base,
        toggles=toggles,
        topologies=topologies,
        pairs=_csv(args.pairs, int),
        bank_sizes=_csv(args.bank_sizes, int),
        phis=_csv(args.phis, float),
        directional=directional,
    )
    seeds = _csv(args.seeds, int) or [base.seed]
    data = load_train_data(base)
    runs_dir = Path(args.runs_dir) if args.runs_dir else None
    jobs = []
    for i, (key, cfg) in enumerate(grid):
        for seed in seeds:
            out_dir = runs_dir / f"cfg{i:03d}_seed{seed}" if runs_dir else None
            jobs.append((key, cfg, seed, data, out_dir))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    table = format_ablation_table([k for k, _ in grid], seeds, results)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(table)
    print(table, end="")
    return 0


def format_ablation_table(keys, seeds, results) -> str:
    scores = {(k, s): m for k, s, m in results}
    header = ["config"] + [f"miou_seed{s}" for s in seeds] + ["miou_mean"]
    lines = ["\t".join(header)]
    for key in sorted(keys):
        vals = [scores[(key, s)] for s in seeds]
        defined = [v for v in vals if v is not None]
        mean = f"{np.mean(defined):.4f}" if defined else "nan"
        lines.append("\t".join([key] + ["nan" if v is None else f"{v:.4f}" for v in vals] + [mean]))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# plot / export-features


def cmd_plot(args):
    from .plotting import plot_logs

    for p in args.log:
        if not Path(p).is_file():
            raise UsageError(f"log {p} does not exist")
    written = plot_logs(args.log, args.out)
    for path in written:
        print(path)
    return 0


def cmd_export_features(args):
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    state = restore_state(load_checkpoint(args.checkpoint))
    config = state.config
    samples = load_dataset(args.data or config.data_dir)[1]
    parts = split_labeled(samples, SplitSpec(Fraction(config.labeled_fraction), config.split_seed))
    chosen = parts.labeled[: args.per_origin] + parts.unlabeled[: args.per_origin]
    origins = ["labeled"] * len(parts.labeled[: args.per_origin]) + ["unlabeled"] * len(
        parts.unlabeled[: args.per_origin]
    )
    n = export_features(
        eval_models(state, "studentA")[0], [samples[i] for i in chosen], origins, args.out, args.cap
    )
    print(f"wrote {n} feature rows to {args.out}")
    return 0


# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="ctt", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=800)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--shapes-min", type=int, default=2)
    g.add_argument("--shapes-max", type=int, default=4)
    g.add_argument("--color-jitter", type=float, default=1.0)
    g.add_argument("--noise-std", type=float, default=0.05)
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train one configuration (extra --key=value overrides)")
    t.add_argument("--config")
    t.add_argument("--out", help="run directory (default runs/<config name>)")
    t.add_argument("--force", action="store_true")
    t.add_argument("--resume", help="continue from a checkpoint (appends to its run directory)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("val", "labeled", "unlabeled", "all"), default="val")
    e.add_argument("--data", help="dataset directory (default: from the checkpoint config)")
    e.add_argument("--network", choices=("studentA", "teacherA", "ensemble"), default="studentA")
    e.add_argument("--out", help="report path (default next to the checkpoint)")

    a = sub.add_parser("ablate", help="grid of configurations -> mIoU table")
    a.add_argument("--config")
    a.add_argument("--out", required=True, help="summary table path")
    a.add_argument("--toggles", help="';'-separated module sets, e.g. 'sup;sup,ct;sup,hc,lc'")
    a.add_argument("--topologies")
    a.add_argument("--pairs")
    a.add_argument("--bank-sizes")
    a.add_argument("--phis")
    a.add_argument("--directional", help="on,off")
    a.add_argument("--seeds")
    a.add_argument("--runs-dir")
    a.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("plot", help="charts from metrics logs")
    p.add_argument("--log", action="append", required=True)
    p.add_argument("--out", required=True)

    x = sub.add_parser("export-features", help="dump features for embedding plots")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data")
    x.add_argument("--out", required=True)
    x.add_argument("--cap", type=int, default=100)
    x.add_argument("--per-origin", type=int, default=20, help="images per origin")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if extra and args.command not in ("train", "ablate"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        if args.command == "generate-data":
            return cmd_generate_data(args)
        if args.command == "train":
            return cmd_train(args, extra)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "ablate":
            return cmd_ablate(args, extra)
        if args.command == "plot":
            return cmd_plot(args)
        if args.command == "export-features":
            return cmd_export_features(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ctt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"ctt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"ctt: data integrity error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"ctt: training diverged: {exc}", file=sys.stderr)
        if exc.record is not None:
            print(exc.record.to_json(), file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
