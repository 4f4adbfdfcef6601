"""Charts from metrics logs: loss curves, mIoU over iterations, mIoU vs labeled fraction."""
from __future__ import annotations

import json
import warnings
from fractions import Fraction
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import load_config  # noqa: E402
from .errors import ConfigError  # noqa: E402

_SAVE = dict(format="png", dpi=100, metadata={"Software": None})


def read_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _label(path) -> str:
    path = Path(path)
    return path.parent.name if path.name == "metrics.jsonl" else path.stem


def _run_info(path):
    cfg_path = Path(path).parent / "config.cfg"
    if not cfg_path.is_file():
        return None, None
    try:
        cfg = load_config(cfg_path)
    except ConfigError:
        return None, None
    return cfg.topology, float(Fraction(cfg.labeled_fraction))


def plot_losses(log_paths, out_path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in log_paths:
        recs = read_log(path)
        its = [r["iter"] for r in recs]
        for key in ("loss_sup", "loss_ct", "loss_hc", "loss_lc"):
            vals = [r.get(key, 0.0) for r in recs]
            if any(vals):
                ax.plot(its, vals, label=f"{_label(path)} {key[5:]}", linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("unweighted loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE)
    plt.close(fig)


def plot_miou(log_paths, out_path) -> bool:
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = False
    for path in log_paths:
        pts = [(r["iter"], r["miou"]) for r in read_log(path) if "miou" in r]
        if pts:
            ax.plot(*zip(*pts), marker="o", markersize=3, label=_label(path))
            drawn = True
    ax.set_xlabel("iteration")
    ax.set_ylabel("mIoU")
    if drawn:
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_path, **_SAVE)
    plt.close(fig)
    return drawn


def plot_gain(log_paths, out_path):
    """Final mIoU against labeled fraction, one series per topology (or run name)."""
    series: dict[str, list] = {}
    for path in log_paths:
        finals = [r["miou"] for r in read_log(path) if "miou" in r]
        if not finals:
            continue
        topology, frac = _run_info(path)
        name = topology or _label(path)
        if name in series and topology is None:
            name = _label(path)
        series.setdefault(name, []).append((frac if frac is not None else 0.0, finals[-1]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(series):
        pts = sorted(series[name])
        ax.plot(*zip(*pts), marker="o", label=name)
    ax.set_xlabel("labeled fraction")
    ax.set_ylabel("final mIoU")
    if series:
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_path, **_SAVE)
    plt.close(fig)
    return len(series)


def plot_logs(log_paths, out_dir) -> list[Path]:
    """Write every chart for ``log_paths`` into ``out_dir``; returns written files."""
    log_paths = [p for p in log_paths if read_log(p)]
    if not log_paths:
        warnings.warn("plot: all metrics logs are empty, nothing written")
        return []
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "loss_curves.png"]
    plot_losses(log_paths, written[0])
    if plot_miou(log_paths, out_dir / "miou.png"):
        written.append(out_dir / "miou.png")
    if plot_gain(log_paths, out_dir / "gain.png"):
        written.append(out_dir / "gain.png")
    return written
