"""Train the desk-scale variant grid (or a subset) and print a mIoU table.

Results land in the same cache the acceptance suite reads, so running this
ahead of time (optionally with several processes) makes ``pytest`` fast.

    python3 scripts/run_desk_experiments.py --jobs 4
    python3 scripts/run_desk_experiments.py --variants ctt,supervised_only --seeds 0
"""
import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ctt.experiments import SEEDS, VARIANTS, run_variant

DEFAULT_CACHE = Path(__file__).resolve().parents[1] / "acceptance_cache"


def _job(args):
    name, seed, cache, runs = args
    out_dir = Path(runs) / f"{name}_seed{seed}" if runs else None
    result = run_variant(name, seed, cache_dir=cache, out_dir=out_dir)
    print(f"{name} seed {seed}: mIoU {result['final_miou']:.4f} ({result['seconds']}s)", flush=True)
    return name, seed, result


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--seeds", default=",".join(map(str, SEEDS)))
    p.add_argument("--cache", default=str(DEFAULT_CACHE))
    p.add_argument("--runs-dir", help="also keep full run directories (logs, checkpoints) here")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args(argv)
    names = [v for v in args.variants.split(",") if v]
    unknown = set(names) - set(VARIANTS)
    if unknown:
        p.error(f"unknown variants {sorted(unknown)}; choose from {list(VARIANTS)}")
    seeds = [int(s) for s in args.seeds.split(",") if s]
    jobs = [(n, s, args.cache, args.runs_dir) for n in names for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    table = {(n, s): r["final_miou"] * 100 for n, s, r in results}
    print("\nvariant\t" + "\t".join(f"seed{s}" for s in seeds) + "\tmean")
    for n in names:
        vals = [table[(n, s)] for s in seeds]
        print(f"{n}\t" + "\t".join(f"{v:.2f}" for v in vals) + f"\t{np.mean(vals):.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
