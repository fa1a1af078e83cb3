"""Run the six-variant ranking micro-study and print ranks, degradation and path ratios.

    python scripts/micro_study.py --seeds 0,1,2 --out runs/study
"""

import argparse
import csv
import time
from pathlib import Path

from flowlab import evalrank as E


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    ap.add_argument("--steps", type=int, default=E.StudyConfig.steps, help="training steps per variant")
    ap.add_argument("--out", type=Path, default=None, help="directory for records.csv and summary.csv")
    args = ap.parse_args()

    cfg = E.StudyConfig(seeds=tuple(int(s) for s in args.seeds.split(",")), steps=args.steps)
    t0 = time.time()

    def progress(seed, dataset, variant, records, ratio):
        print(f"[{time.time() - t0:6.0f}s] seed {seed} {dataset} {variant}: path ratio {ratio:.4f}", flush=True)

    res = E.run_study(cfg, progress)
    summary = []
    for seed in cfg.seeds:
        print(f"\nseed {seed}")
        print(E.format_rank_table(res.rows(seed)))
        for v in cfg.variants:
            deg = E.relative_degradation(res, seed, "gaussmix2d", v)
            ratio = res.path_ratio[(seed, "gaussmix2d", v)]
            summary.append((seed, v, deg, ratio))
            print(f"  {v:24s} 50->5 degradation {deg:7.4f}  path ratio {ratio:.4f}")

    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        for seed in cfg.seeds:
            E.write_records_csv(res.records[seed], args.out / f"records_seed{seed}.csv")
            E.write_rank_csv(res.rows(seed), args.out / f"ranks_seed{seed}.csv")
        with open(args.out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "variant", "degradation_50_to_5", "path_ratio"])
            w.writerows(summary)


if __name__ == "__main__":
    main()
