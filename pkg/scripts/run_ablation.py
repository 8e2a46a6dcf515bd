"""Run the five-row loss-term ladder and print the trend checks.

    python scripts/run_ablation.py --config configs/ablation.json --out runs/ablation

Writes the same files as ``fedtail ablation`` (metrics.jsonl, ablation.csv,
ablation_seeds.csv) and then reports the pooled-std trend, the row 5 vs
row 1 gain and the per-seed tail-class comparison between rows 3 and 4.
"""

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from fedtail_lab.cli import run_ablation, write_ablation_csv, write_ablation_seeds_csv
from fedtail_lab.config import load_config


def trend_report(rows) -> str:
    means = [r["summary"]["mean"] for r in rows]
    pooled = math.sqrt(np.mean([np.var(r["summary"]["per_seed"], ddof=1) for r in rows]))
    lines = [f"row {r['row']} {r['name']:<12} mean {m:.4f}  std {r['summary']['std']:.4f}  "
             f"tail {np.mean(r['tail_macro']):.4f}" for r, m in zip(rows, means)]
    steps = [means[i + 1] - means[i] for i in range(len(means) - 1)]
    lines.append(f"pooled std {pooled:.4f}; steps {', '.join(f'{s:+.4f}' for s in steps)}")
    lines.append(f"row 5 - row 1: {100 * (means[-1] - means[0]):+.2f} points")
    wins = sum(b > a for a, b in zip(rows[2]["tail_macro"], rows[3]["tail_macro"]))
    lines.append(f"tail macro improves row 3 -> row 4 in {wins}/{len(rows[2]['tail_macro'])} seeds")
    return "\n".join(lines)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default=None)
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args(argv)
    if args.out is None:
        spec = load_config(args.config, args.set)
        t0 = time.perf_counter()
        rows = run_ablation(spec)
        print(f"finished in {time.perf_counter() - t0:.0f}s")
    else:
        spec = load_config(args.config, args.set, out=args.out)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        with open(out / "metrics.jsonl", "w") as fh:
            rows = run_ablation(spec, lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"))
        write_ablation_csv(out / "ablation.csv", rows)
        write_ablation_seeds_csv(out / "ablation_seeds.csv", rows)
        print(f"finished in {time.perf_counter() - t0:.0f}s; wrote {out}")
    print(trend_report(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
