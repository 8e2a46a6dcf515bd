"""Held-out accuracy per round, averaged over splits and seeds.

Reads a metrics.jsonl written by ``fedtail run`` or ``fedtail ablation`` and
writes a CSV with one column per ablation row (or a single column for a plain
run).  Plotting is left to whatever tool is at hand.

    python scripts/accuracy_curves.py runs/ablation/metrics.jsonl curves.csv
"""

import argparse
import csv
import json
from collections import defaultdict

import numpy as np

NAMES = {1: "baseline", 2: "+adv", 3: "+sharp-er", 4: "+classwise", 5: "+coherence"}


def curves(path):
    acc = defaultdict(lambda: defaultdict(list))
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            acc[rec.get("ablation_row", 0)][rec["round"]].append(rec["overall_acc"])
    return {row: {r: float(np.mean(v)) for r, v in sorted(by_round.items())} for row, by_round in acc.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("metrics")
    ap.add_argument("out")
    args = ap.parse_args()
    data = curves(args.metrics)
    rows = sorted(data)
    rounds = sorted({r for row in rows for r in data[row]})
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round"] + [NAMES.get(row, "run") for row in rows])
        for r in rounds:
            w.writerow([r] + [f"{data[row][r]:.6f}" if r in data[row] else "" for row in rows])
    print(f"wrote {len(rounds)} rounds x {len(rows)} series to {args.out}")


if __name__ == "__main__":
    main()
