"""Pick the coherence weight alpha by source-domain validation accuracy.

Only the clients' validation splits are used; held-out-domain accuracy never
enters the choice.  Selection seeds are disjoint from the ablation seeds.

    python scripts/select_alpha.py --config configs/ablation.json
"""

import argparse
import dataclasses
import json

import numpy as np

from fedtail_lab.config import load_config
from fedtail_lab.federated import ExperimentAborted, heldout_indices, load_domains, run_split


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--alphas", default="0.01,0.03,0.1,0.3")
    ap.add_argument("--seed", type=int, default=100)
    ap.add_argument("--num-seeds", type=int, default=5)
    args = ap.parse_args()

    base = load_config(args.config, seed=args.seed)
    base = dataclasses.replace(base, num_seeds=args.num_seeds)
    results = []
    for alpha in (float(a) for a in args.alphas.split(",")):
        spec = dataclasses.replace(base, fedtail=dataclasses.replace(base.fedtail, alpha=alpha))
        domains = load_domains(spec)
        vals, dropped, aborted = [], 0, 0
        for k in range(spec.num_seeds):
            for held in heldout_indices(spec, domains):
                try:
                    reports = run_split(spec, domains, held, spec.seed + k)
                except ExperimentAborted:
                    aborted += 1
                    vals.append(0.0)
                    continue
                vals.append(reports[-1].val_acc)
                dropped += sum(bool(r.failed_clients) for r in reports)
        results.append({"alpha": alpha, "mean_val_acc": float(np.mean(vals)),
                        "rounds_with_dropped_clients": dropped, "aborted_splits": aborted})
        print(json.dumps(results[-1]), flush=True)
    best = max(results, key=lambda r: r["mean_val_acc"])
    print(f"selected alpha {best['alpha']}")


if __name__ == "__main__":
    main()
