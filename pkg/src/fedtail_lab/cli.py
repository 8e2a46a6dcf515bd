"""Command-line harness: ``run``, ``ablation``, ``export-embeddings``, ``gen-data``.

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autograd import AutogradError
from .config import ConfigError, ExperimentSpec, apply_override, load_config, spec_from_dict
from .data import DatasetError, DegenerateSpec, gen_synthetic, save_dataset_file, split
from .fedtail import ABLATION_LADDER, TERMS
from .federated import ExperimentAborted, RoundReport, load_domains, run_experiment, summarize
from .model import embed, load_params

log = logging.getLogger("fedtail_lab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
LADDER_NAMES = ("baseline", "+adv", "+sharp-er", "+classwise", "+coherence")


def _setup_logging() -> None:
    level = os.environ.get("FEDTAIL_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def run_id(spec: ExperimentSpec) -> str:
    payload = dataclasses.asdict(spec)
    for k in ("out", "threads", "checkpoint_every"):
        payload.pop(k)
    blob = json.dumps(payload, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def metrics_record(rid: str, rep: RoundReport, timing: bool = False, **extra) -> dict:
    rec = {
        "run_id": rid,
        "seed": rep.seed,
        "held_out": rep.held_out,
        "round": rep.round,
        "losses": rep.losses,
        "overall_acc": rep.heldout_acc,
        "macro_acc": rep.heldout_macro,
        "per_class_acc": rep.heldout_per_class,
        "val_acc": rep.val_acc,
        "gammas": rep.gammas,
        "coherence_dot": rep.coherence_dot,
        "failed_clients": rep.failed_clients,
        "wall_clock_ms": rep.wall_ms if timing else None,
    }
    rec.update(extra)
    return rec


def write_summary_csv(path: Path, summary: dict) -> None:
    seeds = summary["seeds"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split"] + [f"seed_{s}" for s in seeds] + ["mean", "std"])
        for h in summary["splits"]:
            vals = [summary["final"][f"{s}/{h}"] for s in seeds]
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            w.writerow([h] + [_fmt(v) for v in vals] + [_fmt(np.mean(vals)), _fmt(std)])
        w.writerow(["avg"] + [_fmt(v) for v in summary["per_seed"]]
                   + [_fmt(summary["mean"]), _fmt(summary["std"])])


def execute_run(spec: ExperimentSpec, out: Path, timing: bool = False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    rid = run_id(spec)
    ckpt = out / "checkpoints" if spec.checkpoint_every > 0 else None
    with open(out / "metrics.jsonl", "w") as fh:
        def emit(rep, _server):
            fh.write(json.dumps(metrics_record(rid, rep, timing), sort_keys=True) + "\n")
        reports = run_experiment(spec, ckpt, emit)
    summary = summarize(reports)
    write_summary_csv(out / "summary.csv", summary)
    return summary


# -- ablation ---------------------------------------------------------------

def tail_classes(counts, fraction: float = 1 / 3) -> list[int]:
    """Indices of the smallest ``ceil(C * fraction)`` classes by count (ties: higher index is tail)."""
    counts = np.asarray(counts)
    k = max(1, math.ceil(len(counts) * fraction))
    order = np.argsort(-counts, kind="stable")
    return sorted(int(c) for c in order[-k:])


def ladder_spec(spec: ExperimentSpec, terms: Sequence[str]) -> ExperimentSpec:
    ft = dataclasses.replace(spec.fedtail, terms=tuple(terms))
    return dataclasses.replace(spec, fedtail=ft)


def run_ablation(spec: ExperimentSpec, on_record=None) -> list[dict]:
    """Run the five-row ladder with shared seeds.

    Returns one dict per row with the summary plus per-seed tail-class macro
    accuracy (tail = smallest third of classes in the held-out domain).
    """
    domains = load_domains(spec)
    counts = {d.name: d.class_counts for d in domains}
    rows = []
    for i, terms in enumerate(ABLATION_LADDER):
        row_spec = ladder_spec(spec, terms)
        rid = run_id(row_spec)

        def emit(rep, _server, i=i, rid=rid):
            if on_record is not None:
                on_record(metrics_record(rid, rep, ablation_row=i + 1))

        reports = run_experiment(row_spec, None, emit)
        summary = summarize(reports)
        final = {(r.seed, r.held_out): r for r in reports if r.round == row_spec.rounds}
        tail_by_seed = []
        for s in summary["seeds"]:
            vals = []
            for h in summary["splits"]:
                pc = final[(s, h)].heldout_per_class
                vals.append(np.mean([pc[c] for c in tail_classes(counts[h]) if pc[c] is not None]))
            tail_by_seed.append(float(np.mean(vals)))
        rows.append({"row": i + 1, "name": LADDER_NAMES[i], "terms": terms,
                     "summary": summary, "tail_macro": tail_by_seed})
    return rows


def write_ablation_csv(path: Path, rows: list[dict]) -> None:
    splits = rows[0]["summary"]["splits"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "method"] + list(TERMS) + list(splits)
                   + ["avg", "std", "macro_avg", "tail_macro_avg"])
        for r in rows:
            s = r["summary"]
            w.writerow([r["row"], r["name"]] + [int(t in r["terms"]) for t in TERMS]
                       + [_fmt(s["per_split"][h]) for h in splits]
                       + [_fmt(s["mean"]), _fmt(s["std"]), _fmt(s["macro_mean"]),
                          _fmt(np.mean(r["tail_macro"]))])


def write_ablation_seeds_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "seed", "avg_acc", "macro_acc", "tail_macro_acc"])
        for r in rows:
            s = r["summary"]
            for j, seed in enumerate(s["seeds"]):
                w.writerow([r["row"], seed, _fmt(s["per_seed"][j]), _fmt(s["per_seed_macro"][j]),
                            _fmt(r["tail_macro"][j])])


# -- subcommands ------------------------------------------------------------

def _load(args) -> ExperimentSpec:
    spec = load_config(args.config, args.set or (), args.seed, args.out)
    changes = {}
    if args.checkpoint_every is not None:
        changes["checkpoint_every"] = args.checkpoint_every
    if args.threads is not None:
        changes["threads"] = args.threads
    return dataclasses.replace(spec, **changes) if changes else spec


def cmd_run(args) -> int:
    spec = _load(args)
    summary = execute_run(spec, Path(spec.out), args.record_timing)
    print(f"held-out accuracy {summary['mean']:.4f} +/- {summary['std']:.4f} "
          f"over {len(summary['seeds'])} seed(s); wrote {spec.out}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    spec = _load(args)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        rows = run_ablation(spec, lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"))
    write_ablation_csv(out / "ablation.csv", rows)
    write_ablation_seeds_csv(out / "ablation_seeds.csv", rows)
    for r in rows:
        s = r["summary"]
        print(f"{r['row']} {r['name']:<12} avg {s['mean']:.4f} +/- {s['std']:.4f}  "
              f"macro {s['macro_mean']:.4f}  tail {np.mean(r['tail_macro']):.4f}")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    spec = _load(args)
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    params = load_params(ckpt)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    width = params.spec.feature_width
    with open(out / "embeddings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "label"] + [f"f{j}" for j in range(width)])
        for d in load_domains(spec):
            x, y = split(d, spec.train_frac, spec.data.seed).val()
            if y.size == 0:
                continue
            feats = embed(params, x)
            for label, row in zip(y, feats):
                w.writerow([d.name, int(label)] + [_fmt(v) for v in row])
    return EXIT_OK


def cmd_gen_data(args) -> int:
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    for ov in args.set or ():
        apply_override(raw, ov)
    if args.seed is not None:
        raw.setdefault("data", {})["seed"] = args.seed
    spec = spec_from_dict(raw)
    out = Path(args.out or spec.out)
    out.mkdir(parents=True, exist_ok=True)
    for d in gen_synthetic(spec.data):
        save_dataset_file(d, out / f"{d.name}.txt")
    print(f"wrote {spec.data.num_domains} domain files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--set", action="append", metavar="K=V", help="dotted-key override, repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--checkpoint-every", type=int, metavar="N")
    common.add_argument("--threads", type=int, metavar="N")

    p = argparse.ArgumentParser(prog="fedtail", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="leave-one-domain-out federated run")
    r.add_argument("--record-timing", action="store_true", help="fill wall_clock_ms in metrics")
    r.set_defaults(func=cmd_run)
    a = sub.add_parser("ablation", parents=[common], help="five-row loss-term ladder")
    a.set_defaults(func=cmd_ablation)
    e = sub.add_parser("export-embeddings", parents=[common], help="dump F outputs on validation data")
    e.add_argument("--checkpoint", metavar="PATH")
    e.set_defaults(func=cmd_export_embeddings)
    g = sub.add_parser("gen-data", parents=[common], help="write synthetic domains as dataset files")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command != "gen-data" and not args.config:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, DatasetError, DegenerateSpec, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AutogradError, ExperimentAborted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
