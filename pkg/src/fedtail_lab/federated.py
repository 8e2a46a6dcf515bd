"""FedAvg simulation with leave-one-domain-out evaluation."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autograd import AutogradError, NonFiniteLoss
from .config import ExperimentSpec, SGDConfig
from .data import DomainDataset, gen_synthetic, load_dataset_file, split
from .fedtail import CurvatureState, FedTailConfig, QTDistribution, curvature_weights, estimate_qt, total_loss
from .losses import Batch
from .model import ModelParams, ModelSpec, forward_probs, init, save_params

log = logging.getLogger(__name__)


class LayoutMismatch(ValueError):
    pass


class EmptyUpdateSet(ValueError):
    pass


class ExperimentAborted(RuntimeError):
    pass


@dataclass
class ClientState:
    client_id: int
    domain_id: int
    dataset: DomainDataset
    local_params: Optional[ModelParams] = None
    momentum: Optional[np.ndarray] = None
    curvature: Optional[CurvatureState] = None
    seed: int = 0
    step: int = 0

    @property
    def num_train(self) -> int:
        return int(self.dataset.train_idx.size)


@dataclass
class ServerState:
    global_params: ModelParams
    teacher_params: ModelParams
    qt: Optional[QTDistribution] = None
    round: int = 0

    @classmethod
    def start(cls, params: ModelParams, qt: Optional[QTDistribution] = None) -> "ServerState":
        return cls(params, params, qt, 0)


@dataclass
class RoundReport:
    round: int
    losses: dict = field(default_factory=dict)
    gammas: list = field(default_factory=list)
    coherence_dot: Optional[float] = None
    val_acc: Optional[float] = None
    heldout_acc: Optional[float] = None
    heldout_macro: Optional[float] = None
    heldout_per_class: list = field(default_factory=list)
    failed_clients: list = field(default_factory=list)
    wall_ms: float = 0.0
    seed: Optional[int] = None
    held_out: Optional[str] = None


# -- optimisation -----------------------------------------------------------

def sgd_step(theta: np.ndarray, grad: np.ndarray, buf: Optional[np.ndarray], lr: float,
             sgd: SGDConfig) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """One SGD update with L2 weight decay and heavy-ball (optionally Nesterov) momentum."""
    g = grad + sgd.weight_decay * theta if sgd.weight_decay else grad
    if sgd.momentum:
        buf = g.copy() if buf is None else sgd.momentum * buf + g
        g = g + sgd.momentum * buf if sgd.nesterov else buf
    return theta - lr * g, buf


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _shuffle_rng(client: ClientState, round_idx: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[client.seed, round_idx]))


def local_train_epoch(client: ClientState, global_params: ModelParams, sgd: SGDConfig,
                      cfg: FedTailConfig, qt: Optional[QTDistribution] = None,
                      teacher: Optional[ModelParams] = None, round_idx: int = 0):
    """One pass over the client's training split starting from ``global_params``.

    Mutates the client's optimiser/curvature state and returns
    ``(local_params, fragment)`` where the fragment holds mean per-term losses.
    """
    if client.num_train == 0:
        raise ValueError(f"client {client.client_id} has no training samples")
    lr = sgd.resolved_lr(cfg)
    x, y = client.dataset.train()
    theta = global_params.values.copy()
    params = global_params
    C = global_params.spec.num_classes
    if client.curvature is None:
        client.curvature = CurvatureState.cold(C, client.seed)
    sums: dict = {}
    dots = []
    nb = 0
    for idx in iter_batches(y.size, sgd.batch_size, _shuffle_rng(client, round_idx)):
        batch = Batch(x[idx], y[idx], client.domain_id)
        params = global_params.with_values(theta)
        if cfg.active("classwise") and client.step % cfg.curvature_refresh_period == 0:
            client.curvature = curvature_weights(
                params, batch, cfg.power_iters, client.seed, client.curvature, client.step)
        # overflow on a diverging client is caught by the finiteness checks below
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            bd, grad = total_loss(params, batch, cfg, qt, client.curvature, teacher)
        theta, client.momentum = sgd_step(theta, grad.values, client.momentum, lr, sgd)
        if not np.all(np.isfinite(theta)):
            raise NonFiniteLoss(f"client {client.client_id}: parameters diverged at step {client.step}")
        client.step += 1
        nb += 1
        for k in ("cls", "adv", "sharp_er", "classwise_term", "coh", "total"):
            sums[k] = sums.get(k, 0.0) + getattr(bd, k)
        if bd.coherence_dot is not None:
            dots.append(bd.coherence_dot)
    client.local_params = global_params.with_values(theta)
    fragment = {
        "losses": {k: v / nb for k, v in sums.items()},
        "gammas": [float(g) for g in client.curvature.gamma],
        "coherence_dot": float(np.mean(dots)) if dots else None,
        "num_train": client.num_train,
    }
    return client.local_params, fragment


# -- aggregation ------------------------------------------------------------

def fedavg(updates: Sequence[tuple], uniform: bool = False) -> ModelParams:
    """Count-weighted coordinate mean of ``(params, n)`` pairs, summed in the given order.

    The result is clipped to the coordinate-wise envelope of the inputs so that
    rounding never pushes it outside.
    """
    if not updates:
        raise EmptyUpdateSet("no client updates to aggregate")
    first = updates[0][0]
    for p, n in updates:
        if p.layout != first.layout:
            raise LayoutMismatch("client parameter layouts differ")
        if n <= 0:
            raise ValueError("sample counts must be > 0")
    counts = np.array([1.0 if uniform else float(n) for _, n in updates])
    weights = counts / counts.sum()
    acc = np.zeros(len(first))
    lo = first.values.copy()
    hi = first.values.copy()
    for (p, _), w in zip(updates, weights):
        acc = acc + w * p.values
        lo = np.minimum(lo, p.values)
        hi = np.maximum(hi, p.values)
    return first.with_values(np.clip(acc, lo, hi))


def teacher_update(teacher: ModelParams, global_params: ModelParams, momentum: float) -> ModelParams:
    """``momentum * teacher + (1 - momentum) * global``."""
    if not 0 <= momentum <= 1:
        raise ValueError("momentum must lie in [0, 1]")
    return teacher.with_values(momentum * teacher.values + (1.0 - momentum) * global_params.values)


# -- evaluation -------------------------------------------------------------

def accuracy(params: ModelParams, x, y) -> dict:
    """Overall accuracy, per-class accuracy (None for absent classes) and their macro mean."""
    y = np.asarray(y)
    C = params.spec.num_classes
    if y.size == 0:
        return {"acc": None, "per_class": [None] * C, "macro": None}
    pred = np.argmax(forward_probs(params, x), axis=1)
    hit = pred == y
    per_class = []
    for c in range(C):
        m = y == c
        per_class.append(float(hit[m].mean()) if m.any() else None)
    present = [a for a in per_class if a is not None]
    return {"acc": float(hit.mean()), "per_class": per_class, "macro": float(np.mean(present))}


# -- rounds -----------------------------------------------------------------

def run_round(server: ServerState, clients: Sequence[ClientState], sgd: SGDConfig,
              cfg: FedTailConfig, heldout: Optional[DomainDataset] = None,
              uniform: bool = False, threads: int = 1) -> RoundReport:
    """Broadcast, local epochs, FedAvg, teacher EMA, evaluation."""
    t0 = time.perf_counter()
    order = sorted(clients, key=lambda c: c.client_id)
    round_idx = server.round

    def work(client):
        try:
            return local_train_epoch(client, server.global_params, sgd, cfg, server.qt,
                                     server.teacher_params, round_idx)
        except AutogradError as exc:
            log.warning("client %d dropped from round %d: %s", client.client_id, round_idx, exc)
            return None

    if threads > 1 and len(order) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, order))
    else:
        results = [work(c) for c in order]

    ok = [(c, r) for c, r in zip(order, results) if r is not None]
    failed = [c.client_id for c, r in zip(order, results) if r is None]
    if not ok:
        raise ExperimentAborted(f"round {round_idx}: every client failed")

    server.global_params = fedavg([(r[0], c.num_train) for c, r in ok], uniform)
    server.teacher_params = teacher_update(server.teacher_params, server.global_params, cfg.teacher_momentum)
    server.round += 1

    frags = [r[1] for _, r in ok]
    losses = {k: float(np.mean([f["losses"][k] for f in frags])) for k in frags[0]["losses"]}
    gammas = np.mean([f["gammas"] for f in frags], axis=0).tolist()
    dots = [f["coherence_dot"] for f in frags if f["coherence_dot"] is not None]

    vx = [c.dataset.val()[0] for c in order]
    vy = [c.dataset.val()[1] for c in order]
    val = accuracy(server.global_params, np.concatenate(vx), np.concatenate(vy))
    report = RoundReport(
        round=server.round, losses=losses, gammas=gammas,
        coherence_dot=float(np.mean(dots)) if dots else None,
        val_acc=val["acc"], failed_clients=failed)
    if heldout is not None:
        ev = accuracy(server.global_params, heldout.x, heldout.y)
        report.heldout_acc = ev["acc"]
        report.heldout_macro = ev["macro"]
        report.heldout_per_class = ev["per_class"]
    report.wall_ms = (time.perf_counter() - t0) * 1000.0
    return report


# -- experiments ------------------------------------------------------------

def load_domains(spec: ExperimentSpec) -> list[DomainDataset]:
    if spec.data_files:
        out = []
        for i, path in enumerate(spec.data_files):
            out.append(load_dataset_file(path, i, spec.data.num_classes, spec.data.feature_dim))
        return out
    return gen_synthetic(spec.data)


def heldout_indices(spec: ExperimentSpec, domains: Sequence[DomainDataset]) -> list[int]:
    if spec.held_out == "all":
        return list(range(len(domains)))
    for d in domains:
        if d.name == spec.held_out:
            return [d.domain_id]
    raise ValueError(f"no domain named {spec.held_out!r}")


def model_spec_for(spec: ExperimentSpec, num_domains: int, seed: int) -> ModelSpec:
    return ModelSpec(input_dim=spec.data.feature_dim, num_classes=spec.data.num_classes,
                     num_domains=num_domains, feature_dims=spec.model.feature_dims,
                     discriminator_dims=spec.model.discriminator_dims, seed=seed)


def build_clients(spec: ExperimentSpec, domains: Sequence[DomainDataset], held: int, seed: int):
    clients = []
    for d in domains:
        if d.domain_id == held:
            continue
        ds = split(d, spec.train_frac, spec.data.seed)
        clients.append(ClientState(client_id=d.domain_id, domain_id=d.domain_id, dataset=ds,
                                   seed=seed * 1000 + d.domain_id))
    return clients


def frequency_qt(clients: Sequence[ClientState], num_domains: int, num_classes: int) -> QTDistribution:
    """Q_T rows from the clients' training class counts; domains without a client get a uniform row."""
    counts = [np.ones(num_classes) for _ in range(num_domains)]
    for c in clients:
        counts[c.domain_id] = c.dataset.train_counts()
    return estimate_qt(counts)


def run_split(spec: ExperimentSpec, domains: Sequence[DomainDataset], held: int, seed: int,
              checkpoint_dir: Optional[Path] = None,
              on_round: Optional[Callable[[RoundReport, ServerState], None]] = None) -> list[RoundReport]:
    K = len(domains)
    clients = build_clients(spec, domains, held, seed)
    params = init(model_spec_for(spec, K, seed))
    server = ServerState.start(params, frequency_qt(clients, K, spec.data.num_classes))
    reports = []
    for _ in range(spec.rounds):
        rep = run_round(server, clients, spec.sgd, spec.fedtail, domains[held],
                        spec.uniform_fedavg, spec.threads)
        rep.seed = seed
        rep.held_out = domains[held].name
        reports.append(rep)
        if checkpoint_dir is not None and spec.checkpoint_every > 0 and rep.round % spec.checkpoint_every == 0:
            checkpoint_dir.mkdir(parents=True, exist_ok=True)
            save_params(server.global_params, checkpoint_dir / f"round_{rep.round}.params")
            save_params(server.teacher_params, checkpoint_dir / f"round_{rep.round}.teacher.params")
        if on_round is not None:
            on_round(rep, server)
    return reports


def run_experiment(spec: ExperimentSpec, checkpoint_root: Optional[Path] = None,
                   on_round=None) -> list[RoundReport]:
    """Leave-one-domain-out over every requested held-out domain and ``num_seeds`` seeds."""
    domains = load_domains(spec)
    if len(domains) < 2:
        raise ValueError("leave-one-domain-out needs at least 2 domains")
    reports = []
    for s in range(spec.num_seeds):
        seed = spec.seed + s
        for held in heldout_indices(spec, domains):
            ckpt = None
            if checkpoint_root is not None:
                ckpt = checkpoint_root / f"seed{seed}_{domains[held].name}"
            reports.extend(run_split(spec, domains, held, seed, ckpt, on_round))
    return reports


def summarize(reports: Sequence[RoundReport]) -> dict:
    """Final-round held-out accuracy per (seed, split), split means per seed, and mean/std over seeds."""
    last: dict = {}
    for r in reports:
        key = (r.seed, r.held_out)
        if key not in last or r.round > last[key].round:
            last[key] = r
    seeds = sorted({k[0] for k in last})
    splits = list(dict.fromkeys(k[1] for k in last))
    per_seed = []
    per_seed_macro = []
    for s in seeds:
        per_seed.append(float(np.mean([last[(s, h)].heldout_acc for h in splits])))
        per_seed_macro.append(float(np.mean([last[(s, h)].heldout_macro for h in splits])))
    per_split = {h: float(np.mean([last[(s, h)].heldout_acc for s in seeds])) for h in splits}
    return {
        "seeds": seeds,
        "splits": splits,
        "final": {f"{s}/{h}": last[(s, h)].heldout_acc for s in seeds for h in splits},
        "per_split": per_split,
        "per_seed": per_seed,
        "per_seed_macro": per_seed_macro,
        "mean": float(np.mean(per_seed)),
        "std": float(np.std(per_seed, ddof=1)) if len(per_seed) > 1 else 0.0,
        "macro_mean": float(np.mean(per_seed_macro)),
    }
