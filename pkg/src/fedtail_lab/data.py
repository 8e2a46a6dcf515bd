"""Synthetic long-tailed multi-domain data, splits, and the text dataset format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd import power_rng


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        super().__init__(msg if line is None else f"line {line}: {msg}")


class SchemaError(DatasetError):
    pass


class DegenerateSpec(ValueError):
    pass


@dataclass
class DomainDataset:
    domain_id: int
    name: str
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.size:
            raise ValueError(f"x {self.x.shape} and y {self.y.shape} disagree")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label out of range")
        if self.train_idx is None:
            self.train_idx = np.arange(self.y.size)
        if self.val_idx is None:
            self.val_idx = np.arange(0)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.val_idx = np.asarray(self.val_idx, dtype=np.int64)

    def __len__(self) -> int:
        return self.y.size

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def train_counts(self) -> np.ndarray:
        return np.bincount(self.y[self.train_idx], minlength=self.num_classes)

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[self.train_idx], self.y[self.train_idx]

    def val(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x[self.val_idx], self.y[self.val_idx]

    def same_samples(self, other: "DomainDataset") -> bool:
        return (self.name == other.name and self.num_classes == other.num_classes
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y))


@dataclass(frozen=True)
class SynthSpec:
    num_domains: int = 4
    num_classes: int = 6
    feature_dim: int = 8
    samples_per_class_max: int = 100
    imbalance_ratio: float = 10.0
    # domain shift
    rotation_step: float = 0.1
    translation_scale: float = 2.0
    scale_spread: float = 0.3
    # class geometry
    radius: float = 2.0
    latent_noise: float = 0.55
    ambient_noise: float = 0.3
    label_noise: float = 0.0
    # "shared": class c has the c-th largest count in every domain;
    # "rotated": domain i rolls the profile by i classes
    class_order: str = "shared"
    seed: int = 0
    domain_names: Optional[tuple] = None

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValueError("num_domains must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.imbalance_ratio < 1:
            raise ValueError("imbalance_ratio must be >= 1")
        if not 0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if self.class_order not in ("shared", "rotated"):
            raise ValueError(f"unknown class_order {self.class_order!r}")
        if self.domain_names is not None:
            names = tuple(str(n) for n in self.domain_names)
            if len(names) != self.num_domains or len(set(names)) != len(names):
                raise ValueError("domain_names must be unique, one per domain")
            object.__setattr__(self, "domain_names", names)

    def names(self) -> tuple:
        return self.domain_names or tuple(f"dom{i}" for i in range(self.num_domains))


def class_sizes(n_max: int, ratio: float, num_classes: int) -> list[int]:
    """``round(n_max * ratio ** (-c / (C - 1)))`` with halves rounded up."""
    return [int(math.floor(n_max * ratio ** (-c / (num_classes - 1)) + 0.5)) for c in range(num_classes)]


def _rotation(a: float) -> np.ndarray:
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


def gen_synthetic(spec: SynthSpec) -> list[DomainDataset]:
    """Class prototypes on a circle in a 2-D latent plane, embedded in ``feature_dim`` dims.

    Every domain sees the same latent classes through its own rotation of the
    latent plane, scaling, and a translation orthogonal to the class plane
    (covariate shift only).
    """
    sizes = class_sizes(spec.samples_per_class_max, spec.imbalance_ratio, spec.num_classes)
    if min(sizes) < 2:
        raise DegenerateSpec(f"class sizes {sizes} include a class with fewer than 2 samples")
    rng = power_rng(spec.seed)
    C, K, d = spec.num_classes, spec.num_domains, spec.feature_dim
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    embed, nuisance = basis[:, :2], basis[:, 2:]
    angles = 2 * np.pi * np.arange(C) / C
    protos = spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    out = []
    for i, name in enumerate(spec.names()):
        rot = _rotation((i - (K - 1) / 2) * spec.rotation_step)
        shift = spec.translation_scale * (nuisance @ rng.standard_normal(d - 2))
        gain = math.exp(spec.scale_spread * rng.uniform(-1.0, 1.0))
        counts = sizes if spec.class_order == "shared" else np.roll(sizes, i)
        y = np.repeat(np.arange(C), counts)
        z = protos[y] + spec.latent_noise * rng.standard_normal((y.size, 2))
        x = gain * (z @ rot.T @ embed.T) + shift + spec.ambient_noise * rng.standard_normal((y.size, d))
        if spec.label_noise > 0:
            flip = rng.uniform(size=y.size) < spec.label_noise
            other = (y + rng.integers(1, C, size=y.size)) % C
            y = np.where(flip, other, y)
        out.append(DomainDataset(i, name, x, y, C))
    return out


def split(dataset: DomainDataset, train_frac: float = 0.9, seed: int = 0) -> DomainDataset:
    """Stratified train/validation split; classes with >= 2 samples land on both sides."""
    if not 0 < train_frac <= 1:
        raise ValueError("train_frac must lie in (0, 1]")
    rng = power_rng(seed * 7919 + dataset.domain_id)
    train, val = [], []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.y == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        n_val = int(math.floor(idx.size * (1 - train_frac) + 0.5))
        if idx.size >= 2 and train_frac < 1:
            n_val = min(max(n_val, 1), idx.size - 1)
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    train_idx = np.sort(np.concatenate(train)) if train else np.arange(0)
    val_idx = np.sort(np.concatenate(val)) if val else np.arange(0)
    return replace(dataset, train_idx=train_idx, val_idx=val_idx)


def class_frequencies(dataset: DomainDataset) -> np.ndarray:
    counts = dataset.train_counts().astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError(f"domain {dataset.name!r} has an empty training split")
    return counts / total


# -- file format ------------------------------------------------------------
# line 1: {"version":1,"domain":str,"C":int,"d":int,"n":int}
# then n lines "label,f0,...,f{d-1}"; lines starting with '#' are comments

HEADER_KEYS = ("version", "domain", "C", "d", "n")


def dumps_dataset(dataset: DomainDataset) -> str:
    header = {"version": 1, "domain": dataset.name, "C": dataset.num_classes,
              "d": dataset.dim, "n": len(dataset)}
    lines = [json.dumps(header, separators=(",", ":"))]
    for label, row in zip(dataset.y, dataset.x):
        lines.append(",".join([str(int(label))] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def save_dataset_file(dataset: DomainDataset, path) -> None:
    Path(path).write_text(dumps_dataset(dataset), encoding="utf-8")


def _int_field(header: dict, key: str, lo: int) -> int:
    v = header[key]
    if not isinstance(v, int) or isinstance(v, bool) or v < lo:
        raise ParseError(f"header field {key!r} must be an integer >= {lo}", 1)
    return v


def loads_dataset(raw, domain_id: int = 0, expected_classes: Optional[int] = None,
                  expected_dim: Optional[int] = None) -> DomainDataset:
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8 (byte offset {exc.start})") from None
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    numbered = [(i + 1, ln.rstrip("\r")) for i, ln in enumerate(lines) if not ln.startswith("#")]
    if not numbered:
        raise ParseError("missing header line")
    hline, htext = numbered[0]
    try:
        header = json.loads(htext)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise ParseError(f"header is not JSON: {exc}", hline) from None
    if not isinstance(header, dict) or set(header) != set(HEADER_KEYS):
        raise ParseError(f"header must have exactly the keys {list(HEADER_KEYS)}", hline)
    if header["version"] != 1 or isinstance(header["version"], bool):
        raise ParseError(f"unsupported version {header['version']!r}", hline)
    if not isinstance(header["domain"], str):
        raise ParseError("header field 'domain' must be a string", hline)
    C = _int_field(header, "C", 2)
    d = _int_field(header, "d", 1)
    n = _int_field(header, "n", 0)
    if expected_classes is not None and C != expected_classes:
        raise SchemaError(f"file has C={C}, experiment expects C={expected_classes}")
    if expected_dim is not None and d != expected_dim:
        raise SchemaError(f"file has d={d}, experiment expects d={expected_dim}")
    body = numbered[1:]
    if len(body) != n:
        raise ParseError(f"header declares n={n} samples, found {len(body)}",
                         body[-1][0] if body else hline)
    x = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    for j, (lineno, text) in enumerate(body):
        parts = text.split(",")
        if len(parts) != d + 1:
            raise ParseError(f"expected {d + 1} comma-separated fields, got {len(parts)}", lineno)
        try:
            label = int(parts[0])
            feats = [float(p) for p in parts[1:]]
        except ValueError:
            raise ParseError("malformed number", lineno) from None
        if not 0 <= label < C:
            raise ParseError(f"label {label} outside [0, {C})", lineno)
        if not all(math.isfinite(v) for v in feats):
            raise ParseError("non-finite feature value", lineno)
        y[j] = label
        x[j] = feats
    return DomainDataset(domain_id, header["domain"], x, y, C)


def load_dataset_file(path, domain_id: int = 0, expected_classes: Optional[int] = None,
                      expected_dim: Optional[int] = None) -> DomainDataset:
    return loads_dataset(Path(path).read_bytes(), domain_id, expected_classes, expected_dim)
