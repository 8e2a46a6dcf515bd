"""Small MLPs for the feature extractor F, classifier T and domain discriminator D."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autograd import Node, ParamVector, Segment, Tape, log_softmax, make_layout, power_rng


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    num_domains: int
    feature_dims: tuple[int, ...] = (32, 16)
    discriminator_dims: tuple[int, int] = (16, 16)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "feature_dims", tuple(int(d) for d in self.feature_dims))
        object.__setattr__(self, "discriminator_dims", tuple(int(d) for d in self.discriminator_dims))
        if self.input_dim < 1 or any(d < 1 for d in self.feature_dims + self.discriminator_dims):
            raise ValueError("all layer widths must be >= 1")
        if not self.feature_dims:
            raise ValueError("feature extractor needs at least one layer")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.num_domains < 2:
            raise ValueError("need at least 2 domains for the domain discriminator")
        if len(self.discriminator_dims) != 2:
            raise ValueError("discriminator must have exactly two hidden layers")

    @property
    def feature_width(self) -> int:
        return self.feature_dims[-1]

    def shapes(self) -> list[tuple[str, tuple[int, int] | tuple[int]]]:
        out = []
        dims = (self.input_dim,) + self.feature_dims
        for i in range(len(self.feature_dims)):
            out += [(f"F.w{i}", (dims[i], dims[i + 1])), (f"F.b{i}", (dims[i + 1],))]
        out += [("T.w0", (self.feature_width, self.num_classes)), ("T.b0", (self.num_classes,))]
        ddims = (self.feature_width,) + self.discriminator_dims + (self.num_domains,)
        for i in range(3):
            out += [(f"D.w{i}", (ddims[i], ddims[i + 1])), (f"D.b{i}", (ddims[i + 1],))]
        return out

    def layout(self) -> tuple[Segment, ...]:
        return make_layout((name, math.prod(shape)) for name, shape in self.shapes())


class ModelParams(ParamVector):
    __slots__ = ("spec",)

    def __init__(self, spec: ModelSpec, values):
        super().__init__(values, spec.layout())
        self.spec = spec

    def tensors(self, p: Node) -> dict[str, Node]:
        """Reshaped graph views of every segment of the parameter node ``p``."""
        out = {}
        for (name, shape), seg in zip(self.spec.shapes(), self.layout):
            out[name] = p[seg.offset:seg.stop].reshape(shape)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self.get(name).reshape(shape) for name, shape in self.spec.shapes()}


def init(spec: ModelSpec) -> ModelParams:
    """Glorot-uniform weights, zero biases; Philox stream keyed by ``spec.seed``."""
    rng = power_rng(spec.seed)
    parts = []
    for name, shape in spec.shapes():
        if ".w" in name:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            parts.append(rng.uniform(-bound, bound, size=math.prod(shape)))
        else:
            parts.append(np.zeros(math.prod(shape)))
    return ModelParams(spec, np.concatenate(parts))


def zeros(spec: ModelSpec) -> ModelParams:
    return ModelParams(spec, np.zeros(sum(s.length for s in spec.layout())))


# -- graph pieces -----------------------------------------------------------

def _check_x(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != spec.input_dim:
        raise DimMismatch(f"expected batch of shape (N>=1, {spec.input_dim}), got {x.shape}")
    return x


def features_node(t: dict[str, Node], spec: ModelSpec, x: np.ndarray) -> Node:
    h = t["F.w0"].tape.const(x)
    for i in range(len(spec.feature_dims)):
        h = (h @ t[f"F.w{i}"] + t[f"F.b{i}"]).relu()
    return h


def class_logits_node(t: dict[str, Node], h: Node) -> Node:
    return h @ t["T.w0"] + t["T.b0"]


def domain_logits_node(t: dict[str, Node], h: Node, grl_lambda: Optional[float]) -> Node:
    """Discriminator logits; ``grl_lambda=None`` leaves the gradient unreversed."""
    z = h if grl_lambda is None else h.reverse_grad(grl_lambda)
    z = (z @ t["D.w0"] + t["D.b0"]).relu()
    z = (z @ t["D.w1"] + t["D.b1"]).relu()
    return z @ t["D.w2"] + t["D.b2"]


def _forward(params: ModelParams, x, head: str, grl_lambda: float = 1.0) -> np.ndarray:
    spec = params.spec
    x = _check_x(spec, x)
    tape = Tape()
    t = params.tensors(tape.leaf(params.values))
    h = features_node(t, spec, x)
    if head == "features":
        return h.value
    z = class_logits_node(t, h) if head == "class" else domain_logits_node(t, h, grl_lambda)
    return np.exp(log_softmax(z).value)


def forward_probs(params: ModelParams, x) -> np.ndarray:
    """N x C class probabilities."""
    return _forward(params, x, "class")


def forward_domain(params: ModelParams, x, grl_lambda: float = 1.0) -> np.ndarray:
    """N x K domain probabilities (gradient reversal only matters for backward)."""
    if grl_lambda < 0:
        raise ValueError("grl_lambda must be >= 0")
    return _forward(params, x, "domain", grl_lambda)


def embed(params: ModelParams, x) -> np.ndarray:
    """Feature-extractor outputs, N x feature_width."""
    return _forward(params, x, "features")


def predict(params: ModelParams, x) -> np.ndarray:
    return np.argmax(forward_probs(params, x), axis=1)


# -- checkpoint format ------------------------------------------------------
# one JSON header line, then len(params) little-endian float64 values

def save_params(params: ModelParams, path) -> None:
    header = {
        "version": 1,
        "spec": asdict(params.spec),
        "layout": [[s.name, s.offset, s.length] for s in params.layout],
        "n": len(params),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(raw[:nl])
    spec = ModelSpec(**header["spec"])
    body = raw[nl + 1:]
    if len(body) != 8 * header["n"]:
        raise ValueError(f"{path}: expected {header['n']} values, found {len(body) / 8:g}")
    params = ModelParams(spec, np.frombuffer(body, dtype="<f8"))
    if [[s.name, s.offset, s.length] for s in params.layout] != header["layout"]:
        raise ValueError(f"{path}: layout in header does not match spec")
    return params
