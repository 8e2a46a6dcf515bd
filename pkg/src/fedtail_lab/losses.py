"""Building-block objectives: risk, adversarial loss, SAM, SAGM, max-square, entropy.

Objectives come in two flavours.  The ``*_builder`` functions return graph
builders (``Node -> scalar Node``) over a :class:`ModelParams` layout; the
``*_objective`` functions work on any builder, which keeps SAM-style wrappers
testable on closed-form toy losses.  The public ``(params, batch)`` functions
tie the two together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .autograd import (
    Builder,
    Gradient,
    Node,
    _arr,
    hvp,
    log_softmax,
    norm2,
    value_and_grad,
)
from .model import (
    ModelParams,
    _check_x,
    class_logits_node,
    domain_logits_node,
    features_node,
)


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y: np.ndarray
    domain_id: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[0] != y.size:
            raise ValueError(f"bad batch shapes x={x.shape} y={y.shape}")
        if np.any(y < 0):
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.size

    def restrict(self, cls: int) -> "Batch | None":
        keep = self.y == cls
        if not keep.any():
            return None
        return Batch(self.x[keep], self.y[keep], self.domain_id)

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))


@dataclass
class LossBreakdown:
    cls: float = 0.0
    adv: float = 0.0
    sharp_er: float = 0.0
    classwise: list = field(default_factory=list)
    classwise_term: float = 0.0
    coh: float = 0.0
    total: float = 0.0
    enabled: tuple = ()
    coherence_dot: Optional[float] = None
    gammas: list = field(default_factory=list)
    adv_loglik: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "cls": self.cls,
            "adv": self.adv,
            "sharp_er": self.sharp_er,
            "classwise": list(self.classwise),
            "classwise_term": self.classwise_term,
            "coh": self.coh,
            "total": self.total,
            "enabled": list(self.enabled),
            "coherence_dot": self.coherence_dot,
            "gammas": list(self.gammas),
            "adv_loglik": self.adv_loglik,
        }


def _onehot(y: np.ndarray, n: int) -> np.ndarray:
    if np.any(y >= n):
        raise ValueError(f"label out of range for {n} outputs")
    out = np.zeros((y.size, n))
    out[np.arange(y.size), y] = 1.0
    return out


# -- builders ---------------------------------------------------------------

def cls_builder(params: ModelParams, batch: Batch) -> Builder:
    spec = params.spec
    x = _check_x(spec, batch.x)
    target = _onehot(batch.y, spec.num_classes)
    scale = -1.0 / len(batch)

    def build(p: Node) -> Node:
        t = params.tensors(p)
        logp = log_softmax(class_logits_node(t, features_node(t, spec, x)))
        return (logp * target).sum() * scale

    return build


def adv_builder(params: ModelParams, batch: Batch, grl_lambda: Optional[float]) -> Builder:
    """Domain cross-entropy; ``grl_lambda=None`` builds the plain (unreversed) loss."""
    spec = params.spec
    if not 0 <= batch.domain_id < spec.num_domains:
        raise ValueError(f"domain id {batch.domain_id} outside [0, {spec.num_domains})")
    x = _check_x(spec, batch.x)
    target = _onehot(np.full(len(batch), batch.domain_id), spec.num_domains)
    scale = -1.0 / len(batch)

    def build(p: Node) -> Node:
        t = params.tensors(p)
        logp = log_softmax(domain_logits_node(t, features_node(t, spec, x), grl_lambda))
        return (logp * target).sum() * scale

    return build


def batch_mean_probs_builder(params: ModelParams, batch: Batch):
    """Returns ``p -> Node`` of the batch-averaged class distribution (length C)."""
    spec = params.spec
    x = _check_x(spec, batch.x)

    def build(p: Node) -> Node:
        t = params.tensors(p)
        return log_softmax(class_logits_node(t, features_node(t, spec, x))).exp().mean(axis=0)

    return build


# -- generic objectives -----------------------------------------------------

def sam_perturbation(grad, rho: float) -> Gradient:
    """``rho * g / ||g||``, or zero when ``||g|| < 1e-12``."""
    if rho <= 0:
        raise ValueError("rho must be > 0")
    g = _arr(grad)
    n = norm2(g)
    if n < 1e-12:
        return Gradient.like(grad) if isinstance(grad, Gradient) else Gradient(np.zeros_like(g))
    eps = g * (rho / n)
    return Gradient.like(grad, eps) if isinstance(grad, Gradient) else Gradient(eps)


def sam_objective(builder: Builder, params, rho: float, grad=None):
    """Loss and gradient at ``theta + eps(theta)``; eps is not differentiated."""
    if grad is None:
        grad = value_and_grad(builder, params)[1]
    eps = sam_perturbation(grad, rho)
    val, g = value_and_grad(builder, _arr(params) + eps.values)
    return val, Gradient.like(grad, g.values)


def surrogate_gap_of(builder: Builder, params, rho: float) -> float:
    base, grad = value_and_grad(builder, params)
    perturbed, _ = sam_objective(builder, params, rho, grad)
    return perturbed - base


def sagm_objective(builder: Builder, params, rho: float, alpha: float):
    """``L + L_p - alpha <grad L, grad L_p>``.

    The gradient of the inner product uses ``H g_p + H_p g`` with both
    Hessian actions taken by finite differences and eps held fixed.
    """
    theta = _arr(params)
    base, g = value_and_grad(builder, theta)
    eps = sam_perturbation(g, rho)
    shifted = theta + eps.values
    pert, gp = value_and_grad(builder, shifted)
    inner = float(np.dot(g.values, gp.values))
    value = base + pert - alpha * inner
    total = g.values + gp.values
    if alpha != 0.0:
        corr = np.zeros_like(theta)
        if norm2(gp) > 0:
            corr = corr + hvp(builder, theta, gp.values).values
        if norm2(g) > 0:
            corr = corr + hvp(builder, shifted, g.values).values
        total = total - alpha * corr
    return value, Gradient.like(g, total)


# -- (params, batch) losses -------------------------------------------------

def cls_loss(params: ModelParams, batch: Batch):
    """Mean negative log-probability of the true labels."""
    return value_and_grad(cls_builder(params, batch), params)


def adv_loss(params: ModelParams, batch: Batch, grl_lambda: float = 1.0):
    """Mean domain cross-entropy; gradient reaches F.* reversed and scaled by grl_lambda."""
    if grl_lambda < 0:
        raise ValueError("grl_lambda must be >= 0")
    return value_and_grad(adv_builder(params, batch, grl_lambda), params)


def sam_loss(params: ModelParams, batch: Batch, rho: float):
    return sam_objective(cls_builder(params, batch), params, rho)


def surrogate_gap(params: ModelParams, batch: Batch, rho: float) -> float:
    return surrogate_gap_of(cls_builder(params, batch), params, rho)


def sagm_loss(params: ModelParams, batch: Batch, rho: float, alpha: float):
    return sagm_objective(cls_builder(params, batch), params, rho, alpha)


def max_square_node(p: Node) -> Node:
    n = p.shape[0]
    return p.square().sum() * (-0.5 / n)


def entropy_node(p: Node) -> Node:
    n = p.shape[0]
    return (p * p.log()).sum() * (-1.0 / n)


def _prob_matrix(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise ValueError("expected an N x C probability matrix")
    return probs


def max_square_loss(probs) -> float:
    """``-(1/2N) sum_n sum_c p_nc^2``, correctly rounded.

    The sum is formed exactly over the distinct input values, so uniform rows
    give exactly ``-1/(2C)``.  Use :func:`max_square_node` for gradients.
    """
    probs = _prob_matrix(probs)
    vals, counts = np.unique(probs, return_counts=True)
    total = sum(int(k) * Fraction(float(v)) ** 2 for v, k in zip(vals, counts))
    return float(-total / (2 * probs.shape[0]))


def entropy_loss(probs) -> float:
    """Mean row entropy; zero-probability entries contribute 0."""
    probs = _prob_matrix(probs)
    logs = np.log(np.where(probs > 0, probs, 1.0))
    return float(-(probs * logs).sum() / probs.shape[0])


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
