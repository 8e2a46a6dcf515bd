"""FedTAIL objective: coherence, class-wise sharpness, curvature weights, sharp-er, total."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autograd import (
    Builder,
    Gradient,
    Node,
    _arr,
    hvp,
    norm2,
    top_eigenvalue,
    value_and_grad,
)
from .losses import (
    Batch,
    LossBreakdown,
    adv_builder,
    batch_mean_probs_builder,
    cls_builder,
    sam_objective,
    sam_perturbation,
)
from .model import ModelParams, forward_probs

log = logging.getLogger(__name__)

TERMS = ("cls", "adv", "sharp_er", "classwise", "coh")

# the five configurations of the component ablation, in order
ABLATION_LADDER = (
    ("cls",),
    ("cls", "adv"),
    ("cls", "adv", "sharp_er"),
    ("cls", "adv", "sharp_er", "classwise"),
    ("cls", "adv", "sharp_er", "classwise", "coh"),
)

QT_CLAMP = 1e-8


class ClassAbsent(LookupError):
    pass


class EmptyDomain(ValueError):
    pass


@dataclass
class FedTailConfig:
    rho: float = 0.05
    alpha: float = 0.1
    grl_lambda: float = 1.0
    power_iters: int = 10
    curvature_refresh_period: int = 10
    qt_mode: str = "frequency"
    teacher_momentum: float = 0.99
    terms: tuple = TERMS
    term_weights: dict = field(default_factory=lambda: {t: 1.0 for t in TERMS})
    classwise_plain: bool = False
    coherence_scope: str = "features"

    def __post_init__(self):
        self.terms = tuple(self.terms)
        weights = {t: 1.0 for t in TERMS}
        weights.update(self.term_weights or {})
        self.term_weights = weights
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.grl_lambda < 0:
            raise ValueError("grl_lambda must be >= 0")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")
        if self.curvature_refresh_period < 1:
            raise ValueError("curvature_refresh_period must be >= 1")
        if self.qt_mode not in ("frequency", "momentum_teacher"):
            raise ValueError(f"unknown qt_mode {self.qt_mode!r}")
        if not 0 <= self.teacher_momentum < 1:
            raise ValueError("teacher_momentum must lie in [0, 1)")
        if self.coherence_scope not in ("features", "full"):
            raise ValueError(f"unknown coherence_scope {self.coherence_scope!r}")
        unknown = set(self.terms) - set(TERMS) | set(weights) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")

    def active(self, term: str) -> bool:
        return term in self.terms and self.term_weights[term] != 0.0


@dataclass(frozen=True)
class QTDistribution:
    rows: np.ndarray
    provenance: str = "frequency"

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if np.any(rows < 0) or not np.allclose(rows.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("Q_T rows must be non-negative and sum to 1")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)

    def for_domain(self, domain: int) -> np.ndarray:
        return self.rows[domain]


def estimate_qt(counts: Sequence[Sequence[float]]) -> QTDistribution:
    """Per-domain relative class frequencies."""
    rows = []
    for i, row in enumerate(counts):
        row = np.asarray(row, dtype=np.float64)
        if np.any(row < 0):
            raise ValueError(f"domain {i}: negative class count")
        total = row.sum()
        if total <= 0:
            raise EmptyDomain(f"domain {i} has no samples")
        rows.append(row / total)
    return QTDistribution(np.array(rows), "frequency")


# -- coherence --------------------------------------------------------------

def coherence_objective(builder_a: Builder, builder_b: Builder, params, alpha: float,
                        mask=None, grads=None):
    """``-alpha <M g_a, M g_b>`` with gradient ``-alpha (H_a M g_b + H_b M g_a)``.

    Returns ``(value, Gradient, inner_product)``.  ``grads`` may carry already
    computed ``(g_a, g_b)`` at ``params``.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    theta = _arr(params)
    if grads is None:
        ga = value_and_grad(builder_a, theta)[1].values
        gb = value_and_grad(builder_b, theta)[1].values
    else:
        ga, gb = _arr(grads[0]), _arr(grads[1])
    if mask is not None:
        ga = ga * mask
        gb = gb * mask
    inner = float(np.dot(ga, gb))
    grad = np.zeros_like(theta)
    if alpha != 0.0:
        if norm2(gb) > 0:
            grad = grad + hvp(builder_a, theta, gb).values
        if norm2(ga) > 0:
            grad = grad + hvp(builder_b, theta, ga).values
        grad = -alpha * grad
    out = Gradient.like(params, grad) if hasattr(params, "layout") else Gradient(grad)
    return -alpha * inner, out, inner


def coherence_loss(params: ModelParams, batch: Batch, alpha: float, grl_lambda: float = 1.0,
                   scope: str = "features", grads=None):
    """Coherence penalty between the classification and adversarial gradients.

    The adversarial gradient is the one the optimiser applies, i.e. reversed
    through the GRL: ``S g`` with ``S = diag(-lambda on F.*, 1 elsewhere)`` and
    ``g`` the plain adversarial gradient.  Only F.* is shared by the two heads,
    so ``<M g_cls, M S g> = -lambda <M g_cls, M g>`` for either scope, and the
    Hessian actions are taken on the plain (symmetric) adversarial loss.
    ``grads`` may carry ``(g_cls, g_adv_plain)``.
    """
    if grl_lambda < 0:
        raise ValueError("grl_lambda must be >= 0")
    mask = params.mask("F.") if scope == "features" else None
    value, grad, inner = coherence_objective(
        cls_builder(params, batch), adv_builder(params, batch, None),
        params, alpha, mask, grads)
    return -grl_lambda * value, Gradient.like(params, -grl_lambda * grad.values)


# -- class-wise sharpness ---------------------------------------------------

def classwise_perturbation(params: ModelParams, batch: Batch, cls: int, rho: float) -> Gradient:
    sub = batch.restrict(cls)
    if sub is None:
        raise ClassAbsent(f"class {cls} has no samples in this batch")
    return sam_perturbation(value_and_grad(cls_builder(params, sub), params)[1], rho)


@dataclass
class CurvatureState:
    sigma: np.ndarray
    gamma: np.ndarray
    last_refresh: int = -1
    vectors: dict = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def cold(cls, num_classes: int, seed: int = 0) -> "CurvatureState":
        return cls(np.zeros(num_classes), np.ones(num_classes), -1, {}, seed)


def gamma_from_sigma(sigma) -> np.ndarray:
    """``1 / (1 + max(sigma, 0))``."""
    return 1.0 / (1.0 + np.maximum(np.asarray(sigma, dtype=np.float64), 0.0))


def curvature_weights(params: ModelParams, batch: Batch, power_iters: int = 10, seed: int = 0,
                      previous: Optional[CurvatureState] = None, step: int = 0) -> CurvatureState:
    """Per-class dominant Hessian eigenvalue and the resulting weights.

    Classes missing from ``batch`` keep their previous values (1.0 at cold start).
    Power iteration is warm-started from the previous eigenvector of each class.
    """
    C = params.spec.num_classes
    prev = previous if previous is not None else CurvatureState.cold(C, seed)
    sigma = prev.sigma.copy()
    vectors = dict(prev.vectors)
    for c in batch.classes():
        sub = batch.restrict(c)
        est, v = top_eigenvalue(cls_builder(params, sub), params, iters=power_iters,
                                seed=seed * 1009 + c, v0=vectors.get(c), return_vector=True)
        sigma[c] = est
        vectors[c] = v
    return CurvatureState(sigma, gamma_from_sigma(sigma), step, vectors, seed)


def classwise_sharp_losses(params: ModelParams, batch: Batch, rho: float,
                           curvature: Optional[CurvatureState] = None, plain: bool = False):
    """Per-class perturbed losses and their curvature-weighted sum.

    Returns ``(per_class, weighted_sum, Gradient)``; ``per_class`` has length C
    with 0 for classes absent from the batch.  With ``plain=True`` the class
    losses are evaluated at ``theta`` instead of ``theta + eps_c``.
    """
    C = params.spec.num_classes
    gamma = np.ones(C) if curvature is None else curvature.gamma
    per_class = [0.0] * C
    total = 0.0
    grad = np.zeros(len(params))
    for c in batch.classes():
        build = cls_builder(params, batch.restrict(c))
        if plain:
            val, g = value_and_grad(build, params)
        else:
            val, g = sam_objective(build, params, rho)
        per_class[c] = val
        if gamma[c] != 0.0:
            total = total + gamma[c] * val
            grad = grad + gamma[c] * g.values
    return per_class, float(total), Gradient.like(params, grad)


# -- sharpness-aware conditional alignment ----------------------------------

def _safe_q(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if np.any(q <= 0):
        log.warning("Q_T has zero entries; clamping at %g and renormalising", QT_CLAMP)
        q = np.maximum(q, QT_CLAMP)
        q = q / q.sum()
    return q


def sharp_er_loss(params: ModelParams, batch: Batch, qt, rho: float, grad_cls=None):
    """``KL(P_hat || Q)`` where P_hat is the batch-mean prediction at ``theta + eps``.

    ``qt`` is either a :class:`QTDistribution` (row ``batch.domain_id`` is used)
    or a length-C probability vector.  eps is the SAM perturbation of the
    classification gradient and is held constant.
    """
    q = qt.for_domain(batch.domain_id) if isinstance(qt, QTDistribution) else qt
    logq = np.log(_safe_q(q))
    if grad_cls is None:
        grad_cls = value_and_grad(cls_builder(params, batch), params)[1]
    eps = sam_perturbation(grad_cls, rho)
    mean_probs = batch_mean_probs_builder(params, batch)

    def build(p: Node) -> Node:
        ph = mean_probs(p)
        return (ph * (ph.log() - logq)).sum()

    val, g = value_and_grad(build, params.values + eps.values)
    return val, Gradient.like(params, g.values)


def teacher_qt(teacher: ModelParams, batch: Batch) -> np.ndarray:
    return forward_probs(teacher, batch.x).mean(axis=0)


# -- total ------------------------------------------------------------------

def total_loss(params: ModelParams, batch: Batch, cfg: FedTailConfig,
               qt: Optional[QTDistribution] = None,
               curvature: Optional[CurvatureState] = None,
               teacher: Optional[ModelParams] = None):
    """Weighted sum of the enabled terms; returns ``(LossBreakdown, Gradient)``."""
    w = cfg.term_weights
    bd = LossBreakdown(enabled=tuple(t for t in TERMS if cfg.active(t)))
    values = {}
    grads = {}

    need_cls_grad = any(cfg.active(t) for t in ("cls", "sharp_er", "coh"))
    if need_cls_grad:
        bd.cls, g_cls = value_and_grad(cls_builder(params, batch), params)
        values["cls"], grads["cls"] = bd.cls, g_cls

    if cfg.active("adv") or cfg.active("coh"):
        bd.adv, g_adv = value_and_grad(adv_builder(params, batch, cfg.grl_lambda), params)
        bd.adv_loglik = -bd.adv
        values["adv"], grads["adv"] = bd.adv, g_adv
        if need_cls_grad:
            mask = params.mask("F.") if cfg.coherence_scope == "features" else np.ones(len(params))
            bd.coherence_dot = float(np.dot(g_cls.values * mask, g_adv.values * mask))

    if cfg.active("sharp_er"):
        if cfg.qt_mode == "momentum_teacher":
            if teacher is None:
                raise ValueError("qt_mode=momentum_teacher needs teacher params")
            q = teacher_qt(teacher, batch)
        else:
            if qt is None:
                raise ValueError("qt_mode=frequency needs a QTDistribution")
            q = qt
        values["sharp_er"], grads["sharp_er"] = sharp_er_loss(params, batch, q, cfg.rho, g_cls)
        bd.sharp_er = values["sharp_er"]

    if cfg.active("classwise"):
        per_class, combined, g = classwise_sharp_losses(
            params, batch, cfg.rho, curvature, plain=cfg.classwise_plain)
        bd.classwise = per_class
        bd.classwise_term = combined
        values["classwise"], grads["classwise"] = combined, g

    if cfg.active("coh"):
        g_plain = value_and_grad(adv_builder(params, batch, None), params)[1]
        value, g = coherence_loss(params, batch, cfg.alpha, cfg.grl_lambda,
                                  cfg.coherence_scope, grads=(g_cls, g_plain))
        bd.coh = value
        values["coh"], grads["coh"] = value, g

    if curvature is not None:
        bd.gammas = [float(x) for x in curvature.gamma]

    total = 0.0
    grad = np.zeros(len(params))
    for t in TERMS:
        if cfg.active(t):
            total = total + w[t] * values[t]
            grad = grad + w[t] * grads[t].values
    bd.total = float(total)
    return bd, Gradient.like(params, grad)
