"""Sparse pairwise loss with hardest, least-hard and adaptive positives.

Per class ``i`` the loss is ``softplus((S_neg - S_pos) / tau)``, where
``S_neg`` is a soft maximum over every cross-class similarity touching the
class and ``S_pos`` is one of

* ``Hard``: soft minimum over all ordered intra-class pairs,
* ``LeastHard``: soft maximum over instances of each instance's soft minimum,
* ``Adaptive``: ``alpha * hard + (1 - alpha) * least_hard`` where ``alpha``
  is the gated harmonic mean of the two, held constant under differentiation.

Self pairs (n == m) are excluded from every intra-class sum. Gradients are
w.r.t. the unit embeddings.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .batchkit import ClassView, EmbeddingBatch, class_views
from .errors import NoNegatives, NoUsableClasses, SingletonClass
from .numerics import central_difference, logsumexp, max_relative_error, pairwise_similarity, softmin

TAU_PERSON = 0.04
TAU_VEHICLE = 0.05


class SPVariant(enum.Enum):
    Hard = "sph"
    LeastHard = "splh"
    Adaptive = "adasp"

    @property
    def code(self) -> int:
        return _VARIANT_CODES[self]


_VARIANT_CODES = {
    SPVariant.Hard: _kernels.HARD,
    SPVariant.LeastHard: _kernels.LEAST_HARD,
    SPVariant.Adaptive: _kernels.ADAPTIVE,
}


@dataclass(frozen=True)
class SPConfig:
    tau: float = TAU_PERSON
    variant: SPVariant = SPVariant.Adaptive

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class ClassDiagnostics:
    class_id: int
    s_neg: float
    s_pos_hard: float
    s_pos_leasthard: float
    alpha: float
    s_pos_used: float
    per_instance_softmin: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray
    diagnostics: list = field(default_factory=list)


def _intra(S: np.ndarray, view: ClassView) -> np.ndarray:
    rows = np.asarray(view.row_indices)
    if rows.size < 2:
        raise SingletonClass(f"class {view.class_id} has {rows.size} row(s)")
    return S[np.ix_(rows, rows)]


def soft_negative(S: np.ndarray, view_i: ClassView, all_views: Sequence[ClassView], tau: float) -> float:
    """Soft hardest negative: log-sum-exp over all cross pairs (n in i, m not in i)."""
    rows = np.asarray(view_i.row_indices)
    cols = np.concatenate(
        [np.asarray(v.row_indices) for v in all_views if v.class_id != view_i.class_id] or [np.empty(0, int)]
    )
    if cols.size == 0:
        raise NoNegatives(f"no other class alongside {view_i.class_id}")
    return logsumexp(S[np.ix_(rows, cols)], tau)


def soft_positive_hard(S: np.ndarray, view_i: ClassView, tau: float) -> float:
    """Soft hardest positive over ordered intra-class pairs, diagonal excluded."""
    block = _intra(S, view_i)
    off = ~np.eye(block.shape[0], dtype=bool)
    return softmin(block[off], tau)


def soft_positive_per_instance(S: np.ndarray, view_i: ClassView, n: int, tau: float) -> float:
    """Soft minimum similarity between instance ``n`` (position in the view) and its positives."""
    block = _intra(S, view_i)
    row = np.delete(block[n], n)
    return softmin(row, tau)


def per_instance_softmins(S: np.ndarray, view_i: ClassView, tau: float) -> np.ndarray:
    n = len(view_i.row_indices)
    return np.array([soft_positive_per_instance(S, view_i, k, tau) for k in range(n)])


def soft_positive_leasthard(S: np.ndarray, view_i: ClassView, tau: float) -> float:
    """Soft least-hard positive: soft maximum of the per-instance soft minima."""
    return logsumexp(per_instance_softmins(S, view_i, tau), tau)


def adaptive_weight(s_hard: float, s_leasthard: float) -> float:
    """Harmonic mean of the two positives, gated to 0 for negative ``s_hard``."""
    return float(_kernels._harmonic_gate(float(s_hard), float(s_leasthard)))


def class_term(s_neg: float, s_pos: float, tau: float) -> float:
    """Per-class penalty ``log(1 + exp((s_neg - s_pos) / tau))``."""
    return _kernels._softplus_scalar((s_neg - s_pos) / tau)


def _usable(views: Sequence[ClassView]) -> list[ClassView]:
    return [v for v in views if len(v.row_indices) >= 2]


def sp_loss_from_similarity(
    S: np.ndarray,
    views: Sequence[ClassView],
    cfg: SPConfig,
    fixed_alpha: np.ndarray | None = None,
):
    """Kernel entry point on a precomputed similarity table.

    Returns ``(value, G, diagnostics)`` where ``G`` is d(value)/dS over
    ordered entries. ``fixed_alpha`` pins the adaptive weights (one per
    usable class, in view order); gradient checks use it to hold alpha fixed.
    """
    usable = _usable(views)
    if not usable:
        raise NoUsableClasses("every class in the batch is a singleton")
    if len(usable) < 2:
        raise NoNegatives("need at least two classes with >= 2 instances")
    members = np.concatenate([np.asarray(v.row_indices, dtype=np.int64) for v in usable])
    offsets = np.zeros(len(usable) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(v.row_indices) for v in usable])
    use_fixed = fixed_alpha is not None
    alpha_in = np.asarray(fixed_alpha if use_fixed else np.zeros(len(usable)), dtype=np.float64)

    values, s_neg, s_h, s_lh, alpha, s_pos, inst, G = _kernels.sp_batch(
        np.ascontiguousarray(S, dtype=np.float64), members, offsets, float(cfg.tau),
        cfg.variant.code, alpha_in, use_fixed,
    )
    k = len(usable)
    diags = [
        ClassDiagnostics(
            class_id=v.class_id,
            s_neg=float(s_neg[g]),
            s_pos_hard=float(s_h[g]),
            s_pos_leasthard=float(s_lh[g]),
            alpha=float(alpha[g]),
            s_pos_used=float(s_pos[g]),
            per_instance_softmin=inst[offsets[g]:offsets[g + 1]].copy(),
        )
        for g, v in enumerate(usable)
    ]
    return float(values.sum() / k), G / k, diags


def sp_loss(batch: EmbeddingBatch, cfg: SPConfig, fixed_alpha: np.ndarray | None = None) -> LossResult:
    """SP loss value, gradient w.r.t. the unit embeddings and per-class diagnostics.

    Singleton classes are left out entirely: no loss term, not used as
    negatives, zero gradient rows.
    """
    z = np.asarray(batch.embeddings, dtype=np.float64)
    S = pairwise_similarity(z)
    value, G, diags = sp_loss_from_similarity(S, class_views(batch), cfg, fixed_alpha)
    grad = (G + G.T) @ z
    return LossResult(value=value, grad=grad, diagnostics=diags)


def sp_value(z: np.ndarray, labels, cfg: SPConfig, fixed_alpha: np.ndarray | None = None) -> float:
    """Loss value only, for finite-difference checks on raw (not renormalized) z."""
    batch = EmbeddingBatch(np.asarray(z, dtype=np.float64), np.asarray(labels), 0, 0)
    S = (batch.embeddings @ batch.embeddings.T)
    value, _, _ = sp_loss_from_similarity(np.clip(S, -1.0, 1.0), class_views(batch), cfg, fixed_alpha)
    return value


def gradient_check(z: np.ndarray, labels, cfg: SPConfig, step: float = 1e-6) -> float:
    """Max relative error between the analytic gradient and central differences.

    Adaptive weights are frozen at ``z`` so both sides differentiate the same
    function.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    res = sp_loss(EmbeddingBatch(z, labels, 0, 0), cfg)
    alpha = np.array([d.alpha for d in res.diagnostics])
    numeric = central_difference(lambda x: sp_value(x, labels, cfg, fixed_alpha=alpha), z, step)
    return max_relative_error(res.grad, numeric)
