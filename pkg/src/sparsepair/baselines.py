"""Comparison losses and the identity + metric objective."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .batchkit import EmbeddingBatch
from .errors import LabelOutOfRange, NoNegatives, SingletonClass
from .numerics import pairwise_similarity
from .sploss import LossResult, SPConfig, sp_loss

TRIPLET_MARGIN = 0.3
LAMBDA_PERSON = 0.1
LAMBDA_VEHICLE = 0.5


class PositiveRule(enum.Enum):
    Hardest = "hardest"
    Easiest = "easiest"


@dataclass(frozen=True)
class TripletConfig:
    margin: float = TRIPLET_MARGIN
    positive_rule: PositiveRule = PositiveRule.Hardest

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


def _check_triplet_batch(labels: np.ndarray) -> None:
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2:
        raise NoNegatives("triplet loss needs at least two classes")
    if np.any(counts < 2):
        raise SingletonClass(f"class {int(uniq[np.argmax(counts < 2)])} has a single instance")


def triplet_selection(S: np.ndarray, labels: np.ndarray, rule: PositiveRule):
    """Per-anchor (positive index, negative index) with lowest-index ties."""
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    if rule is PositiveRule.Hardest:
        pos = np.argmin(np.where(same, S, np.inf), axis=1)
    else:
        pos = np.argmax(np.where(same, S, -np.inf), axis=1)
    neg = np.argmax(np.where(diff, S, -np.inf), axis=1)
    return pos, neg


def triplet_value(z: np.ndarray, labels, cfg: TripletConfig) -> float:
    labels = np.asarray(labels)
    S = np.clip(z @ z.T, -1.0, 1.0)
    pos, neg = triplet_selection(S, labels, cfg.positive_rule)
    rows = np.arange(labels.size)
    return float(np.mean(np.maximum(0.0, cfg.margin + S[rows, neg] - S[rows, pos])))


def triplet_bh_loss(batch: EmbeddingBatch, cfg: TripletConfig = TripletConfig()) -> LossResult:
    """Anchor-wise hinge on similarities with batch-hard (or easiest) positives.

    ``value = mean_a max(0, margin + S[a, hardest neg] - S[a, chosen pos])``.
    At the hinge kink the subgradient is taken as 0.
    """
    z = np.asarray(batch.embeddings, dtype=np.float64)
    labels = np.asarray(batch.labels)
    _check_triplet_batch(labels)
    S = pairwise_similarity(z)
    pos, neg = triplet_selection(S, labels, cfg.positive_rule)
    B = labels.size
    rows = np.arange(B)
    hinge = cfg.margin + S[rows, neg] - S[rows, pos]
    active = hinge > 0
    G = np.zeros((B, B))
    np.add.at(G, (rows[active], neg[active]), 1.0 / B)
    np.add.at(G, (rows[active], pos[active]), -1.0 / B)
    grad = (G + G.T) @ z
    return LossResult(value=float(np.mean(np.maximum(hinge, 0.0))), grad=grad)


@dataclass
class ClassifierHead:
    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, num_classes: int, dim: int, rng: np.random.Generator, scale: float = 0.01) -> "ClassifierHead":
        return cls(rng.standard_normal((num_classes, dim)) * scale, np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return int(self.weights.shape[0])


@dataclass(frozen=True)
class IdentityResult:
    value: float
    grad_features: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray


def identity_loss(features, labels, head: ClassifierHead) -> IdentityResult:
    """Mean softmax cross-entropy of a linear head, no label smoothing."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64).ravel()
    C = head.num_classes
    if np.any(y < 0) or np.any(y >= C):
        raise LabelOutOfRange(f"labels must lie in [0, {C}), got range [{y.min()}, {y.max()}]")
    B = y.size
    logits = x @ head.weights.T + head.bias
    top = logits.max(axis=1, keepdims=True)
    logz = top[:, 0] + np.log(np.sum(np.exp(logits - top), axis=1))
    value = float(np.mean(logz - logits[np.arange(B), y]))
    dlogits = np.exp(logits - logz[:, None])
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    return IdentityResult(
        value=value,
        grad_features=dlogits @ head.weights,
        grad_weights=dlogits.T @ x,
        grad_bias=dlogits.sum(axis=0),
    )


@dataclass(frozen=True)
class CombinedResult:
    value: float
    identity_value: float
    metric_value: float
    grad: np.ndarray
    grad_weights: np.ndarray
    grad_bias: np.ndarray


def metric_loss(batch: EmbeddingBatch, metric) -> LossResult:
    if isinstance(metric, SPConfig):
        return sp_loss(batch, metric)
    if isinstance(metric, TripletConfig):
        return triplet_bh_loss(batch, metric)
    raise TypeError(f"unsupported metric config {type(metric).__name__}")


def combined_loss(
    batch: EmbeddingBatch,
    head: ClassifierHead,
    metric,
    lam: float,
    class_index=None,
) -> CombinedResult:
    """``identity + lam * metric`` on the batch embeddings.

    ``class_index`` maps batch labels to head rows (identity when omitted).
    The metric term is always evaluated, so it can be logged at ``lam = 0``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    targets = batch.labels if class_index is None else np.asarray([class_index[int(c)] for c in batch.labels])
    ident = identity_loss(batch.embeddings, targets, head)
    met = metric_loss(batch, metric)
    return CombinedResult(
        value=ident.value + lam * met.value,
        identity_value=ident.value,
        metric_value=met.value,
        grad=ident.grad_features + lam * met.grad,
        grad_weights=ident.grad_weights,
        grad_bias=ident.grad_bias,
    )
