"""PK mini-batches: K classes with N instances each."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import TooFewClasses
from .numerics import l2_normalize


@dataclass(frozen=True)
class ClassView:
    class_id: int
    row_indices: np.ndarray


@dataclass(frozen=True)
class EmbeddingBatch:
    embeddings: np.ndarray
    labels: np.ndarray
    num_classes: int
    instances_per_class: int
    # rows of the source dataset each batch row came from, if sampled
    source_indices: np.ndarray | None = field(default=None, compare=False)

    @classmethod
    def from_arrays(cls, embeddings, labels, normalize: bool = True) -> "EmbeddingBatch":
        z = l2_normalize(embeddings) if normalize else np.asarray(embeddings, dtype=np.float64)
        y = np.asarray(labels).astype(np.int64).ravel()
        if z.shape[0] != y.shape[0]:
            raise ValueError(f"{z.shape[0]} embeddings but {y.shape[0]} labels")
        uniq, counts = np.unique(y, return_counts=True)
        n = int(counts[0]) if counts.size and np.all(counts == counts[0]) else 0
        return cls(z, y, int(uniq.size), n)

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    def views(self) -> list[ClassView]:
        return class_views(self)


def class_views(batch: EmbeddingBatch) -> list[ClassView]:
    """One view per distinct label, ordered by first appearance."""
    labels = np.asarray(batch.labels)
    if labels.size == 0:
        return []
    uniq, first = np.unique(labels, return_index=True)
    views = []
    for lab in uniq[np.argsort(first)]:
        views.append(ClassView(int(lab), np.flatnonzero(labels == lab)))
    return views


def _class_index(labels: np.ndarray) -> dict[int, np.ndarray]:
    order = np.argsort(labels, kind="stable")
    uniq, starts = np.unique(labels[order], return_index=True)
    bounds = np.append(starts, labels.size)
    return {int(c): order[bounds[i]:bounds[i + 1]] for i, c in enumerate(uniq)}


class PKSampler:
    """Draws PK batches of dataset row indices from a labeled store.

    Classes with fewer than N items are upsampled with replacement. One epoch
    splits each class into shuffled chunks of N rows and deals K classes per
    batch until fewer than K classes have chunks left; the remainder is
    dropped.
    """

    def __init__(self, labels, K: int, N: int, seed: int = 0):
        self.labels = np.asarray(labels).astype(np.int64).ravel()
        self.by_class = _class_index(self.labels)
        if K < 1 or N < 1:
            raise ValueError("K and N must be positive")
        if len(self.by_class) < K:
            raise TooFewClasses(f"dataset has {len(self.by_class)} classes, need K={K}")
        self.K = K
        self.N = N
        self.rng = np.random.default_rng(seed)

    def _draw(self, idx: np.ndarray) -> np.ndarray:
        if idx.size >= self.N:
            return self.rng.choice(idx, size=self.N, replace=False)
        return self.rng.choice(idx, size=self.N, replace=True)

    def sample(self) -> np.ndarray:
        """One batch: K distinct random classes, N rows each, grouped by class."""
        classes = np.array(sorted(self.by_class))
        chosen = self.rng.choice(classes, size=self.K, replace=False)
        return np.concatenate([self._draw(self.by_class[int(c)]) for c in chosen])

    def epoch(self) -> Iterator[np.ndarray]:
        chunks: dict[int, list[np.ndarray]] = {}
        for c in sorted(self.by_class):
            idx = self.rng.permutation(self.by_class[c])
            if idx.size < self.N:
                idx = np.concatenate([idx, self.rng.choice(idx, self.N - idx.size, replace=True)])
            n_chunks = idx.size // self.N
            chunks[c] = [idx[j * self.N:(j + 1) * self.N] for j in range(n_chunks)]
        while True:
            live = np.array([c for c in sorted(chunks) if chunks[c]])
            if live.size < self.K:
                return
            chosen = self.rng.choice(live, size=self.K, replace=False)
            yield np.concatenate([chunks[int(c)].pop() for c in chosen])


def pk_sample(dataset, K: int, N: int, rng_seed: int) -> EmbeddingBatch:
    """Build one PK batch from a labeled store with ``points`` and ``labels``."""
    sampler = PKSampler(dataset.labels, K, N, seed=rng_seed)
    idx = sampler.sample()
    return EmbeddingBatch(
        embeddings=l2_normalize(np.asarray(dataset.points)[idx]),
        labels=sampler.labels[idx],
        num_classes=K,
        instances_per_class=N,
        source_indices=idx,
    )
