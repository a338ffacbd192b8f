"""Retrieval metrics and the instances-per-class robustness sweep."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import EmptyGallery


@dataclass(frozen=True)
class RetrievalMetrics:
    map: float
    cmc: np.ndarray  # cmc[k - 1] = CMC@k
    num_queries: int = 0
    num_skipped: int = 0

    def cmc_at(self, k: int) -> float:
        return float(self.cmc[min(k, self.cmc.size) - 1])


def _ranked_matches(query, gallery, query_labels, gallery_labels, same_set: bool) -> np.ndarray:
    sims = np.asarray(query, dtype=np.float64) @ np.asarray(gallery, dtype=np.float64).T
    G = sims.shape[1]
    if same_set:
        # push self to the end of every ranking, then drop that column
        sims[np.arange(sims.shape[0]), np.arange(sims.shape[0])] = -np.inf
    order = np.argsort(-sims, axis=1, kind="stable")
    if same_set:
        order = order[:, : G - 1]
    return np.asarray(gallery_labels)[order] == np.asarray(query_labels)[:, None]


def average_precision(matches: np.ndarray) -> np.ndarray:
    """AP per row of a ranked boolean relevance matrix (0 for rows without hits)."""
    hits = np.cumsum(matches, axis=1)
    ranks = np.arange(1, matches.shape[1] + 1)
    prec_sum = np.sum(np.where(matches, hits / ranks, 0.0), axis=1)
    n_rel = matches.sum(axis=1)
    return np.divide(prec_sum, n_rel, out=np.zeros(matches.shape[0]), where=n_rel > 0)


def evaluate(
    query_embeddings,
    gallery_embeddings,
    query_labels,
    gallery_labels,
    ks: Sequence[int] = (1, 5),
    same_set: bool | None = None,
) -> RetrievalMetrics:
    """mAP and CMC for dot-product retrieval.

    When the query set is the gallery (detected by identity/equality unless
    ``same_set`` is given) each query's own row is excluded from its ranking.
    Queries with no relevant gallery item are skipped and counted.
    """
    q = np.asarray(query_embeddings, dtype=np.float64)
    g = np.asarray(gallery_embeddings, dtype=np.float64)
    if g.shape[0] == 0:
        raise EmptyGallery("gallery is empty")
    if same_set is None:
        same_set = q is g or (q.shape == g.shape and np.array_equal(q, g)
                              and np.array_equal(np.asarray(query_labels), np.asarray(gallery_labels)))
    matches = _ranked_matches(q, g, np.asarray(query_labels), np.asarray(gallery_labels), same_set)
    kmax = max(ks) if len(ks) else 1
    evaluable = matches.any(axis=1)
    n_eval = int(evaluable.sum())
    if n_eval == 0:
        return RetrievalMetrics(0.0, np.zeros(kmax), 0, int(q.shape[0]))
    m = matches[evaluable]
    ap = average_precision(m)
    first = np.argmax(m, axis=1)  # 0-based rank of first hit
    cmc = np.array([np.mean(first < k) for k in range(1, kmax + 1)])
    return RetrievalMetrics(float(ap.mean()), cmc, n_eval, int(q.shape[0]) - n_eval)


# ---------------------------------------------------------------------------
# robustness sweep

NS_DEFAULT = (8, 16, 32)


@dataclass
class RobustnessCell:
    loss: str
    N: int
    seed: int
    map: float
    cmc1: float
    cmc5: float
    rel_drop: float = 0.0


@dataclass
class RobustnessReport:
    cells: list = field(default_factory=list)
    reference_N: int = 8

    def lookup(self, loss: str, N: int, seed: int) -> RobustnessCell:
        for c in self.cells:
            if (c.loss, c.N, c.seed) == (loss, N, seed):
                return c
        raise KeyError((loss, N, seed))

    def fill_drops(self) -> None:
        for c in self.cells:
            try:
                ref = self.lookup(c.loss, self.reference_N, c.seed).map
            except KeyError:
                c.rel_drop = float("nan")
                continue
            c.rel_drop = (ref - c.map) / ref if ref > 0 else float("nan")

    def median_drop(self, loss: str, N: int) -> float:
        drops = [c.rel_drop for c in self.cells if c.loss == loss and c.N == N]
        return float(np.median(drops)) if drops else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["loss", "N", "seed", "mAP", "cmc1", "cmc5", "rel_drop"])
        for c in self.cells:
            w.writerow([c.loss, c.N, c.seed, repr(c.map), repr(c.cmc1), repr(c.cmc5), repr(c.rel_drop)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"reference_N": self.reference_N, "cells": [c.__dict__ for c in self.cells]}, indent=2)


def robustness_sweep(
    dataset,
    losses: Sequence[str],
    Ns: Sequence[int] = NS_DEFAULT,
    seeds: Sequence[int] = (0,),
    base_cfg=None,
    eval_dataset=None,
    batch_size: int | None = None,
    workers: int = 1,
) -> RobustnessReport:
    """Train every (loss, N, seed) with otherwise identical configs and score them.

    With ``batch_size`` set, the number of classes per batch becomes
    ``batch_size // N`` (at least 2) so every N sees the same number of rows
    per step; otherwise ``base_cfg.batch_K`` is kept. ``eval_dataset``
    defaults to ``dataset``. Relative drops are taken against the same loss
    and seed at the smallest N. Runs are independent, so ``workers > 1``
    only changes wall-clock; cells are stored in grid order either way.
    """
    from .trainer import TrainConfig, train

    base = base_cfg or TrainConfig(use_identity=False)
    target = eval_dataset if eval_dataset is not None else dataset
    grid = []
    for loss in losses:
        for N in Ns:
            for seed in seeds:
                K = max(batch_size // N, 2) if batch_size else base.batch_K
                grid.append(replace(base, loss_kind=loss, batch_K=K, batch_N=N, seed=seed))

    def run(cfg):
        _, log = train(dataset, cfg, eval_dataset=target, eval_every=0)
        return log[-1]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            finals = list(pool.map(run, grid))
    else:
        finals = [run(cfg) for cfg in grid]
    report = RobustnessReport(reference_N=min(Ns))
    for cfg, final in zip(grid, finals):
        report.cells.append(RobustnessCell(cfg.loss_kind, cfg.batch_N, cfg.seed, final.map, final.cmc1, final.cmc5))
    report.fill_drops()
    return report
