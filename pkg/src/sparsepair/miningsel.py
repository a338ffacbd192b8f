"""Exact positive/negative selectors and the harmful-pair sampling simulator.

Anchor-based rules (triplet batch-hard, circle, MP, EP, MS condition) pick
positives for a given anchor row; the SP rules are class-level and
anchor-free. Pairs are reported as sorted ``(row, row)`` tuples of batch
indices. Ties go to the lowest index (lexicographically lowest pair).
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .batchkit import ClassView
from .errors import MPNoValidPositive, NoNegatives, SingletonClass
from .sploss import adaptive_weight

MS_EPSILON = 0.1


class MiningKind(enum.Enum):
    TripletBH = "triplet_bh"
    MSCondition = "ms"
    Circle = "circle"
    MP = "mp"
    EP = "ep"
    SPHard = "sp_hard"
    SPLeastHard = "sp_leasthard"
    SPAdaptive = "sp_adaptive"

    @property
    def anchored(self) -> bool:
        return self not in (MiningKind.SPHard, MiningKind.SPLeastHard, MiningKind.SPAdaptive)


@dataclass(frozen=True)
class MiningStrategy:
    kind: MiningKind
    epsilon: float = MS_EPSILON

    def __post_init__(self):
        if not math.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite")


@dataclass(frozen=True)
class MiningSelection:
    anchor: int | None
    pairs: tuple
    selected_similarity: float
    # SPAdaptive only: the harmonic weight on the hardest pair
    alpha: float | None = None

    @property
    def positive_pair(self):
        return self.pairs[0] if len(self.pairs) == 1 else self.pairs


def _pair(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def _row_argmin(S: np.ndarray, rows: np.ndarray, k: int) -> int:
    """Position (within ``rows``) of row k's least similar positive."""
    vals = S[rows[k], rows].astype(np.float64)
    vals[k] = np.inf
    return int(np.argmin(vals))


def _sp_hard(S: np.ndarray, rows: np.ndarray) -> tuple[tuple[int, int], float]:
    n = rows.size
    iu, ju = np.triu_indices(n, 1)
    vals = S[rows[iu], rows[ju]]
    best = int(np.argmin(vals))
    return _pair(int(rows[iu[best]]), int(rows[ju[best]])), float(vals[best])


def _sp_leasthard(S: np.ndarray, rows: np.ndarray) -> tuple[tuple[int, int], float]:
    mins = np.empty(rows.size)
    partners = np.empty(rows.size, dtype=np.int64)
    for k in range(rows.size):
        partners[k] = _row_argmin(S, rows, k)
        mins[k] = S[rows[k], rows[partners[k]]]
    k = int(np.argmax(mins))
    return _pair(int(rows[k]), int(rows[partners[k]])), float(mins[k])


def select_positive(
    S: np.ndarray,
    view_i: ClassView,
    strategy: MiningStrategy,
    neg_context=None,
    anchor: int | None = None,
) -> MiningSelection:
    """Exact positive selection for one class under a positive-mining rule.

    ``anchor`` is a batch row of the class (required for anchored rules).
    ``neg_context[row]`` gives the hardest negative similarity of a row and
    is needed for MS and MP.
    """
    rows = np.asarray(view_i.row_indices, dtype=np.int64)
    if rows.size < 2:
        raise SingletonClass(f"class {view_i.class_id} has {rows.size} row(s)")
    kind = strategy.kind

    if kind is MiningKind.SPHard:
        pair, sim = _sp_hard(S, rows)
        return MiningSelection(None, (pair,), sim)
    if kind is MiningKind.SPLeastHard:
        pair, sim = _sp_leasthard(S, rows)
        return MiningSelection(None, (pair,), sim)
    if kind is MiningKind.SPAdaptive:
        hp, hs = _sp_hard(S, rows)
        lp, ls = _sp_leasthard(S, rows)
        alpha = adaptive_weight(hs, ls)
        return MiningSelection(None, (hp, lp), alpha * hs + (1.0 - alpha) * ls, alpha)

    if anchor is None:
        raise ValueError(f"{kind.name} is anchor-based; pass anchor=")
    hit = np.flatnonzero(rows == anchor)
    if hit.size == 0:
        raise ValueError(f"anchor {anchor} is not in class {view_i.class_id}")
    k = int(hit[0])
    others = np.delete(rows, k)
    sims = S[anchor, others]

    if kind in (MiningKind.TripletBH, MiningKind.Circle):
        m = int(np.argmin(sims))
        return MiningSelection(anchor, (_pair(anchor, int(others[m])),), float(sims[m]))
    if kind is MiningKind.EP:
        m = int(np.argmax(sims))
        return MiningSelection(anchor, (_pair(anchor, int(others[m])),), float(sims[m]))

    if neg_context is None:
        raise ValueError(f"{kind.name} needs neg_context (hardest negative per row)")
    hardest_neg = float(neg_context[anchor])
    if kind is MiningKind.MP:
        valid = np.flatnonzero(sims > hardest_neg)
        if valid.size == 0:
            raise MPNoValidPositive(f"no positive of anchor {anchor} beats its hardest negative {hardest_neg:.4f}")
        m = int(valid[np.argmin(sims[valid])])
        return MiningSelection(anchor, (_pair(anchor, int(others[m])),), float(sims[m]))
    if kind is MiningKind.MSCondition:
        chosen = np.flatnonzero(sims < hardest_neg + strategy.epsilon)
        pairs = tuple(sorted(_pair(anchor, int(others[m])) for m in chosen))
        # an empty selection has no similarity
        sim = float(sims[chosen].min()) if chosen.size else math.nan
        return MiningSelection(anchor, pairs, sim)
    raise ValueError(f"unhandled strategy {kind}")  # pragma: no cover


def select_negative_hardest(
    S: np.ndarray, view_i: ClassView, all_views: Sequence[ClassView]
) -> tuple[tuple[int, int], float]:
    """Most similar cross-class pair touching class i; ties to lowest indices."""
    rows = np.asarray(view_i.row_indices, dtype=np.int64)
    cols = [np.asarray(v.row_indices, dtype=np.int64) for v in all_views if v.class_id != view_i.class_id]
    if not cols:
        raise NoNegatives(f"no other class alongside {view_i.class_id}")
    cols = np.concatenate(cols)
    block = S[np.ix_(rows, cols)]
    top = block.max()
    ties = [_pair(int(rows[a]), int(cols[b])) for a, b in zip(*np.nonzero(block == top))]
    return min(ties), float(top)


def hardest_negatives(S: np.ndarray, labels) -> np.ndarray:
    """Per-row maximum similarity to any other class (-inf if none)."""
    labels = np.asarray(labels)
    masked = np.where(labels[:, None] != labels[None, :], S, -np.inf)
    return masked.max(axis=1)


# ---------------------------------------------------------------------------
# harmful-pair sampling simulator

SHARD_TRIALS = 256


@dataclass(frozen=True)
class HarmfulSimConfig:
    num_ids: int = 16
    instances: int = 4
    harmful_per_id: int | tuple = 2
    trials: int = 1000
    rng_seed: int = 0

    def kh_array(self) -> np.ndarray:
        kh = np.asarray(self.harmful_per_id, dtype=np.int64)
        if kh.ndim == 0:
            kh = np.full(self.num_ids, int(kh), dtype=np.int64)
        return kh

    def validate(self) -> None:
        if self.num_ids < 1:
            raise ValueError("num_ids must be >= 1")
        if self.instances < 2:
            raise ValueError("instances (M) must be >= 2")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        kh = self.kh_array()
        if kh.shape != (self.num_ids,):
            raise ValueError(f"harmful_per_id needs one entry per id ({self.num_ids})")
        pairs = self.instances * (self.instances - 1) // 2
        if np.any(kh < 0) or np.any(kh > pairs):
            raise ValueError(f"harmful_per_id must lie in [0, {pairs}]")


@dataclass
class TrialRecord:
    trial: int
    shard: int
    sp_hits: int
    dense_hits: int
    situation1_sp_hits: int


@dataclass
class HarmfulSimResult:
    config: HarmfulSimConfig
    p_sp: float
    p_dense: float
    situation1_sp_hits: int
    situation1_slots: int
    shard_seeds: list
    records: list = field(default_factory=list)

    def to_json(self) -> dict:
        cfg = asdict(self.config)
        cfg["harmful_per_id"] = self.config.kh_array().tolist()
        return {
            "config": cfg,
            "p_sp": self.p_sp,
            "p_dense": self.p_dense,
            "situation1_sp_hits": self.situation1_sp_hits,
            "situation1_slots": self.situation1_slots,
            "shard_seeds": self.shard_seeds,
            "trials": [asdict(r) for r in self.records],
        }


def shard_seed(rng_seed: int, shard: int) -> list[int]:
    """Seed material for one shard: the run seed plus the shard index."""
    return [int(rng_seed), int(shard)]


def _run_shard(cfg: HarmfulSimConfig, shard: int, kh: np.ndarray):
    start = shard * SHARD_TRIALS
    n = min(SHARD_TRIALS, cfg.trials - start)
    rng = np.random.default_rng(shard_seed(cfg.rng_seed, shard))
    U = rng.random((n, cfg.num_ids, cfg.instances, cfg.instances))
    sp, dense = _kernels.harmful_counts(U, kh)
    return shard, start, sp, dense


def run_harmful_sim(cfg: HarmfulSimConfig, workers: int = 1) -> HarmfulSimResult:
    """Estimate the fraction of harmful positives sampled by dense vs SP mining.

    Per id, a random symmetric similarity matrix (uniform off-diagonal) is
    drawn and its ``K_h`` lowest unordered pairs are marked harmful. Dense
    mining takes each row's least similar pair (M slots per id); SP takes
    the most similar of those row minima (one slot per id).
    """
    cfg.validate()
    kh = cfg.kh_array()
    n_shards = -(-cfg.trials // SHARD_TRIALS)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda s: _run_shard(cfg, s, kh), range(n_shards)))
    else:
        parts = [_run_shard(cfg, s, kh) for s in range(n_shards)]
    parts.sort(key=lambda p: p[0])

    sit1 = kh < cfg.instances
    sp_total = dense_total = sit1_hits = 0
    records = []
    for shard, start, sp, dense in parts:
        sp_total += int(sp.sum())
        dense_total += int(dense.sum())
        s1 = sp[:, sit1].sum(axis=1)
        sit1_hits += int(s1.sum())
        for t in range(sp.shape[0]):
            records.append(TrialRecord(start + t, shard, int(sp[t].sum()), int(dense[t].sum()), int(s1[t])))

    return HarmfulSimResult(
        config=cfg,
        p_sp=sp_total / (cfg.trials * cfg.num_ids),
        p_dense=dense_total / (cfg.trials * cfg.num_ids * cfg.instances),
        situation1_sp_hits=sit1_hits,
        situation1_slots=int(sit1.sum()) * cfg.trials,
        shard_seeds=[shard_seed(cfg.rng_seed, s) for s in range(n_shards)],
        records=records,
    )
