import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsepair import miningsel as ms
from sparsepair.batchkit import ClassView
from sparsepair.errors import MPNoValidPositive, NoNegatives, SingletonClass
from sparsepair.miningsel import HarmfulSimConfig, MiningKind, MiningStrategy, run_harmful_sim

import oracles

ANCHORED = {
    MiningKind.TripletBH: "triplet",
    MiningKind.Circle: "circle",
    MiningKind.EP: "ep",
    MiningKind.MP: "mp",
    MiningKind.MSCondition: "ms",
}


def _setup(seed, N, n_neg=3):
    r = np.random.default_rng(seed)
    B = N + n_neg
    A = r.uniform(-1, 1, (B, B))
    S = (A + A.T) / 2
    np.fill_diagonal(S, 1.0)
    labels = np.array([0] * N + [1] * n_neg)
    views = [ClassView(0, np.arange(N)), ClassView(1, np.arange(N, B))]
    return S, labels, views


@settings(max_examples=300)
@given(st.integers(2, 6), st.integers(0, 2**31))
def test_selectors_match_brute_force(N, seed):
    S, labels, views = _setup(seed, N)
    Sl = S.tolist()
    rows = list(range(N))
    neg = ms.hardest_negatives(S, labels)

    hp = ms.select_positive(S, views[0], MiningStrategy(MiningKind.SPHard))
    assert hp.pairs == (oracles.hardest_positive(Sl, rows),)
    lh = ms.select_positive(S, views[0], MiningStrategy(MiningKind.SPLeastHard))
    ref_pair, ref_val = oracles.least_hard_positive(Sl, rows)
    assert lh.pairs == (ref_pair,) and lh.selected_similarity == ref_val

    for a in rows:
        ctx = [oracles.hardest_negative_value(Sl, labels.tolist(), n) for n in range(len(labels))]
        assert np.allclose(neg, ctx)
        for kind, rule in ANCHORED.items():
            ref = oracles.anchor_positive(Sl, rows, a, rule, neg=ctx[a], eps=ms.MS_EPSILON)
            if ref is None:
                with pytest.raises(MPNoValidPositive):
                    ms.select_positive(S, views[0], MiningStrategy(kind), neg_context=neg, anchor=a)
                continue
            got = ms.select_positive(S, views[0], MiningStrategy(kind), neg_context=neg, anchor=a)
            assert got.pairs == ref[0]
            assert got.selected_similarity == ref[1] or (math.isnan(ref[1]) and math.isnan(got.selected_similarity))


def test_adaptive_selection_reports_both_pairs():
    S, _, views = _setup(4, 5)
    sel = ms.select_positive(S, views[0], MiningStrategy(MiningKind.SPAdaptive))
    h = ms.select_positive(S, views[0], MiningStrategy(MiningKind.SPHard))
    lh = ms.select_positive(S, views[0], MiningStrategy(MiningKind.SPLeastHard))
    assert sel.pairs == h.pairs + lh.pairs
    a = sel.alpha
    assert sel.selected_similarity == pytest.approx(a * h.selected_similarity + (1 - a) * lh.selected_similarity)


def test_ties_go_to_lowest_pair():
    S = np.full((4, 4), 0.5)
    np.fill_diagonal(S, 1.0)
    v = ClassView(0, np.arange(4))
    assert ms.select_positive(S, v, MiningStrategy(MiningKind.SPHard)).pairs == ((0, 1),)
    assert ms.select_positive(S, v, MiningStrategy(MiningKind.SPLeastHard)).pairs == ((0, 1),)
    assert ms.select_positive(S, v, MiningStrategy(MiningKind.TripletBH), anchor=2).pairs == ((0, 2),)
    assert ms.select_positive(S, v, MiningStrategy(MiningKind.EP), anchor=0).pairs == ((0, 1),)


def test_least_hard_differs_from_hard():
    # row 0 is an outlier: every pair with it is low; rows 1..3 are tight
    S = np.array([
        [1.0, 0.1, 0.2, 0.15],
        [0.1, 1.0, 0.9, 0.8],
        [0.2, 0.9, 1.0, 0.85],
        [0.15, 0.8, 0.85, 1.0],
    ])
    v = ClassView(0, np.arange(4))
    assert ms.select_positive(S, v, MiningStrategy(MiningKind.SPHard)).pairs == ((0, 1),)
    sel = ms.select_positive(S, v, MiningStrategy(MiningKind.SPLeastHard))
    assert sel.pairs == ((0, 2),) and sel.selected_similarity == 0.2


def test_ms_empty_selection_is_nan():
    S, labels, views = _setup(0, 3)
    neg = np.full(len(labels), -5.0)
    sel = ms.select_positive(S, views[0], MiningStrategy(MiningKind.MSCondition), neg_context=neg, anchor=0)
    assert sel.pairs == () and math.isnan(sel.selected_similarity)


def test_mp_without_valid_positive():
    S, labels, views = _setup(0, 3)
    with pytest.raises(MPNoValidPositive):
        ms.select_positive(S, views[0], MiningStrategy(MiningKind.MP), neg_context=np.full(len(labels), 2.0), anchor=0)


def test_selector_errors():
    S, labels, views = _setup(0, 3)
    with pytest.raises(SingletonClass):
        ms.select_positive(S, ClassView(0, np.array([0])), MiningStrategy(MiningKind.SPHard))
    with pytest.raises(ValueError):
        ms.select_positive(S, views[0], MiningStrategy(MiningKind.TripletBH))
    with pytest.raises(ValueError):
        ms.select_positive(S, views[0], MiningStrategy(MiningKind.TripletBH), anchor=5)
    with pytest.raises(ValueError):
        ms.select_positive(S, views[0], MiningStrategy(MiningKind.MP), anchor=0)
    with pytest.raises(NoNegatives):
        ms.select_negative_hardest(S, views[0], views[:1])
    assert not MiningKind.SPAdaptive.anchored and MiningKind.MP.anchored


@settings(max_examples=100)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_hardest_negative_brute_force(N, n_neg, seed):
    S, labels, views = _setup(seed, N, n_neg)
    pair, val = ms.select_negative_hardest(S, views[0], views)
    cand = [(S[a, b], (a, b)) for a in range(N) for b in range(N, N + n_neg)]
    best = max(v for v, _ in cand)
    assert val == best and pair == min(p for v, p in cand if v == best)


# ---------------------------------------------------------------------------
# simulator


def test_no_harmful_pairs():
    r = run_harmful_sim(HarmfulSimConfig(num_ids=4, instances=4, harmful_per_id=0, trials=50))
    assert r.p_sp == 0.0 and r.p_dense == 0.0


@pytest.mark.parametrize("M", [2, 3, 4])
def test_all_harmful(M):
    r = run_harmful_sim(HarmfulSimConfig(num_ids=4, instances=M, harmful_per_id=M * (M - 1) // 2, trials=50))
    assert r.p_sp == 1.0 and r.p_dense == 1.0


def test_two_lowest_pairs_analytic():
    # M=4, K_h=2: SP is hit only if the two lowest pairs are disjoint (1/5);
    # dense covers 3 rows w.p. 4/5 and 4 rows w.p. 1/5, so 0.8 per slot
    r = run_harmful_sim(HarmfulSimConfig(num_ids=16, instances=4, harmful_per_id=2, trials=10000, rng_seed=3))
    assert r.p_sp == pytest.approx(0.2, abs=0.005)
    assert r.p_dense == pytest.approx(0.8, abs=0.005)


def test_regression_values_frozen():
    r = run_harmful_sim(HarmfulSimConfig(num_ids=16, instances=4, harmful_per_id=2, trials=10000, rng_seed=3))
    assert r.p_sp == 0.1999625
    assert r.p_dense == 0.799990625
    assert r.situation1_sp_hits == 31994


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.data(), st.integers(0, 10**6))
def test_below_half_m_sp_never_hit(M, data, seed):
    # the row minima cover at least ceil(M/2) distinct pairs, all at or
    # below SP's pair, so fewer harmful pairs than that can never reach it
    kh = data.draw(st.integers(0, math.ceil(M / 2) - 1))
    r = run_harmful_sim(HarmfulSimConfig(num_ids=3, instances=M, harmful_per_id=kh, trials=200, rng_seed=seed))
    assert r.p_sp == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.data(), st.integers(0, 10**6))
def test_sp_hit_implies_every_dense_slot_hit(M, data, seed):
    P = M * (M - 1) // 2
    kh = data.draw(st.integers(0, P))
    U = np.random.default_rng(seed).random((30, 4, M, M))
    from sparsepair._kernels import harmful_counts_numpy

    sp, dense = harmful_counts_numpy(U, np.full(4, kh))
    assert np.all(dense[sp == 1] == M)


def test_matching_bound_is_tight():
    # perfect matching as the lowest pairs: K_h = M/2 reaches SP
    U = np.full((1, 1, 4, 4), 0.9)
    U[0, 0, 0, 1] = 0.1
    U[0, 0, 2, 3] = 0.2
    from sparsepair._kernels import harmful_counts_numpy

    sp, dense = harmful_counts_numpy(U, np.array([2]))
    assert sp[0, 0] == 1 and dense[0, 0] == 4


def test_workers_do_not_change_results():
    cfg = HarmfulSimConfig(num_ids=8, instances=5, harmful_per_id=3, trials=700, rng_seed=11)
    a, b = run_harmful_sim(cfg), run_harmful_sim(cfg, workers=3)
    assert a.to_json() == b.to_json()
    assert a.shard_seeds == [[11, 0], [11, 1], [11, 2]]
    assert len(a.records) == 700 and a.records[-1].trial == 699


def test_per_id_kh_and_situation_split():
    cfg = HarmfulSimConfig(num_ids=3, instances=4, harmful_per_id=(0, 3, 6), trials=100)
    r = run_harmful_sim(cfg)
    assert r.situation1_slots == 2 * 100
    assert r.to_json()["config"]["harmful_per_id"] == [0, 3, 6]


@pytest.mark.parametrize(
    "kw", [{"instances": 1}, {"harmful_per_id": 7}, {"harmful_per_id": -1}, {"trials": 0}, {"num_ids": 0},
           {"harmful_per_id": (1, 2)}],
)
def test_sim_config_validation(kw):
    with pytest.raises(ValueError):
        run_harmful_sim(HarmfulSimConfig(**{"num_ids": 4, "instances": 4, **kw}))
