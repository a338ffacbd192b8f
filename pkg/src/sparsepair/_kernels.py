"""Hot loops: batched SP loss terms and harmful-pair counting.

Each kernel exists twice: an explicit loop compiled by numba and a
vectorized numpy version. The public name is bound according to
``_accel.USE_NUMBA``; tests exercise both and require agreement.

SP kernel conventions
---------------------
``members`` lists batch rows grouped by class, ``offsets[g]:offsets[g+1]``
delimiting class ``g``. Rows absent from ``members`` take no part at all.
``G`` is the derivative of the *sum* of per-class terms w.r.t. each ordered
similarity entry; the caller symmetrizes and contracts it with the
embeddings.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import USE_NUMBA, njit

HARD, LEAST_HARD, ADAPTIVE = 0, 1, 2
ALPHA_DENOM_FLOOR = 1e-12


def _harmonic_gate(s_h, s_lh):
    if s_h < 0.0:
        return 0.0
    den = s_h + s_lh
    if den <= ALPHA_DENOM_FLOOR:
        return 0.0
    return 2.0 * s_lh * s_h / den


_harmonic_gate_jit = njit(_harmonic_gate)


def _softplus_scalar(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def _sigmoid_scalar(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


_softplus_jit = njit(_softplus_scalar)
_sigmoid_jit = njit(_sigmoid_scalar)


@njit
def sp_batch_numba(S, members, offsets, tau, variant, alpha_fixed, use_fixed):
    B = S.shape[0]
    K = offsets.shape[0] - 1
    group_of = np.full(B, -1, dtype=np.int64)
    for g in range(K):
        for t in range(offsets[g], offsets[g + 1]):
            group_of[members[t]] = g

    G = np.zeros((B, B))
    values = np.empty(K)
    s_neg = np.empty(K)
    s_h = np.empty(K)
    s_lh = np.empty(K)
    alpha = np.empty(K)
    s_pos = np.empty(K)
    per_inst = np.empty(members.shape[0])

    for g in range(K):
        a = offsets[g]
        b = offsets[g + 1]

        mx = -np.inf
        for t in range(a, b):
            i = members[t]
            for j in range(B):
                if group_of[j] >= 0 and group_of[j] != g and S[i, j] > mx:
                    mx = S[i, j]
        acc = 0.0
        for t in range(a, b):
            i = members[t]
            for j in range(B):
                if group_of[j] >= 0 and group_of[j] != g:
                    acc += math.exp((S[i, j] - mx) / tau)
        neg = mx + tau * math.log(acc)

        for t in range(a, b):
            i = members[t]
            mn = np.inf
            for u in range(a, b):
                if u != t and S[i, members[u]] < mn:
                    mn = S[i, members[u]]
            acc = 0.0
            for u in range(a, b):
                if u != t:
                    acc += math.exp(-(S[i, members[u]] - mn) / tau)
            per_inst[t] = mn - tau * math.log(acc)

        lo = np.inf
        hi = -np.inf
        for t in range(a, b):
            lo = min(lo, per_inst[t])
            hi = max(hi, per_inst[t])
        acc_h = 0.0
        acc_lh = 0.0
        for t in range(a, b):
            acc_h += math.exp(-(per_inst[t] - lo) / tau)
            acc_lh += math.exp((per_inst[t] - hi) / tau)
        hard = lo - tau * math.log(acc_h)
        least = hi + tau * math.log(acc_lh)

        if use_fixed:
            al = alpha_fixed[g]
        else:
            al = _harmonic_gate_jit(hard, least)
        if variant == 0:
            pos = hard
        elif variant == 1:
            pos = least
        else:
            pos = al * hard + (1.0 - al) * least

        x = (neg - pos) / tau
        values[g] = _softplus_jit(x)
        cn = _sigmoid_jit(x) / tau
        s_neg[g] = neg
        s_h[g] = hard
        s_lh[g] = least
        alpha[g] = al
        s_pos[g] = pos

        for t in range(a, b):
            i = members[t]
            for j in range(B):
                if group_of[j] >= 0 and group_of[j] != g:
                    G[i, j] += cn * math.exp((S[i, j] - neg) / tau)
        for t in range(a, b):
            i = members[t]
            r = math.exp(-(per_inst[t] - hard) / tau)
            w = math.exp((per_inst[t] - least) / tau)
            if variant == 0:
                coeff = r
            elif variant == 1:
                coeff = w
            else:
                coeff = al * r + (1.0 - al) * w
            for u in range(a, b):
                if u != t:
                    j = members[u]
                    G[i, j] -= cn * coeff * math.exp(-(S[i, j] - per_inst[t]) / tau)

    return values, s_neg, s_h, s_lh, alpha, s_pos, per_inst, G


def _lse_rows(x, axis=-1):
    top = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(top, axis) + np.log(np.sum(np.exp(x - top), axis=axis))


def sp_batch_numpy(S, members, offsets, tau, variant, alpha_fixed, use_fixed):
    B = S.shape[0]
    K = offsets.shape[0] - 1
    active = np.zeros(B, dtype=bool)
    active[members] = True

    G = np.zeros((B, B))
    values = np.empty(K)
    s_neg = np.empty(K)
    s_h = np.empty(K)
    s_lh = np.empty(K)
    alpha = np.empty(K)
    s_pos = np.empty(K)
    per_inst = np.empty(members.shape[0])

    for g in range(K):
        rows = members[offsets[g]:offsets[g + 1]]
        n = rows.size
        others = active.copy()
        others[rows] = False
        cols = np.flatnonzero(others)

        cross = S[np.ix_(rows, cols)] / tau
        neg = tau * _lse_rows(cross.ravel())
        p = np.exp(cross - neg / tau)

        intra = -S[np.ix_(rows, rows)] / tau
        intra[np.diag_indices(n)] = -np.inf
        inst = -tau * _lse_rows(intra, axis=1)
        q = np.exp(intra + inst[:, None] / tau)
        hard = -tau * _lse_rows(-inst / tau)
        least = tau * _lse_rows(inst / tau)

        al = alpha_fixed[g] if use_fixed else _harmonic_gate(hard, least)
        r = np.exp(-(inst - hard) / tau)
        w = np.exp((inst - least) / tau)
        if variant == HARD:
            pos, coeff = hard, r
        elif variant == LEAST_HARD:
            pos, coeff = least, w
        else:
            pos, coeff = al * hard + (1.0 - al) * least, al * r + (1.0 - al) * w

        x = (neg - pos) / tau
        values[g] = _softplus_scalar(x)
        cn = _sigmoid_scalar(x) / tau
        G[np.ix_(rows, cols)] += cn * p
        G[np.ix_(rows, rows)] -= cn * coeff[:, None] * q

        s_neg[g], s_h[g], s_lh[g], alpha[g], s_pos[g] = neg, hard, least, al, pos
        per_inst[offsets[g]:offsets[g + 1]] = inst

    return values, s_neg, s_h, s_lh, alpha, s_pos, per_inst, G


@njit
def harmful_counts_numba(U, kh):
    """Harmful hits per (trial, id) for dense and SP positive sampling.

    ``U`` is (T, ids, M, M); only its strict upper triangle is read.
    ``kh[k]`` is the number of harmful pairs for id ``k``.
    """
    T, n_ids, M = U.shape[0], U.shape[1], U.shape[2]
    P = M * (M - 1) // 2
    sp_hits = np.zeros((T, n_ids), dtype=np.int64)
    dense_hits = np.zeros((T, n_ids), dtype=np.int64)
    vals = np.empty(P)
    rowmin = np.empty(M)
    for t in range(T):
        for k in range(n_ids):
            p = 0
            for i in range(M):
                for j in range(i + 1, M):
                    vals[p] = U[t, k, i, j]
                    p += 1
            if kh[k] == 0:
                thr = -np.inf
            else:
                thr = np.sort(vals)[kh[k] - 1]
            for i in range(M):
                mn = np.inf
                for j in range(M):
                    if j != i:
                        v = U[t, k, i, j] if i < j else U[t, k, j, i]
                        if v < mn:
                            mn = v
                rowmin[i] = mn
            best = -np.inf
            hits = 0
            for i in range(M):
                if rowmin[i] <= thr:
                    hits += 1
                if rowmin[i] > best:
                    best = rowmin[i]
            dense_hits[t, k] = hits
            sp_hits[t, k] = 1 if best <= thr else 0
    return sp_hits, dense_hits


def harmful_counts_numpy(U, kh):
    M = U.shape[-1]
    iu = np.triu_indices(M, 1)
    upper = np.triu(U, 1)
    V = upper + np.swapaxes(upper, -1, -2)
    V[..., np.arange(M), np.arange(M)] = np.inf
    pair_vals = np.sort(U[..., iu[0], iu[1]], axis=-1)
    kh = np.asarray(kh, dtype=np.int64)
    thr = np.where(kh > 0, np.take_along_axis(pair_vals, np.maximum(kh - 1, 0)[None, :, None], axis=-1)[..., 0], -np.inf)
    rowmin = V.min(axis=-1)
    dense_hits = np.sum(rowmin <= thr[..., None], axis=-1).astype(np.int64)
    sp_hits = (rowmin.max(axis=-1) <= thr).astype(np.int64)
    return sp_hits, dense_hits


if USE_NUMBA:
    sp_batch = sp_batch_numba
    harmful_counts = harmful_counts_numba
else:
    sp_batch = sp_batch_numpy
    harmful_counts = harmful_counts_numpy
