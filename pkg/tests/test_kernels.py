"""Compiled and numpy kernels must agree; the env flag must select numpy."""
import os
import subprocess
import sys

import numpy as np
import pytest

from sparsepair import _accel, _kernels

import oracles

needs_numba = pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba not installed")


def _grouped(rng, sizes, d=5):
    z = rng.standard_normal((sum(sizes), d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    S = np.clip(z @ z.T, -1, 1)
    members = rng.permutation(sum(sizes)).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return S, members, offsets


@needs_numba
@pytest.mark.parametrize("variant", [_kernels.HARD, _kernels.LEAST_HARD, _kernels.ADAPTIVE])
@pytest.mark.parametrize("fixed", [False, True])
def test_sp_batch_backends_agree(rng, variant, fixed):
    for sizes in ([2, 2], [3, 5, 2], [8, 8, 8, 8]):
        S, members, offsets = _grouped(rng, sizes)
        alpha = rng.uniform(0, 1, len(sizes))
        a = _kernels.sp_batch_numba(S, members, offsets, 0.04, variant, alpha, fixed)
        b = _kernels.sp_batch_numpy(S, members, offsets, 0.04, variant, alpha, fixed)
        for x, y in zip(a, b):
            assert np.allclose(x, y, rtol=1e-11, atol=1e-13)


@needs_numba
def test_sp_batch_ignores_rows_outside_members(rng):
    S, members, offsets = _grouped(rng, [3, 3])
    big = np.pad(S, ((0, 2), (0, 2)), constant_values=0.99)
    for fn in (_kernels.sp_batch_numba, _kernels.sp_batch_numpy):
        v1 = fn(S, members, offsets, 0.05, _kernels.ADAPTIVE, np.zeros(2), False)[0]
        out = fn(big, members, offsets, 0.05, _kernels.ADAPTIVE, np.zeros(2), False)
        assert np.allclose(out[0], v1)
        assert np.all(out[-1][6:] == 0) and np.all(out[-1][:, 6:] == 0)


@pytest.mark.parametrize("M", [2, 3, 4, 6])
def test_harmful_counts_backends_match_oracle(rng, M):
    P = M * (M - 1) // 2
    U = rng.random((20, 5, M, M))
    kh = rng.integers(0, P + 1, 5)
    fns = [_kernels.harmful_counts_numpy] + ([_kernels.harmful_counts_numba] if _accel.HAS_NUMBA else [])
    outs = [fn(U, kh) for fn in fns]
    for sp, dense in outs[1:]:
        assert np.array_equal(sp, outs[0][0]) and np.array_equal(dense, outs[0][1])
    sp, dense = outs[0]
    for t in range(U.shape[0]):
        for k in range(U.shape[1]):
            assert (sp[t, k], dense[t, k]) == oracles.harmful_id(U[t, k].tolist(), int(kh[k]))


def test_env_flag_forces_numpy():
    env = dict(os.environ, SPARSEPAIR_DISABLE_NUMBA="1")
    code = "from sparsepair import _kernels, backend_name; print(backend_name(), _kernels.sp_batch.__name__)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "sp_batch_numpy"]


@needs_numba
def test_default_backend_is_numba():
    env = {k: v for k, v in os.environ.items() if k != "SPARSEPAIR_DISABLE_NUMBA"}
    code = "from sparsepair import backend_name; print(backend_name())"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numba"
