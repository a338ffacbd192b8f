"""Time the numba and numpy kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The numba kernels are compiled (and cached) before timing.
"""
import argparse
import timeit

import numpy as np

from sparsepair import _accel, _kernels


def sp_inputs(K, N, d=16, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((K * N, d))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    S = np.clip(z @ z.T, -1, 1)
    members = np.arange(K * N, dtype=np.int64)
    offsets = np.arange(0, K * N + 1, N, dtype=np.int64)
    return (S, members, offsets, 0.04, _kernels.ADAPTIVE, np.zeros(K), False)


def sim_inputs(trials, ids, M, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.random((trials, ids, M, M)), np.full(ids, M // 2, dtype=np.int64))


def bench(fn, args, repeat):
    fn(*args)  # warm-up / compile
    number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-6)))
    best = min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number
    return best * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        print("numba is not installed; only the numpy kernels can run")
        return
    cases = [
        ("sp_batch K=4 N=8", _kernels.sp_batch_numba, _kernels.sp_batch_numpy, sp_inputs(4, 8)),
        ("sp_batch K=16 N=8", _kernels.sp_batch_numba, _kernels.sp_batch_numpy, sp_inputs(16, 8)),
        ("sp_batch K=4 N=32", _kernels.sp_batch_numba, _kernels.sp_batch_numpy, sp_inputs(4, 32)),
        ("harmful M=4 256x16", _kernels.harmful_counts_numba, _kernels.harmful_counts_numpy, sim_inputs(256, 16, 4)),
        ("harmful M=8 256x16", _kernels.harmful_counts_numba, _kernels.harmful_counts_numpy, sim_inputs(256, 16, 8)),
    ]
    print(f"{'case':<22}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, fast, slow, inputs in cases:
        a = bench(fast, inputs, args.repeat)
        b = bench(slow, inputs, args.repeat)
        print(f"{name:<22}{a:>12.4f}{b:>12.4f}{b / a:>10.1f}x")


if __name__ == "__main__":
    main()
