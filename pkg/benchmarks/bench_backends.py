"""Time the numba kernels against their pure-numpy counterparts.

    python benchmarks/bench_backends.py [--repeat 5]

Each kernel is run once untimed so JIT compilation is excluded.
"""
import argparse
import time

import numpy as np

from lblmimo import baseline, kernels
from lblmimo.txmodel import RngStream, build_constellation, complex_normal


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = RngStream(99, 0).generator()
    qam16 = build_constellation(16)
    qpsk = build_constellation(4)

    B, N, K = 256, 96, 32
    H = complex_normal(rng, (B, N, K))
    x = qam16.points[rng.integers(0, 16, (B, K))]
    y = np.einsum("bnk,bk->bn", H, x) + 0.1 * complex_normal(rng, (B, N))
    g = baseline.compute_gram(H, y, 0.01)
    nv = np.full(B, 0.01)
    pic_args = (g.gram, g.matched_filter, g.gram_diag, nv, qam16.points, 1e-6, 10, True)
    yield (f"pic_dsc  B={B} {N}x{K} 16-QAM",
           lambda: kernels.pic_dsc_numpy(*pic_args), lambda: kernels.pic_dsc_numba(*pic_args))

    mean = complex_normal(rng, (4096, 64))
    var = rng.exponential(size=(4096, 64))
    yield ("moments  4096x64 16-QAM",
           lambda: kernels.symbol_moments_numpy(mean, var, qam16.points),
           lambda: kernels.symbol_moments_numba(mean, var, qam16.points))

    Bm, Nm, Km = 512, 12, 6
    Hm = complex_normal(rng, (Bm, Nm, Km))
    xm = qpsk.points[rng.integers(0, 4, (Bm, Km))]
    ym = np.einsum("bnk,bk->bn", Hm, xm) + 0.5 * complex_normal(rng, (Bm, Nm))
    R, yt = kernels.qr_reduce(Hm, ym)
    yield (f"ml       B={Bm} {Nm}x{Km} QPSK",
           lambda: kernels.ml_search_numpy(R, yt, qpsk.points),
           lambda: kernels.ml_search_numba(R, yt, qpsk.points))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, f_np, f_nb in cases():
        a, b = _best(f_np, args.repeat), _best(f_nb, args.repeat)
        print(f"{name:34s} {a * 1e3:10.2f} {b * 1e3:10.2f} {a / b:8.1f}x")


if __name__ == "__main__":
    main()
