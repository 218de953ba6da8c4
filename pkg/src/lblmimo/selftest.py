"""Fast invariant checks that a build is sound (the ``selftest`` subcommand).

Each check returns ``(ok, detail)``; :func:`run_selftest` runs all of them
and reports one line per check.
"""
from dataclasses import asdict
import time

import numpy as np

from . import baseline, ep, harness, kernels, lbl
from .txmodel import (
    RngStream,
    build_constellation,
    complex_normal,
    modulate,
    sample_channel,
    transmit,
)

SEED = 20240611


def _rng(k=0):
    return RngStream(SEED, k).generator()


def check_bse_normalization():
    worst = 0.0
    for i, M in enumerate((4, 16, 64, 256)):
        c = build_constellation(M)
        rng = _rng(i)
        x = complex_normal(rng, (2000,)) * 1.5
        s = 10.0 ** rng.uniform(-6, 1, 2000)
        w = lbl.bse_weights(x, s, c)
        worst = max(worst, float(np.max(np.abs(w.sum(axis=-1) - 1.0))))
        if np.any(w < 0):
            return False, f"negative weight at M={M}"
    return worst <= 1e-12, f"max |sum w - 1| = {worst:.2e}"


def check_dsc_convexity():
    rng = _rng(10)
    n = 5000
    xt, xp = complex_normal(rng, (n,)), complex_normal(rng, (n,))
    vt, vp = rng.exponential(size=n), rng.exponential(size=n)
    vt[:50] = 0.0
    out = lbl.dsc_combine(xt, xp, vt, vp)
    w = vp / (vt + vp)
    ok_w = np.all((w >= 0) & (w <= 1))
    err = float(np.max(np.abs(out - (w * xt + (1 - w) * xp))))
    return bool(ok_w and err <= 1e-12), f"max deviation from convex form {err:.2e}"


def check_sigma_invariance():
    c = build_constellation(16)
    rng = _rng(20)
    H = sample_channel(32, 8, rng)
    x = modulate(rng.integers(0, 2, 32, dtype=np.uint8), c).symbols
    y = transmit(H, x, 0.05, rng)
    g = baseline.compute_gram(H, y, 0.05)
    sig = [lbl.bso(g, complex_normal(rng, (8,)))[1] for _ in range(4)]
    same = all(np.array_equal(sig[0], s) for s in sig[1:])
    return same, "observation variance identical across cancellation inputs"


def check_ep_cavity():
    rng = _rng(30)
    c = build_constellation(4)
    worst = 0.0
    for trial in range(50):
        H = sample_channel(12, 4, rng)
        x = c.points[rng.integers(0, 4, 4)]
        nv = 0.1
        y = transmit(H, x, nv, rng)
        lam = rng.uniform(0.5, 3.0, 4)
        gam = complex_normal(rng, (4,))
        mu, sd = ep.ep_posterior(H, y, nv, gam, lam)
        xe, ve, nf = ep.ep_extrinsic(mu, sd, gam, lam)
        if nf:
            return False, "unexpected extrinsic fallback"
        # Re-attaching the prior to the cavity must give back the posterior marginal.
        prec = 1.0 / ve + lam
        worst = max(worst, float(np.max(np.abs(prec * sd - 1.0))),
                    float(np.max(np.abs((xe / ve + gam) / prec - mu))))
    return worst <= 1e-10, f"max cavity mismatch {worst:.2e}"


def check_noiseless_recovery():
    """ZF and ML on Rayleigh channels; LBL on channels with orthogonal columns.

    LBL is not exact on arbitrary noiseless channels: with zero noise its
    estimator is a hard slicer and cancellation can lock onto a wrong
    fixed point when users are strongly correlated.
    """
    fails = []
    for i, (N, K, M) in enumerate(((8, 4, 4), (16, 4, 16), (24, 8, 4))):
        c = build_constellation(M)
        rng = _rng(40 + i)
        for _ in range(40):
            H = sample_channel(N, K, rng)
            bits = rng.integers(0, 2, K * c.bits_per_symbol, dtype=np.uint8)
            x = modulate(bits, c).symbols
            y = H @ x
            results = {"zf": baseline.detect_zf(H, y, c)}
            if M ** K <= 2 ** 16:
                results["ml"] = baseline.detect_ml(H, y, c)
            Q = np.linalg.qr(H)[0] * rng.uniform(0.3, 3.0, K)
            results["lbl"] = lbl.detect_lbl(Q, Q @ x, 0.0, c)
            if not np.array_equal(lbl.detect_lbl(np.eye(K), x, 0.0, c).hard_bits, bits):
                fails.append(f"lbl-identity@{K}/{M}")
            for name, r in results.items():
                if not np.array_equal(r.hard_bits, bits):
                    fails.append(f"{name}@{N}x{K}/{M}")
    return not fails, "all exact" if not fails else f"failures: {sorted(set(fails))}"


def check_replay():
    cfg = harness.SweepConfig(detectors=("mmse", "lbl", "ep"), N=12, K=4,
                              snr_grid_db=(4.0, 8.0), n_trials=600, base_seed=7, min_errors=50)

    def strip(rs):
        return [{k: v for k, v in asdict(r).items() if k != "wall_time_s"} for r in rs]

    a, b = harness.run_ber_sweep(cfg), harness.run_ber_sweep(cfg, threads=2)
    return strip(a) == strip(b), f"{len(a)} records replayed identically"


def check_backend_agreement():
    c = build_constellation(16)
    rng = _rng(60)
    B, N, K = 64, 16, 6
    H = complex_normal(rng, (B, N, K))
    x = c.points[rng.integers(0, 16, (B, K))]
    y = np.einsum("bnk,bk->bn", H, x) + 0.2 * complex_normal(rng, (B, N))
    g = baseline.compute_gram(H, y, 0.04)
    nv = np.full(B, 0.04)
    a = kernels.pic_dsc_numpy(g.gram, g.matched_filter, g.gram_diag, nv, c.points, 1e-6, 10, True)
    b = kernels.pic_dsc_numba(g.gram, g.matched_filter, g.gram_diag, nv, c.points, 1e-6, 10, True)
    err = float(np.max(np.abs(a[0] - b[0])))
    same_iters = np.array_equal(a[1], b[1])
    R, yt = kernels.qr_reduce(H[:, :, :3], y)
    ml_same = np.array_equal(kernels.ml_search_numpy(R, yt, c.points)[0],
                             kernels.ml_search_numba(R, yt, c.points)[0])
    ok = err <= 1e-10 and same_iters and ml_same
    return ok, f"LBL max diff {err:.1e}, iterations equal {same_iters}, ML equal {ml_same}"


CHECKS = (
    ("bse weight normalization", check_bse_normalization),
    ("dsc convex combination", check_dsc_convexity),
    ("observation variance invariance", check_sigma_invariance),
    ("ep cavity identity", check_ep_cavity),
    ("noiseless exact recovery (zf, ml; lbl on orthogonal columns)", check_noiseless_recovery),
    ("deterministic replay", check_replay),
    ("numba/numpy kernel agreement", check_backend_agreement),
)


def run_selftest(out=print) -> bool:
    t0 = time.perf_counter()
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    out(f"selftest {'passed' if all_ok else 'FAILED'} in {time.perf_counter() - t0:.1f} s")
    return all_ok
