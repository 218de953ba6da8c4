"""Hot inner loops, each in a numba and a pure-numpy flavour.

All kernels work on a leading batch axis of independent realizations.
The module-level names without suffix dispatch on ``_backend.BACKEND``;
the ``*_numba`` / ``*_numpy`` variants stay importable so tests and the
benchmark can compare them directly.
"""
import math

import numpy as np

from ._backend import njit, use_numba

VAR_FLOOR = 1e-8
DSC_DEGENERATE = 1e-30


# ---------------------------------------------------------------- moments

def symbol_moments_numpy(mean, var, points, floor=VAR_FLOOR):
    """Posterior mean/variance of a discrete alphabet under a Gaussian observation.

    Weights are ``exp(-|mean - s|^2 / var)`` over ``s`` in ``points``,
    normalised in the log domain with per-entry max subtraction.
    """
    mean = np.asarray(mean, dtype=np.complex128)
    var = np.asarray(var, dtype=np.float64)
    dist = np.abs(mean[..., None] - points) ** 2
    excess = dist - dist.min(axis=-1, keepdims=True)
    # zero variance collapses onto the nearest point(s)
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = np.where(excess > 0, -excess / var[..., None], 0.0)
    w = np.exp(logw)
    w /= w.sum(axis=-1, keepdims=True)
    xhat = w @ points
    v = np.einsum("...m,...m->...", w, np.abs(points - xhat[..., None]) ** 2)
    return xhat, np.maximum(v, floor)


@njit
def _moments_one(xo, s, points, lw):
    M = points.shape[0]
    low = np.inf
    for m in range(M):
        dr = xo.real - points[m].real
        di = xo.imag - points[m].imag
        lw[m] = dr * dr + di * di
        if lw[m] < low:
            low = lw[m]
    tot = 0.0
    mr = 0.0
    mi = 0.0
    for m in range(M):
        excess = lw[m] - low
        if excess > 0.0:
            lw[m] = math.exp(-excess / s) if s > 0.0 else 0.0
        else:
            lw[m] = 1.0
        tot += lw[m]
        mr += lw[m] * points[m].real
        mi += lw[m] * points[m].imag
    mr /= tot
    mi /= tot
    v = 0.0
    for m in range(M):
        dr = points[m].real - mr
        di = points[m].imag - mi
        v += lw[m] * (dr * dr + di * di)
    return complex(mr, mi), v / tot


@njit
def _symbol_moments_loop(mean, var, points, floor, xhat, v):
    lw = np.empty(points.shape[0])
    for i in range(mean.shape[0]):
        xm, vm = _moments_one(mean[i], var[i], points, lw)
        xhat[i] = xm
        v[i] = vm if vm > floor else floor


def symbol_moments_numba(mean, var, points, floor=VAR_FLOOR):
    mean = np.asarray(mean, dtype=np.complex128)
    var = np.asarray(var, dtype=np.float64)
    shape = np.broadcast_shapes(mean.shape, var.shape)
    flat_m = np.ascontiguousarray(np.broadcast_to(mean, shape)).ravel()
    flat_v = np.ascontiguousarray(np.broadcast_to(var, shape)).ravel()
    xhat = np.empty_like(flat_m)
    v = np.empty_like(flat_v)
    _symbol_moments_loop(flat_m, flat_v, np.ascontiguousarray(points, dtype=np.complex128),
                         floor, xhat, v)
    return xhat.reshape(shape), v.reshape(shape)


# ----------------------------------------------------------- PIC / LBL loop

def pic_dsc_numpy(G, z, d, noise_var, points, eps, t_max, bayes):
    """Batched PIC iterations with DSC combining.

    With ``bayes`` the cancelled observation is projected onto the alphabet
    (posterior mean under variance ``noise_var / d``) before combining; that
    is the LBL receiver. Without it the raw PIC estimate is combined.

    DSC mixes the two most recent estimates, each weighted by the other's
    squared residual; the mix is what the next cancellation pass uses.

    Returns ``(x_dsc, iterations, trace)`` where ``trace[:, t-1]`` holds the
    norm of the DSC update at iteration ``t`` (NaN where not computed).
    """
    B, K = z.shape
    sigma = noise_var[:, None] / d
    off = G.copy()
    idx = np.arange(K)
    off[:, idx, idx] = 0.0

    x_dsc = np.zeros((B, K), dtype=np.complex128)
    x_prev = np.zeros((B, K), dtype=np.complex128)
    v_prev = np.zeros((B, K))
    iters = np.zeros(B, dtype=np.int64)
    trace = np.full((B, t_max), np.nan)
    active = np.ones(B, dtype=bool)

    for t in range(1, t_max + 1):
        a = np.flatnonzero(active)
        x_in = x_dsc[a]
        x_obs = (z[a] - np.einsum("bkj,bj->bk", off[a], x_in)) / d[a]
        if bayes:
            xt, _ = symbol_moments_numpy(x_obs, sigma[a], points, 0.0)
        else:
            xt = x_obs
        r = z[a] - np.einsum("bkj,bj->bk", G[a], xt)
        v = r.real ** 2 + r.imag ** 2
        if t == 1:
            new = xt
            done = np.full(a.size, t == t_max)
        else:
            vp = v_prev[a]
            den = v + vp
            with np.errstate(invalid="ignore", divide="ignore"):
                comb = (vp * xt + v * x_prev[a]) / den
            new = np.where(den < DSC_DEGENERATE, xt, comb)
            diff = np.linalg.norm(new - x_in, axis=1)
            trace[a, t - 1] = diff
            done = (diff <= eps) | (t == t_max)
        x_dsc[a] = new
        x_prev[a] = xt
        v_prev[a] = v
        iters[a[done]] = t
        active[a[done]] = False
        if not active.any():
            break
    return x_dsc, iters, trace


@njit
def _pic_dsc_loop(G, z, d, noise_var, points, eps, t_max, bayes,
                  x_out, iters, trace):
    B, K = z.shape
    lw = np.empty(points.shape[0])
    x_in = np.empty(K, dtype=np.complex128)
    xt = np.empty(K, dtype=np.complex128)
    x_prev = np.empty(K, dtype=np.complex128)
    v = np.empty(K)
    v_prev = np.empty(K)
    for b in range(B):
        for k in range(K):
            x_in[k] = 0.0
        for t in range(1, t_max + 1):
            for k in range(K):
                acc = z[b, k]
                for j in range(K):
                    if j != k:
                        acc -= G[b, k, j] * x_in[j]
                xo = acc / d[b, k]
                if bayes:
                    xm, _ = _moments_one(xo, noise_var[b] / d[b, k], points, lw)
                    xt[k] = xm
                else:
                    xt[k] = xo
            for k in range(K):
                r = z[b, k]
                for j in range(K):
                    r -= G[b, k, j] * xt[j]
                v[k] = r.real * r.real + r.imag * r.imag
            done = t == t_max
            if t == 1:
                for k in range(K):
                    x_in[k] = xt[k]
            else:
                diff2 = 0.0
                for k in range(K):
                    den = v[k] + v_prev[k]
                    if den < DSC_DEGENERATE:
                        new = xt[k]
                    else:
                        new = (v_prev[k] * xt[k] + v[k] * x_prev[k]) / den
                    dd = new - x_in[k]
                    diff2 += dd.real * dd.real + dd.imag * dd.imag
                    x_in[k] = new
                diff = math.sqrt(diff2)
                trace[b, t - 1] = diff
                if diff <= eps:
                    done = True
            for k in range(K):
                x_prev[k] = xt[k]
                v_prev[k] = v[k]
            if done:
                iters[b] = t
                break
        for k in range(K):
            x_out[b, k] = x_in[k]


def pic_dsc_numba(G, z, d, noise_var, points, eps, t_max, bayes):
    B, K = z.shape
    x_out = np.empty((B, K), dtype=np.complex128)
    iters = np.zeros(B, dtype=np.int64)
    trace = np.full((B, t_max), np.nan)
    _pic_dsc_loop(np.ascontiguousarray(G), np.ascontiguousarray(z), np.ascontiguousarray(d),
                  np.ascontiguousarray(noise_var, dtype=np.float64),
                  np.ascontiguousarray(points), float(eps), int(t_max), bool(bayes),
                  x_out, iters, trace)
    return x_out, iters, trace


# ------------------------------------------------------------ ML search
#
# Exact minimisation of ||y - Hx||^2 over the alphabet. With H[:, ::-1] = QR
# the metric becomes ||Q^H y - R u||^2 + const, u = x[::-1], so the search
# tree fixes user 0 first and depth-first traversal visits candidates in
# lexicographic order (user 0 most significant). Branches whose partial
# metric exceeds the best full metric so far, or the successive-cancellation
# (Babai) metric, cannot hold the minimiser and are skipped. Ties keep the
# lexicographically first candidate.

def ml_search_numpy(R, yt, points):
    B, K = yt.shape
    M = points.shape[0]
    best = np.empty((B, K), dtype=np.int64)
    visited = np.zeros(B, dtype=np.int64)
    for b in range(B):
        radius = _babai_numpy(R[b], yt[b], points)
        cand = np.zeros((1, 0), dtype=np.int64)
        part = np.zeros(1)
        for level in range(K):
            i = K - 1 - level
            cols = K - 1 - np.arange(level)
            acc = yt[b, i] - points[cand] @ R[b, i, cols]
            acc = acc[:, None] - R[b, i, i] * points[None, :]
            dist = (part[:, None] + (acc.real ** 2 + acc.imag ** 2)).ravel()
            visited[b] += dist.size
            keep = dist <= radius
            cand = np.concatenate(
                [np.repeat(cand, M, axis=0), np.tile(np.arange(M), cand.shape[0])[:, None]],
                axis=1)[keep]
            part = dist[keep]
        best[b] = cand[np.argmin(part)]
    return best, visited


def _babai_numpy(R, yt, points):
    K = yt.shape[0]
    u = np.zeros(K, dtype=np.complex128)
    dist = 0.0
    for level in range(K):
        i = K - 1 - level
        acc = yt[i] - R[i, i + 1:] @ u[i + 1:]
        c0 = acc / R[i, i] if R[i, i] != 0 else 0.0  # rank-deficient H: any start works
        u[i] = points[np.argmin(np.abs(c0 - points))]
        res = acc - R[i, i] * u[i]
        dist += res.real ** 2 + res.imag ** 2
    return dist * (1.0 + 1e-9) + _radius_slack(yt)


def _radius_slack(yt):
    # A noiseless Babai metric is pure round-off; the slack keeps the true
    # leaf from being pruned by a last-bit difference.
    return 1e-10 * (float(np.sum(yt.real ** 2 + yt.imag ** 2)) + 1.0)


@njit
def _ml_search_loop(R, yt, points, best, visited):
    B, K = yt.shape
    M = points.shape[0]
    cur = np.zeros(K, dtype=np.int64)
    part = np.zeros(K + 1)
    u = np.zeros(K, dtype=np.complex128)
    for b in range(B):
        # Babai point bounds the search radius.
        radius = 0.0
        for level in range(K):
            i = K - 1 - level
            acc = yt[b, i]
            for j in range(i + 1, K):
                acc -= R[b, i, j] * u[j]
            c0 = acc / R[b, i, i] if R[b, i, i] != 0 else 0.0 + 0.0j
            bm = 0
            bd = np.inf
            for m in range(M):
                dd = c0 - points[m]
                e = dd.real * dd.real + dd.imag * dd.imag
                if e < bd:
                    bd = e
                    bm = m
            u[i] = points[bm]
            res = acc - R[b, i, i] * u[i]
            radius += res.real * res.real + res.imag * res.imag
        energy = 0.0
        for i in range(K):
            energy += yt[b, i].real ** 2 + yt[b, i].imag ** 2
        bound = radius * (1.0 + 1e-9) + 1e-10 * (energy + 1.0)
        bestd = np.inf
        count = 0
        level = 0
        cur[0] = 0
        part[0] = 0.0
        while level >= 0:
            if cur[level] >= M:
                level -= 1
                if level >= 0:
                    cur[level] += 1
                continue
            i = K - 1 - level
            acc = yt[b, i]
            for j in range(i, K):
                acc -= R[b, i, j] * points[cur[K - 1 - j]]
            dist = part[level] + acc.real * acc.real + acc.imag * acc.imag
            count += 1
            if dist > bound:
                cur[level] += 1
                continue
            if level == K - 1:
                if dist < bestd:
                    bestd = dist
                    if dist < bound:
                        bound = dist
                    for k in range(K):
                        best[b, k] = cur[k]
                cur[level] += 1
            else:
                part[level + 1] = dist
                level += 1
                cur[level] = 0
        visited[b] = count


def ml_search_numba(R, yt, points):
    B, K = yt.shape
    best = np.zeros((B, K), dtype=np.int64)
    visited = np.zeros(B, dtype=np.int64)
    _ml_search_loop(np.ascontiguousarray(R), np.ascontiguousarray(yt),
                    np.ascontiguousarray(points), best, visited)
    return best, visited


def qr_reduce(H, y):
    """``(R, Q^H y)`` for the column-reversed channel, batched."""
    Q, R = np.linalg.qr(H[..., ::-1])
    yt = np.einsum("...nk,...n->...k", Q.conj(), y)
    return R, yt


# ------------------------------------------------------------ dispatch

def symbol_moments(mean, var, points, floor=VAR_FLOOR):
    if use_numba():
        return symbol_moments_numba(mean, var, points, floor)
    return symbol_moments_numpy(mean, var, points, floor)


def pic_dsc(G, z, d, noise_var, points, eps, t_max, bayes):
    if use_numba():
        return pic_dsc_numba(G, z, d, noise_var, points, eps, t_max, bayes)
    return pic_dsc_numpy(G, z, d, noise_var, points, eps, t_max, bayes)


def ml_search(R, yt, points):
    if use_numba():
        return ml_search_numba(R, yt, points)
    return ml_search_numpy(R, yt, points)
