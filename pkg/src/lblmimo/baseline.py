"""Classical receivers: MRC, ZF, MMSE, PIC with DSC, and exhaustive-search ML.

Every detector has a batched form (``*_batch``) operating on a leading axis
of independent realizations, used by the Monte-Carlo harness, and a
single-realization form (``detect_*``) returning a :class:`DetectorResult`.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import complexity, kernels
from .txmodel import Constellation, nearest_index

ML_BUDGET = 2 ** 20


@dataclass(frozen=True)
class GramCache:
    """Shared subexpressions ``H^H H`` and ``H^H y`` (batched over leading axes)."""

    gram: np.ndarray
    matched_filter: np.ndarray
    gram_diag: np.ndarray
    gram_off: np.ndarray
    noise_var: np.ndarray
    n_rx: int

    @property
    def n_users(self) -> int:
        return self.gram.shape[-1]


def compute_gram(H, y, noise_var) -> GramCache:
    H = np.asarray(H, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    if H.ndim < 2 or y.shape != H.shape[:-1]:
        raise ValueError(f"dimension mismatch: H {H.shape} vs y {y.shape}")
    Hh = np.swapaxes(H.conj(), -1, -2)
    gram = Hh @ H
    mf = np.einsum("...kn,...n->...k", Hh, y)
    diag = np.einsum("...nk,...nk->...k", H.conj(), H).real
    if np.any(diag <= 0):
        raise ValueError("channel has an all-zero column; its user is unobservable")
    K = H.shape[-1]
    off = gram.copy()
    off[..., np.arange(K), np.arange(K)] = 0.0
    nv = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), H.shape[:-2])
    if np.any(nv < 0):
        raise ValueError("noise variance must be >= 0")
    return GramCache(gram, mf, diag, off, np.array(nv), H.shape[-2])


@dataclass
class BatchOutput:
    """Per-realization detector outputs for a batch of size B."""

    hard_idx: np.ndarray
    soft: np.ndarray
    iterations: np.ndarray
    op_count: np.ndarray
    macs: dict
    trace: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DetectorResult:
    hard_symbols: np.ndarray
    soft_symbols: np.ndarray
    hard_bits: np.ndarray
    hard_indices: np.ndarray
    iterations_used: int
    op_count: int
    macs: dict
    trace: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def total_macs(self) -> int:
        return int(complexity.total_macs(self.macs))


def single_result(out: BatchOutput, c: Constellation) -> DetectorResult:
    """Unwrap the first realization of a batch into a :class:`DetectorResult`."""
    idx = out.hard_idx[0]
    return DetectorResult(
        hard_symbols=c.points[idx],
        soft_symbols=out.soft[0],
        hard_bits=c.bit_labels[idx].ravel(),
        hard_indices=idx,
        iterations_used=int(out.iterations[0]),
        op_count=int(out.op_count[0]),
        macs={k: int(v[0]) for k, v in out.macs.items()},
        trace=None if out.trace is None else out.trace[0],
        diagnostics=dict(out.diagnostics),
    )


def _batched(H, y):
    H = np.asarray(H, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    if H.ndim == 2:
        H, y = H[None], y[None]
    return H, y


def _as_batch_gram(g: GramCache) -> GramCache:
    if g.gram.ndim == 2:
        return GramCache(g.gram[None], g.matched_filter[None], g.gram_diag[None],
                         g.gram_off[None], np.atleast_1d(g.noise_var), g.n_rx)
    return g


def _hermitian_solve(A, b, what):
    """Solve ``A x = b`` for Hermitian positive-definite ``A`` via Cholesky."""
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise ValueError(f"{what}: matrix is not positive definite") from None
    piv = np.abs(np.diagonal(L, axis1=-2, axis2=-1)) ** 2
    scale = np.max(np.abs(np.diagonal(A, axis1=-2, axis2=-1)).real, axis=-1)
    if np.any(piv.min(axis=-1) <= 1e-13 * A.shape[-1] * scale):
        raise ValueError(f"{what}: matrix is numerically singular")
    w = np.linalg.solve(L, b[..., None])
    return np.linalg.solve(np.swapaxes(L.conj(), -1, -2), w)[..., 0]


def _linear_output(soft, c, op_count, macs, B):
    return BatchOutput(
        hard_idx=nearest_index(soft, c),
        soft=soft,
        iterations=np.ones(B, dtype=np.int64),
        op_count=op_count,
        macs=macs,
    )


# ---------------------------------------------------------------- batched

def mmse_batch(g: GramCache, c: Constellation) -> BatchOutput:
    g = _as_batch_gram(g)
    B, K = g.matched_filter.shape
    A = g.gram + g.noise_var[:, None, None] * np.eye(K)
    soft = _hermitian_solve(A, g.matched_filter, "MMSE")
    macs = complexity.empty_macs(B)
    macs["gram"][:] = complexity.gram_macs(g.n_rx, K)
    macs["factorization"][:] = K ** 3 // 3
    macs["solve"][:] = K * K
    ops = complexity.model_ops("mmse", g.n_rx, K, c.order, np.ones(B, dtype=np.int64))
    return _linear_output(soft, c, ops, macs, B)


def zf_batch(H, y, c: Constellation) -> BatchOutput:
    H, y = _batched(H, y)
    B, N, K = H.shape
    g = compute_gram(H, y, 0.0)
    soft = _hermitian_solve(g.gram, g.matched_filter, "ZF")
    macs = complexity.empty_macs(B)
    macs["gram"][:] = complexity.gram_macs(N, K)
    macs["factorization"][:] = K ** 3 // 3
    macs["solve"][:] = K * K
    ops = complexity.model_ops("zf", N, K, c.order, np.ones(B, dtype=np.int64))
    return _linear_output(soft, c, ops, macs, B)


def mrc_batch(g: GramCache, c: Constellation) -> BatchOutput:
    g = _as_batch_gram(g)
    B, K = g.matched_filter.shape
    soft = g.matched_filter / g.gram_diag
    macs = complexity.empty_macs(B)
    macs["gram"][:] = complexity.gram_macs(g.n_rx, K)
    macs["matvec"][:] = K
    ops = complexity.model_ops("mrc", g.n_rx, K, c.order, np.ones(B, dtype=np.int64))
    return _linear_output(soft, c, ops, macs, B)


def pic_batch(g: GramCache, c: Constellation, T: int) -> BatchOutput:
    """Classic PIC: raw cancellation iterates combined by DSC, exactly ``T`` passes."""
    if T < 1:
        raise ValueError(f"PIC needs T >= 1, got {T}")
    g = _as_batch_gram(g)
    B, K = g.matched_filter.shape
    soft, iters, trace = kernels.pic_dsc(g.gram, g.matched_filter, g.gram_diag,
                                         g.noise_var, c.points, -1.0, T, False)
    macs = complexity.empty_macs(B)
    macs["gram"][:] = complexity.gram_macs(g.n_rx, K)
    macs["matvec"][:] = 2 * K * K * iters
    return BatchOutput(nearest_index(soft, c), soft, iters,
                       complexity.model_ops("pic", g.n_rx, K, c.order, iters), macs, trace)


def ml_batch(H, y, c: Constellation, budget: int = ML_BUDGET) -> BatchOutput:
    H, y = _batched(H, y)
    B, N, K = H.shape
    need = c.order ** K
    if need > budget:
        raise ValueError(
            f"ML search over M^K = {c.order}^{K} = {need} candidates exceeds the "
            f"budget of {budget}; raise the budget to at least {need}")
    R, yt = kernels.qr_reduce(H, y)
    idx, visited = kernels.ml_search(R, yt, c.points)
    macs = complexity.empty_macs(B)
    macs["factorization"][:] = N * K * K
    macs["matvec"][:] = N * K
    macs["search"][:] = visited * K
    ops = complexity.model_ops("ml", N, K, c.order, np.ones(B, dtype=np.int64))
    return BatchOutput(idx, c.points[idx], np.ones(B, dtype=np.int64), ops, macs,
                       diagnostics={"visited_nodes": int(visited.sum())})


# ----------------------------------------------------------- single shot

def detect_mmse(gram: GramCache, c: Constellation) -> DetectorResult:
    return single_result(mmse_batch(gram, c), c)


def detect_zf(H, y, c: Constellation) -> DetectorResult:
    return single_result(zf_batch(H, y, c), c)


def detect_mrc(gram: GramCache, c: Constellation) -> DetectorResult:
    return single_result(mrc_batch(gram, c), c)


def detect_pic_dsc(gram: GramCache, c: Constellation, T: int) -> DetectorResult:
    return single_result(pic_batch(gram, c, T), c)


def detect_ml(H, y, c: Constellation, budget: int = ML_BUDGET) -> DetectorResult:
    return single_result(ml_batch(H, y, c, budget), c)
