"""Linear Bayesian learning receiver.

Each iteration runs three stages on the shared Gram quantities:

* observation: parallel interference cancellation normalised by the
  per-user channel energy, with observation variance ``sigma^2 / ||h_k||^2``;
* estimation: posterior-mean projection of the observation onto the
  alphabet, plus the squared matched-filter residual of that estimate;
* combining: the current and previous estimates, each weighted by the
  other's residual, so the better-fitting one dominates; the mix is the
  next cancellation input.

Only elementwise divisions are needed; no matrix is factorised or inverted.
"""
from dataclasses import dataclass

import numpy as np

from . import complexity, kernels
from .baseline import BatchOutput, GramCache, _as_batch_gram, compute_gram, single_result
from .txmodel import Constellation, nearest_index


@dataclass(frozen=True)
class LblConfig:
    epsilon: float = 1e-6
    t_max: int = 10

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon: must be > 0, got {self.epsilon}")
        if int(self.t_max) != self.t_max or self.t_max < 1:
            raise ValueError(f"t_max: must be an integer >= 1, got {self.t_max}")


def bso(gram: GramCache, x_prev):
    """Cancelled observation and its (iteration-invariant) variance."""
    x_prev = np.asarray(x_prev, dtype=np.complex128)
    interference = np.einsum("...kj,...j->...k", gram.gram_off, x_prev)
    x_obs = (gram.matched_filter - interference) / gram.gram_diag
    sigma = np.asarray(gram.noise_var)[..., None] / gram.gram_diag
    return x_obs, sigma


def bse_weights(x_obs, sigma, c: Constellation):
    """Normalised posterior weights over the alphabet, shape (..., M)."""
    x_obs = np.asarray(x_obs, dtype=np.complex128)
    sigma = np.asarray(sigma, dtype=np.float64)
    logw = -np.abs(x_obs[..., None] - c.points) ** 2 / sigma[..., None]
    logw -= logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=-1, keepdims=True)


def bse_soft_symbol(x_obs, sigma, c: Constellation):
    xhat, _ = kernels.symbol_moments_numpy(x_obs, sigma, c.points, 0.0)
    return xhat


def bse_error(gram: GramCache, x_tilde):
    r = gram.matched_filter - np.einsum("...kj,...j->...k", gram.gram,
                                        np.asarray(x_tilde, dtype=np.complex128))
    return r.real ** 2 + r.imag ** 2


def dsc_combine(x_t, x_prev, v_t, v_prev):
    """Residual-weighted combination of two consecutive estimates."""
    x_t = np.asarray(x_t, dtype=np.complex128)
    x_prev = np.asarray(x_prev, dtype=np.complex128)
    v_t = np.asarray(v_t, dtype=np.float64)
    v_prev = np.asarray(v_prev, dtype=np.float64)
    den = v_t + v_prev
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        comb = (v_prev * x_t + v_t * x_prev) / den
    return np.where(den < kernels.DSC_DEGENERATE, x_t, comb)


def lbl_converged(x_dsc, x_dsc_prev, t: int, cfg: LblConfig) -> bool:
    if t < 1:
        raise ValueError("iteration index starts at 1")
    diff = np.linalg.norm(np.asarray(x_dsc) - np.asarray(x_dsc_prev))
    return bool(diff <= cfg.epsilon or t >= cfg.t_max)


def lbl_batch(g: GramCache, c: Constellation, cfg: LblConfig = LblConfig(),
              fixed_iterations: bool = False) -> BatchOutput:
    """Batched LBL; ``fixed_iterations`` disables the tolerance test (runs ``t_max``)."""
    g = _as_batch_gram(g)
    B, K = g.matched_filter.shape
    eps = -1.0 if fixed_iterations else cfg.epsilon
    soft, iters, trace = kernels.pic_dsc(g.gram, g.matched_filter, g.gram_diag,
                                         g.noise_var, c.points, eps, cfg.t_max, True)
    macs = complexity.empty_macs(B)
    macs["gram"][:] = complexity.gram_macs(g.n_rx, K)
    macs["matvec"][:] = 2 * K * K * iters
    macs["symbol"][:] = K * c.order * iters
    return BatchOutput(nearest_index(soft, c), soft, iters,
                       complexity.model_ops("lbl", g.n_rx, K, c.order, iters), macs, trace)


def detect_lbl(H, y, noise_var, c: Constellation, cfg: LblConfig = LblConfig()):
    return single_result(lbl_batch(compute_gram(H, y, noise_var), c, cfg), c)


def detect_lbl_reference(gram: GramCache, c: Constellation, cfg: LblConfig = LblConfig()):
    """Stage-by-stage loop for a single realization, built from the public stages.

    Returns ``(x_dsc, iterations, diff_norms)``. Slow; used to cross-check
    the fused kernels.
    """
    K = gram.n_users
    x_dsc = np.zeros(K, dtype=np.complex128)
    xt_prev = v_prev = None
    diffs = []
    t = 0
    while True:
        t += 1
        x_obs, sigma = bso(gram, x_dsc)
        xt = bse_soft_symbol(x_obs, sigma, c)
        v = bse_error(gram, xt)
        if t == 1:
            x_new = xt
            stop = t >= cfg.t_max
        else:
            x_new = dsc_combine(xt, xt_prev, v, v_prev)
            diffs.append(float(np.linalg.norm(x_new - x_dsc)))
            stop = lbl_converged(x_new, x_dsc, t, cfg)
        x_dsc, xt_prev, v_prev = x_new, xt, v
        if stop:
            return x_dsc, t, np.array(diffs)
