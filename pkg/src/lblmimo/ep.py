"""Expectation-propagation receiver with damped moment matching.

The Gaussian prior on each user is parameterised by a precision ``lam`` and
a precision-weighted mean ``gam``. One iteration forms the Gaussian
posterior given ``y``, removes the prior to get the extrinsic (cavity)
statistic, projects it onto the alphabet, and moves ``(gam, lam)`` toward
the values that would make the two moments agree.
"""
from dataclasses import dataclass, field

import numpy as np

from . import complexity, kernels
from .baseline import BatchOutput, _batched, compute_gram, single_result
from .txmodel import Constellation, nearest_index

EP_BETA = 0.9


@dataclass
class EpState:
    """Per-user EP quantities for one detection (leading batch axes allowed)."""

    lam: np.ndarray
    gam: np.ndarray
    beta: float = EP_BETA
    mu_obs: np.ndarray = None
    sigma_obs: np.ndarray = None
    x_ext: np.ndarray = None
    v_ext: np.ndarray = None
    x_hat: np.ndarray = None
    v: np.ndarray = None
    diagnostics: dict = field(default_factory=lambda: {"ext_fallbacks": 0, "param_holds": 0})


def ep_posterior(H, y, noise_var, gam, lam):
    """Mean and diagonal covariance of ``(H^H H / s2 + diag(lam))^-1``-type posterior."""
    H = np.asarray(H, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128)
    Hh = np.swapaxes(H.conj(), -1, -2)
    gram = Hh @ H
    mf = np.einsum("...kn,...n->...k", Hh, y)
    return _posterior_from_gram(gram, mf, np.asarray(noise_var, dtype=np.float64), gam, lam)


def _posterior_from_gram(gram, mf, noise_var, gam, lam):
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0):
        raise ValueError("EP precisions must be positive")
    K = gram.shape[-1]
    s2 = noise_var[..., None, None]
    A = gram / s2
    A[..., np.arange(K), np.arange(K)] += lam
    try:
        sigma = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise ValueError("EP posterior system is singular") from None
    sd = np.diagonal(sigma, axis1=-2, axis2=-1).real.copy()
    if np.any(sd <= 0) or not np.all(np.isfinite(sd)):
        raise ValueError("EP posterior system is not positive definite")
    mu = np.einsum("...kj,...j->...k", sigma, mf / noise_var[..., None] + gam)
    return mu, sd


def ep_extrinsic(mu_obs, sigma_obs, gam, lam, prev=None):
    """Cavity statistics with the prior removed.

    Users whose denominator ``1 - sigma_obs * lam`` is not positive keep the
    values in ``prev = (x_ext, v_ext)``. Returns ``(x_ext, v_ext, n_fallback)``.
    """
    mu_obs = np.asarray(mu_obs, dtype=np.complex128)
    sigma_obs = np.asarray(sigma_obs, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    den = 1.0 - sigma_obs * lam
    ok = den > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ext = sigma_obs / den
        x_ext = v_ext * (mu_obs / sigma_obs - gam)
    if prev is not None:
        x_ext = np.where(ok, x_ext, prev[0])
        v_ext = np.where(ok, v_ext, prev[1])
    elif not np.all(ok):
        raise ValueError("non-positive extrinsic variance and no fallback supplied")
    return x_ext, v_ext, int(np.count_nonzero(~ok))


def ep_moments(x_ext, v_ext, c: Constellation):
    return kernels.symbol_moments(x_ext, v_ext, c.points, kernels.VAR_FLOOR)


def ep_update_params(state: EpState):
    """Damped moment-matching update; returns ``(gam', lam', n_held)``."""
    lam_new = 1.0 / state.v - 1.0 / state.v_ext
    gam_new = state.x_hat / state.v - state.x_ext / state.v_ext
    ok = lam_new > 0
    b = state.beta
    lam = np.where(ok, b * lam_new + (1.0 - b) * state.lam, state.lam)
    gam = np.where(ok, b * gam_new + (1.0 - b) * state.gam, state.gam)
    return gam, lam, int(np.count_nonzero(~ok))


def ep_batch(H, y, noise_var, c: Constellation, beta: float = EP_BETA, T: int = 10,
             gram=None) -> BatchOutput:
    if T < 1:
        raise ValueError(f"EP needs T >= 1, got {T}")
    if not 0 < beta <= 1:
        raise ValueError(f"EP damping must lie in (0, 1], got {beta}")
    H, y = _batched(H, y)
    B, N, K = H.shape
    if gram is None:
        gram = compute_gram(H, y, noise_var)
    nv = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (B,))
    if np.any(nv <= 0):
        raise ValueError("EP needs a positive noise variance")
    ex = c.average_energy
    st = EpState(lam=np.full((B, K), 1.0 / ex), gam=np.zeros((B, K), dtype=np.complex128),
                 beta=beta)
    prev = (np.zeros((B, K), dtype=np.complex128), np.full((B, K), ex))
    for _ in range(T):
        st.mu_obs, st.sigma_obs = _posterior_from_gram(gram.gram, gram.matched_filter, nv,
                                                       st.gam, st.lam)
        st.x_ext, st.v_ext, nf = ep_extrinsic(st.mu_obs, st.sigma_obs, st.gam, st.lam, prev)
        st.diagnostics["ext_fallbacks"] += nf
        prev = (st.x_ext, st.v_ext)
        st.x_hat, st.v = ep_moments(st.x_ext, st.v_ext, c)
        st.gam, st.lam, nh = ep_update_params(st)
        st.diagnostics["param_holds"] += nh

    iters = np.full(B, T, dtype=np.int64)
    macs = complexity.empty_macs(B)
    macs["gram"][:] = complexity.gram_macs(N, K)
    macs["factorization"][:] = T * K ** 3
    macs["solve"][:] = T * K * K
    macs["symbol"][:] = T * 2 * K * c.order
    return BatchOutput(nearest_index(st.x_hat, c), st.x_hat, iters,
                       complexity.model_ops("ep", N, K, c.order, iters), macs,
                       diagnostics=dict(st.diagnostics))


def detect_ep(H, y, noise_var, c: Constellation, beta: float = EP_BETA, T: int = 10):
    return single_result(ep_batch(H, y, noise_var, c, beta, T), c)
