"""Monte-Carlo experiment engine: BER sweeps, convergence traces, load-ratio and complexity studies.

Trials are generated in fixed-size blocks. Block ``b`` draws its channels,
bits and unit-power noise from ``RngStream(base_seed, b)``, so any worker
can produce any block and the aggregate depends only on the config. Noise
is scaled per SNR point, so every SNR and every detector sees the same
channels and bits (paired comparison with common random numbers).

Early stopping is evaluated on the ordered prefix of blocks: a detector
stops contributing after the first block at which its bit-error count
reaches ``min_errors``. Blocks computed speculatively by other workers past
that point are discarded, which keeps results identical for any thread
count.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import math
import time
from typing import Callable, Optional, Sequence

import numpy as np

from . import baseline, ep, lbl
from .baseline import BatchOutput, GramCache
from .lbl import LblConfig
from .txmodel import (
    SUPPORTED_ORDERS,
    Constellation,
    RngStream,
    build_constellation,
    complex_normal,
    snr_to_noise_variance,
)

log = logging.getLogger(__name__)

DEFAULT_TRIALS = 100_000
DEFAULT_MIN_ERRORS = 500
WILSON_Z = 1.959963984540054
CHANNELS = ("rayleigh", "identity")


@dataclass(frozen=True)
class SweepConfig:
    detectors: tuple = ("mmse", "lbl")
    N: int = 24
    K: int = 8
    M: int = 4
    snr_grid_db: tuple = (10.0,)
    n_trials: int = DEFAULT_TRIALS
    base_seed: int = 0
    lbl: LblConfig = LblConfig()
    ep_beta: float = ep.EP_BETA
    ep_iterations: int = 10
    pic_iterations: int = 10
    min_errors: int = DEFAULT_MIN_ERRORS
    complexity_trials: int = 20
    block_trials: int = 0
    ml_budget: int = baseline.ML_BUDGET
    alphas: tuple = ()
    complexity_points: tuple = ()
    channel: str = "rayleigh"

    def __post_init__(self):
        unknown = [d for d in self.detectors if d not in DETECTORS]
        if unknown:
            raise ValueError(f"detectors: unknown id(s) {unknown}; known {sorted(DETECTORS)}")
        if not self.detectors:
            raise ValueError("detectors: at least one detector is required")
        if not 1 <= self.K <= self.N:
            raise ValueError(f"need N >= K >= 1, got N={self.N}, K={self.K}")
        if self.M not in SUPPORTED_ORDERS:
            raise ValueError(f"M: unsupported order {self.M}")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        grid = list(self.snr_grid_db)
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("snr_grid_db must be non-empty and strictly increasing")
        if not 0 < self.ep_beta <= 1:
            raise ValueError("ep_beta must lie in (0, 1]")
        if self.ep_iterations < 1 or self.pic_iterations < 1:
            raise ValueError("ep_iterations and pic_iterations must be >= 1")
        if self.min_errors < 1:
            raise ValueError("min_errors must be >= 1")
        if self.block_trials < 0:
            raise ValueError("block_trials must be >= 0 (0 picks a size from N, K)")
        if self.channel not in CHANNELS:
            raise ValueError(f"channel must be one of {CHANNELS}, got {self.channel!r}")
        if any(not 0 < a <= 1 for a in self.alphas):
            raise ValueError("alphas must lie in (0, 1]")

    @property
    def block_size(self) -> int:
        return self.block_trials or default_block_trials(self.N, self.K)


def default_block_trials(N: int, K: int) -> int:
    """Trials per block: ~16 MB of channel coefficients, capped at 512."""
    return int(max(1, min(512, (1 << 20) // (N * K))))


# ------------------------------------------------------------- realizations

@dataclass
class Block:
    """One block of realizations; noise is unit power until scaled."""

    index: int
    H: np.ndarray
    bits: np.ndarray
    idx: np.ndarray
    x: np.ndarray
    w: np.ndarray
    gram: np.ndarray
    gram_off: np.ndarray
    gram_diag: np.ndarray
    _hx: Optional[np.ndarray] = None
    _hw: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.H.shape[0]

    def received(self, noise_var: float) -> np.ndarray:
        if self._hx is None:
            self._hx = np.einsum("bnk,bk->bn", self.H, self.x)
        return self._hx + math.sqrt(noise_var) * self.w

    def gram_cache(self, noise_var: float) -> GramCache:
        if self._hw is None:
            self._hw = np.einsum("bnk,bn->bk", self.H.conj(), self.w)
        mf = np.einsum("bkj,bj->bk", self.gram, self.x) + math.sqrt(noise_var) * self._hw
        return GramCache(self.gram, mf, self.gram_diag, self.gram_off,
                         np.full(self.size, noise_var), self.H.shape[1])


def draw_block(N: int, K: int, c: Constellation, seed: int, index: int, size: int,
               channel: str = "rayleigh") -> Block:
    rng = RngStream(seed, index).generator()
    H = complex_normal(rng, (size, N, K))
    if channel == "identity":
        H = np.broadcast_to(np.eye(N, K, dtype=np.complex128), H.shape).copy()
    bits = rng.integers(0, 2, size=(size, K * c.bits_per_symbol), dtype=np.uint8)
    w = complex_normal(rng, (size, N))
    q = c.bits_per_symbol
    labels = bits.reshape(size, K, q).astype(np.int64) @ (1 << np.arange(q - 1, -1, -1))
    idx = c.label_to_index(labels)
    gram = np.swapaxes(H.conj(), 1, 2) @ H
    diag = np.einsum("bnk,bnk->bk", H.conj(), H).real
    off = gram.copy()
    off[:, np.arange(K), np.arange(K)] = 0.0
    return Block(index, H, bits, idx, c.points[idx], w, gram, off, diag)


@dataclass
class Realization:
    """What a detector sees for one SNR point of one block."""

    block: Block
    noise_var: float
    y: np.ndarray
    gram: GramCache


# ------------------------------------------------------------- detectors

DetectorFn = Callable[[Realization, Constellation, SweepConfig], BatchOutput]


def _mrc(r, c, cfg):
    return baseline.mrc_batch(r.gram, c)


def _zf(r, c, cfg):
    return baseline.zf_batch(r.block.H, r.y, c)


def _mmse(r, c, cfg):
    return baseline.mmse_batch(r.gram, c)


def _pic(r, c, cfg):
    return baseline.pic_batch(r.gram, c, cfg.pic_iterations)


def _ep(r, c, cfg):
    return ep.ep_batch(r.block.H, r.y, r.noise_var, c, cfg.ep_beta, cfg.ep_iterations,
                       gram=r.gram)


def _lbl(r, c, cfg):
    return lbl.lbl_batch(r.gram, c, cfg.lbl)


def _ml(r, c, cfg):
    return baseline.ml_batch(r.block.H, r.y, c, cfg.ml_budget)


DETECTORS: dict = {
    "mrc": _mrc,
    "zf": _zf,
    "mmse": _mmse,
    "pic": _pic,
    "ep": _ep,
    "lbl": _lbl,
    "ml": _ml,
}


def register_detector(name: str, fn: DetectorFn) -> None:
    """Add a detector id usable in :class:`SweepConfig`."""
    DETECTORS[name] = fn


# ------------------------------------------------------------- records

@dataclass(frozen=True)
class BerRecord:
    detector: str
    N: int
    K: int
    M: int
    snr_db: float
    trials: int
    bit_errors: int
    bits_total: int
    ber: float
    ber_lo: float
    ber_hi: float
    mean_iterations: float
    mean_op_count: float
    wall_time_s: float
    # Not part of the CSV schema; None when read back from CSV.
    symbol_errors: Optional[int] = None
    mean_macs: Optional[float] = None


def confidence_interval(bit_errors: int, bits_total: int, z: float = WILSON_Z):
    """95 % Wilson score interval for an error rate."""
    if bits_total < 1:
        raise ValueError("bits_total must be >= 1")
    if not 0 <= bit_errors <= bits_total:
        raise ValueError("need 0 <= bit_errors <= bits_total")
    n = float(bits_total)
    p = bit_errors / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    lo = 0.0 if bit_errors == 0 else max(0.0, centre - half)
    hi = 1.0 if bit_errors == bits_total else min(1.0, centre + half)
    return lo, hi


@dataclass
class _Tally:
    trials: int = 0
    bit_errors: int = 0
    symbol_errors: int = 0
    iterations: int = 0
    op_count: int = 0
    macs: int = 0
    wall: float = 0.0

    def add(self, other: "_Tally") -> None:
        self.trials += other.trials
        self.bit_errors += other.bit_errors
        self.symbol_errors += other.symbol_errors
        self.iterations += other.iterations
        self.op_count += other.op_count
        self.macs += other.macs
        self.wall += other.wall


def _score(block: Block, out: BatchOutput, c: Constellation, wall: float) -> _Tally:
    hard_bits = c.bit_labels[out.hard_idx].reshape(block.bits.shape)
    return _Tally(
        trials=block.size,
        bit_errors=int(np.count_nonzero(hard_bits != block.bits)),
        symbol_errors=int(np.count_nonzero(out.hard_idx != block.idx)),
        iterations=int(out.iterations.sum()),
        op_count=int(np.sum(out.op_count)),
        macs=int(sum(np.sum(v) for v in out.macs.values())),
        wall=wall,
    )


def _record(det, cfg, snr, tally: _Tally, bits_per_trial) -> BerRecord:
    bits_total = tally.trials * bits_per_trial
    lo, hi = confidence_interval(tally.bit_errors, bits_total)
    n = tally.trials
    return BerRecord(det, cfg.N, cfg.K, cfg.M, float(snr), n, tally.bit_errors, bits_total,
                     tally.bit_errors / bits_total, lo, hi, tally.iterations / n,
                     tally.op_count / n, tally.wall, tally.symbol_errors, tally.macs / n)


# ------------------------------------------------------------- engine

def _usable_detectors(cfg: SweepConfig) -> list:
    dets = []
    for d in cfg.detectors:
        if d == "ml" and cfg.M ** cfg.K > cfg.ml_budget:
            log.warning("skipping ml at N=%d K=%d M=%d: M^K=%d exceeds budget %d",
                        cfg.N, cfg.K, cfg.M, cfg.M ** cfg.K, cfg.ml_budget)
            continue
        dets.append(d)
    return dets


def _run_block(cfg, c, snr, index, dets, collect=None):
    size = min(cfg.block_size, cfg.n_trials - index * cfg.block_size)
    block = draw_block(cfg.N, cfg.K, c, cfg.base_seed, index, size, cfg.channel)
    nv = noise_variance(snr, cfg.K, c)
    real = Realization(block, nv, block.received(nv), block.gram_cache(nv))
    tallies, outs = {}, {}
    for d in dets:
        t0 = time.perf_counter()
        try:
            out = DETECTORS[d](real, c, cfg)
        except ValueError as exc:
            tallies[d] = exc
            continue
        tallies[d] = _score(block, out, c, time.perf_counter() - t0)
        if collect is not None:
            outs[d] = out
    return tallies, outs


def noise_variance(snr_db: float, K: int, c: Constellation) -> float:
    """``snr_db = inf`` means a noiseless point."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return snr_to_noise_variance(snr_db, K, c.average_energy)


def _blocks(cfg: SweepConfig) -> int:
    return -(-cfg.n_trials // cfg.block_size)


def _run_point(cfg, c, snr, dets, pool, threads, collect=None):
    """Tallies per detector; a detector that raised is reported and dropped."""
    tallies = {d: _Tally() for d in dets}
    remaining = list(dets)
    n_blocks = _blocks(cfg)
    b = 0
    while remaining and b < n_blocks:
        wave = range(b, min(b + threads, n_blocks))
        todo = list(remaining)
        if pool is None:
            results = [_run_block(cfg, c, snr, i, todo, collect) for i in wave]
        else:
            results = list(pool.map(lambda i: _run_block(cfg, c, snr, i, todo, collect), wave))
        for res, outs in results:
            for d in list(remaining):
                if isinstance(res[d], Exception):
                    log.warning("dropping %s at snr=%s dB: %s", d, snr, res[d])
                    remaining.remove(d)
                    del tallies[d]
                    continue
                tallies[d].add(res[d])
                if collect is not None:
                    collect(d, outs[d])
                if tallies[d].bit_errors >= cfg.min_errors:
                    remaining.remove(d)
        b = wave.stop
    return tallies


def run_ber_sweep(cfg: SweepConfig, threads: int = 1) -> list:
    """One :class:`BerRecord` per (detector, SNR) cell, SNR-major order."""
    c = build_constellation(cfg.M)
    dets = _usable_detectors(cfg)
    bits_per_trial = cfg.K * c.bits_per_symbol
    records = []
    with _pool(threads) as pool:
        for snr in cfg.snr_grid_db:
            tallies = _run_point(cfg, c, snr, dets, pool, threads)
            records.extend(_record(d, cfg, snr, tallies[d], bits_per_trial)
                           for d in dets if d in tallies)
    return records


class _pool:
    def __init__(self, threads):
        if threads < 1:
            raise ValueError("threads must be >= 1")
        self.threads = threads
        self.ex = None

    def __enter__(self):
        if self.threads > 1:
            self.ex = ThreadPoolExecutor(self.threads)
        return self.ex

    def __exit__(self, *exc):
        if self.ex is not None:
            self.ex.shutdown()


# ------------------------------------------------------------- convergence

@dataclass(frozen=True)
class ConvergenceTrace:
    """DSC update norms of the LBL receiver per iteration ``t = 2 .. T_max``.

    ``mean_all`` averages over every trial, counting trials that already
    stopped as zero; ``mean``/``p50``/``p90``/``p99`` are over trials still
    running at ``t``.
    """

    N: int
    K: int
    snr_db: float
    epsilon: float
    t_max: int
    trials: int
    iteration: tuple
    n_active: tuple
    mean_all: tuple
    mean: tuple
    p50: tuple
    p90: tuple
    p99: tuple
    iterations_hist: tuple
    iterations_median: float
    iterations_p99: float
    iterations_max: int


def run_convergence_study(cfg: SweepConfig, threads: int = 1) -> list:
    """One :class:`ConvergenceTrace` per SNR in ``cfg.snr_grid_db`` (LBL only)."""
    if "lbl" not in cfg.detectors:
        raise ValueError("convergence study needs 'lbl' in the detector set")
    c = build_constellation(cfg.M)
    run_cfg = replace(cfg, detectors=("lbl",), min_errors=2 ** 62)
    T = cfg.lbl.t_max
    out = []
    with _pool(threads) as pool:
        for snr in cfg.snr_grid_db:
            traces, iters = [], []

            def grab(d, o):
                traces.append(o.trace)
                iters.append(o.iterations)

            _run_point(run_cfg, c, snr, ["lbl"], pool, threads, collect=grab)
            tr = np.concatenate(traces)
            it = np.concatenate(iters)
            out.append(_summarise_trace(cfg, snr, tr, it, T))
    return out


def _summarise_trace(cfg, snr, tr, it, T):
    ts, n_act, m_all, m, p50, p90, p99 = [], [], [], [], [], [], []
    for t in range(2, T + 1):
        col = tr[:, t - 1]
        live = col[np.isfinite(col)]
        ts.append(t)
        n_act.append(int(live.size))
        m_all.append(float(live.sum() / tr.shape[0]))
        if live.size:
            m.append(float(live.mean()))
            q = np.percentile(live, [50, 90, 99])
            p50.append(float(q[0]))
            p90.append(float(q[1]))
            p99.append(float(q[2]))
        else:
            m.append(0.0)
            p50.append(0.0)
            p90.append(0.0)
            p99.append(0.0)
    hist = np.bincount(it, minlength=T + 1)[1:T + 1]
    return ConvergenceTrace(
        cfg.N, cfg.K, float(snr), cfg.lbl.epsilon, T, int(it.size), tuple(ts), tuple(n_act),
        tuple(m_all), tuple(m), tuple(p50), tuple(p90), tuple(p99),
        tuple(int(h) for h in hist), float(np.median(it)), float(np.percentile(it, 99)),
        int(it.max()))


# ------------------------------------------------------------- load ratio

@dataclass(frozen=True)
class LoadRatioRecord:
    alpha: float
    N: int
    K: int
    M: int
    snr_db: float
    detector: str
    trials: int
    bit_errors: int
    bits_total: int
    ber: float
    ber_lo: float
    ber_hi: float


def run_load_ratio_study(N: int, alphas: Sequence[float], snr_db: float, cfg: SweepConfig,
                         threads: int = 1) -> list:
    out = []
    for alpha in alphas:
        K = int(round(alpha * N))
        if K < 1:
            raise ValueError(f"alpha={alpha} gives K={K} users at N={N}")
        sub = replace(cfg, N=N, K=K, snr_grid_db=(float(snr_db),), block_trials=0)
        for r in run_ber_sweep(sub, threads):
            out.append(LoadRatioRecord(float(alpha), N, K, r.M, r.snr_db, r.detector, r.trials,
                                       r.bit_errors, r.bits_total, r.ber, r.ber_lo, r.ber_hi))
    return out


# ------------------------------------------------------------- complexity

@dataclass(frozen=True)
class ComplexityRecord:
    detector: str
    N: int
    K: int
    T: int
    trials: int
    mean_iterations: float
    op_count: float
    macs: float
    factorization_macs: float


def run_complexity_study(points: Sequence, detectors: Sequence[str] = ("lbl", "mmse", "ep"),
                         M: int = 4, snr_db: float = 10.0, n_trials: int = 20,
                         seed: int = 0) -> list:
    """Average operation counts per detection at each ``(N, K, T)`` point.

    Iterative receivers run exactly ``T`` iterations (LBL's tolerance test is
    switched off) so the counts correspond to the stated ``T``.
    """
    c = build_constellation(M)
    out = []
    for N, K, T in points:
        cfg = SweepConfig(detectors=tuple(detectors), N=N, K=K, M=M, snr_grid_db=(snr_db,),
                          n_trials=n_trials, base_seed=seed,
                          lbl=LblConfig(t_max=T), ep_iterations=T,
                          pic_iterations=T)
        nv = noise_variance(snr_db, K, c)
        block = draw_block(N, K, c, seed, 0, n_trials)
        real = Realization(block, nv, block.received(nv), block.gram_cache(nv))
        for d in _usable_detectors(cfg):
            if d == "lbl":
                o = lbl.lbl_batch(real.gram, c, cfg.lbl, fixed_iterations=True)
            else:
                o = DETECTORS[d](real, c, cfg)
            out.append(ComplexityRecord(
                d, N, K, T, n_trials, float(o.iterations.mean()), float(np.mean(o.op_count)),
                float(np.mean(sum(o.macs.values()))), float(np.mean(o.macs["factorization"]))))
    return out


# ------------------------------------------------------------- curve helpers

def snr_at_ber(records: Sequence[BerRecord], target: float) -> float:
    """SNR where the BER curve crosses ``target`` (log-BER linear in dB); NaN if it never does."""
    pts = sorted((r.snr_db, r.ber) for r in records)
    for (s0, b0), (s1, b1) in zip(pts, pts[1:]):
        if b0 >= target >= b1 and b0 > 0:
            if b1 <= 0:
                return s1
            l0, l1, lt = math.log10(b0), math.log10(b1), math.log10(target)
            return s0 if l0 == l1 else s0 + (lt - l0) * (s1 - s0) / (l1 - l0)
    return float("nan")


def ber_at_snr(records: Sequence[BerRecord], snr: float) -> float:
    """BER interpolated log-linearly at ``snr``."""
    pts = sorted((r.snr_db, r.ber) for r in records)
    for (s0, b0), (s1, b1) in zip(pts, pts[1:]):
        if s0 <= snr <= s1:
            if b0 <= 0 or b1 <= 0:
                return b0 + (b1 - b0) * (snr - s0) / (s1 - s0)
            l0, l1 = math.log10(b0), math.log10(b1)
            return 10 ** (l0 + (l1 - l0) * (snr - s0) / (s1 - s0))
    return float("nan")


def by_detector(records, name):
    return [r for r in records if r.detector == name]
