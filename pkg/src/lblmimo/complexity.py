"""Operation accounting.

Two currencies are kept per detection:

``op_count``
    The complexity-class model of each receiver (LBL and PIC ``N K T``,
    MMSE/ZF ``N^2 K + N K``, EP ``(N^2 K + N K) T``, MRC ``N K``, ML
    ``M^K N K``), evaluated at the actual dimensions and the iterations the
    detection really ran. This is the number the complexity study ranks
    receivers by.
``macs``
    Complex multiply-accumulates executed by this implementation, split by
    category. Anything spent factorising or inverting a matrix (Cholesky,
    QR, explicit inverse) lands in ``factorization``; a zero there is how
    the no-inversion property of the LBL path is asserted.
"""
import numpy as np

CATEGORIES = ("gram", "factorization", "solve", "matvec", "symbol", "search")


def model_ops(detector: str, N: int, K: int, M: int = 4, T=1):
    """Complexity-model operation count; ``T`` may be an array of iterations."""
    T = np.asarray(T, dtype=np.int64)
    if detector in ("lbl", "pic"):
        return N * K * T
    if detector in ("mmse", "zf"):
        return np.full_like(T, N * N * K + N * K)
    if detector == "ep":
        return (N * N * K + N * K) * T
    if detector == "mrc":
        return np.full_like(T, N * K)
    if detector == "ml":
        return np.full_like(T, (M ** K) * N * K)
    raise KeyError(f"no complexity model for detector {detector!r}")


def gram_macs(N: int, K: int) -> int:
    return N * K * K + N * K


def empty_macs(B: int) -> dict:
    return {cat: np.zeros(B, dtype=np.int64) for cat in CATEGORIES}


def total_macs(macs: dict):
    return sum(macs[cat] for cat in CATEGORIES)
