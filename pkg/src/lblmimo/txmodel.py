"""Square M-QAM constellations, Rayleigh channels and the uplink model ``y = Hx + n``."""
from dataclasses import dataclass, field
import math

import numpy as np

SUPPORTED_ORDERS = (4, 16, 64, 256)


@dataclass(frozen=True)
class Constellation:
    """Gray-labelled square QAM alphabet with unit average energy.

    Points are ordered row-major from the most negative corner: index
    ``a * L + b`` holds real level ``a`` and imaginary level ``b``, where
    ``L = sqrt(M)``. The first half of each label is the reflected Gray code
    of ``a``, the second half that of ``b``.

    Attributes
    ----------
    order : int
        Alphabet size M.
    points : np.ndarray
        Complex points, shape (M,).
    bit_labels : np.ndarray
        uint8 array of shape (M, log2 M), most significant bit first.
    average_energy : float
        Mean of ``|point|**2`` (1 by construction).
    """

    order: int
    points: np.ndarray
    bit_labels: np.ndarray
    average_energy: float
    _label_to_index: np.ndarray = field(repr=False)

    @property
    def bits_per_symbol(self) -> int:
        return self.bit_labels.shape[1]

    @property
    def max_axis(self) -> float:
        return float(np.max(self.points.real))

    def label_to_index(self, labels: np.ndarray) -> np.ndarray:
        return self._label_to_index[labels]


def _gray(n):
    return n ^ (n >> 1)


def build_constellation(M: int) -> Constellation:
    if M not in SUPPORTED_ORDERS:
        raise ValueError(
            f"unsupported QAM order M={M}; expected one of {SUPPORTED_ORDERS}")
    L = math.isqrt(M)
    half = int(math.log2(L))
    q = 2 * half
    scale = math.sqrt(3.0 / (2.0 * (M - 1)))
    levels = (2.0 * np.arange(L) - (L - 1)) * scale

    a, b = np.divmod(np.arange(M), L)
    points = levels[a] + 1j * levels[b]
    label_int = (_gray(a) << half) | _gray(b)
    shifts = np.arange(q - 1, -1, -1)
    bit_labels = ((label_int[:, None] >> shifts) & 1).astype(np.uint8)

    inverse = np.empty(M, dtype=np.int64)
    inverse[label_int] = np.arange(M)
    energy = float(np.mean(np.abs(points) ** 2))
    return Constellation(M, points, bit_labels, energy, inverse)


def _bits_to_indices(bits: np.ndarray, c: Constellation) -> np.ndarray:
    q = c.bits_per_symbol
    groups = bits.reshape(bits.shape[:-1] + (-1, q)).astype(np.int64)
    weights = 1 << np.arange(q - 1, -1, -1)
    return c.label_to_index(groups @ weights)


@dataclass(frozen=True)
class TransmitVector:
    symbols: np.ndarray
    source_bits: np.ndarray


def modulate(bits, c: Constellation) -> TransmitVector:
    """Map bits (MSB first, ``log2 M`` per user) to constellation symbols.

    Accepts a flat bit sequence or an array whose last axis holds the bits of
    one transmit vector.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    q = c.bits_per_symbol
    if bits.shape[-1] == 0 or bits.shape[-1] % q:
        raise ValueError(
            f"bit length {bits.shape[-1]} is not a positive multiple of log2(M)={q}")
    if np.any(bits > 1):
        raise ValueError("bits must be 0 or 1")
    return TransmitVector(c.points[_bits_to_indices(bits, c)], bits)


def nearest_index(symbols, c: Constellation) -> np.ndarray:
    """Index of the nearest point; ties go to the lower index."""
    symbols = np.asarray(symbols, dtype=np.complex128)
    dist = np.abs(symbols[..., None] - c.points) ** 2
    return np.argmin(dist, axis=-1)


def demap_hard(symbols, c: Constellation) -> np.ndarray:
    idx = nearest_index(symbols, c)
    return c.bit_labels[idx].reshape(idx.shape[:-1] + (-1,)) if idx.ndim else c.bit_labels[idx]


@dataclass(frozen=True)
class RngStream:
    """Counter-style stream: ``(seed, stream_id)`` fully determines the draws."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))


def _as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric CN(0, 1) draws."""
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
    w = rng.standard_normal(shape + (2,))
    return (w[..., 0] + 1j * w[..., 1]) * math.sqrt(0.5)


def sample_channel(N: int, K: int, rng) -> np.ndarray:
    """N x K i.i.d. CN(0, 1) Rayleigh channel."""
    if K < 1 or N < K:
        raise ValueError(f"need N >= K >= 1, got N={N}, K={K}")
    return complex_normal(_as_generator(rng), (N, K))


def transmit(H, x, noise_var: float, rng) -> np.ndarray:
    H = np.asarray(H, dtype=np.complex128)
    symbols = x.symbols if isinstance(x, TransmitVector) else np.asarray(x, dtype=np.complex128)
    if H.ndim != 2 or symbols.shape != (H.shape[1],):
        raise ValueError(
            f"dimension mismatch: H is {H.shape}, x has shape {symbols.shape}")
    if noise_var < 0:
        raise ValueError("noise variance must be >= 0")
    y = H @ symbols
    if noise_var > 0:
        y = y + math.sqrt(noise_var) * complex_normal(_as_generator(rng), (H.shape[0],))
    return y


def snr_to_noise_variance(snr_db: float, K: int, E_x: float = 1.0) -> float:
    """Noise power per antenna for SNR = K * E_x / sigma^2."""
    if K < 1 or E_x <= 0:
        raise ValueError("need K >= 1 and E_x > 0")
    return K * E_x / 10.0 ** (snr_db / 10.0)


def noise_variance_to_snr(noise_var: float, K: int, E_x: float = 1.0) -> float:
    return 10.0 * math.log10(K * E_x / noise_var)
