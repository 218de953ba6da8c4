import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lblmimo.txmodel import (
    RngStream,
    build_constellation,
    demap_hard,
    modulate,
    nearest_index,
    noise_variance_to_snr,
    sample_channel,
    snr_to_noise_variance,
    transmit,
)


@pytest.mark.parametrize("M", [4, 16, 64, 256])
def test_unit_energy_and_symmetry(M):
    c = build_constellation(M)
    assert c.points.shape == (M,)
    assert abs(np.mean(np.abs(c.points) ** 2) - 1.0) < 1e-12
    assert abs(c.average_energy - 1.0) < 1e-12
    pts = set(np.round(c.points, 12))
    assert set(np.round(-c.points, 12)) == pts
    assert set(np.round(c.points.conj(), 12)) == pts


def test_qpsk_closed_form():
    c = build_constellation(4)
    expect = {complex(a, b) / math.sqrt(2) for a in (-1, 1) for b in (-1, 1)}
    assert {complex(p) for p in np.round(c.points, 15)} == {complex(p) for p in np.round(list(expect), 15)}


def test_qam16_energy_by_enumeration():
    c = build_constellation(16)
    grid = [complex(a, b) for a in (-3, -1, 1, 3) for b in (-3, -1, 1, 3)]
    scale = math.sqrt(sum(abs(g) ** 2 for g in grid) / 16)
    assert np.allclose(sorted(c.points, key=lambda z: (z.real, z.imag)),
                       sorted(np.array(grid) / scale, key=lambda z: (z.real, z.imag)), atol=1e-15)


@pytest.mark.parametrize("M", [4, 16, 64, 256])
def test_gray_neighbours_differ_in_one_bit(M):
    c = build_constellation(M)
    step = 2 * math.sqrt(3 / (2 * (M - 1)))
    for i, j in itertools.combinations(range(M), 2):
        d = c.points[i] - c.points[j]
        adjacent = (abs(abs(d.real) - step) < 1e-9 and abs(d.imag) < 1e-9) or \
                   (abs(abs(d.imag) - step) < 1e-9 and abs(d.real) < 1e-9)
        if adjacent:
            assert np.sum(c.bit_labels[i] != c.bit_labels[j]) == 1


def test_qpsk_real_sign_flip_is_one_bit():
    c = build_constellation(4)
    p = c.points[0]
    q = nearest_index(np.array([complex(-p.real, p.imag)]), c)[0]
    assert np.sum(c.bit_labels[0] != c.bit_labels[q]) == 1


def test_row_major_order_from_corner():
    c = build_constellation(16)
    assert c.points[0].real < 0 and c.points[0].imag < 0
    assert np.all(np.diff(c.points.real) >= -1e-12)


def test_unsupported_order():
    with pytest.raises(ValueError, match="unsupported"):
        build_constellation(8)


def test_modulate_label_round_trip():
    c = build_constellation(4)
    for i in range(4):
        tv = modulate(c.bit_labels[i], c)
        assert tv.symbols.shape == (1,)
        assert tv.symbols[0] == c.points[i]


def test_exhaustive_round_trip_k2():
    c = build_constellation(4)
    for bits in itertools.product((0, 1), repeat=4):
        b = np.array(bits, dtype=np.uint8)
        assert np.array_equal(demap_hard(modulate(b, c).symbols, c), b)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([4, 16, 64, 256]), st.integers(1, 12), st.integers(0, 2 ** 32 - 1))
def test_random_round_trip(M, K, seed):
    c = build_constellation(M)
    b = np.random.default_rng(seed).integers(0, 2, K * c.bits_per_symbol, dtype=np.uint8)
    assert np.array_equal(demap_hard(modulate(b, c).symbols, c), b)


@pytest.mark.parametrize("bits", [[], [1, 0, 1]])
def test_modulate_rejects_bad_lengths(bits):
    with pytest.raises(ValueError):
        modulate(np.array(bits, dtype=np.uint8), build_constellation(4))


def test_modulate_rejects_non_binary():
    with pytest.raises(ValueError):
        modulate(np.array([0, 2]), build_constellation(4))


def test_demap_exact_point_and_tie():
    c = build_constellation(4)
    assert np.array_equal(demap_hard(c.points[2:3], c), c.bit_labels[2])
    assert np.array_equal(demap_hard(np.array([0j]), c), c.bit_labels[0])


def test_demap_by_hand():
    c = build_constellation(4)
    target = np.flatnonzero(np.isclose(c.points, (1 + 1j) / math.sqrt(2)))[0]
    out = demap_hard(np.array([(0.9 + 0.8j) / math.sqrt(2)]), c)
    assert np.array_equal(out, c.bit_labels[target])


def test_channel_statistics():
    H = sample_channel(1000, 1000, RngStream(5, 0).generator())
    p = np.abs(H) ** 2
    assert abs(p.mean() - 1.0) < 0.01
    assert abs(np.var(H.real) - 0.5) < 0.01 and abs(np.var(H.imag) - 0.5) < 0.01
    # within 3 standard errors (|h|^2 ~ Exp(1): sd 1)
    assert abs(p.mean() - 1.0) < 3 / math.sqrt(p.size)


def test_channel_determinism_and_independence():
    a = sample_channel(8, 4, RngStream(9, 3).generator())
    b = sample_channel(8, 4, RngStream(9, 3).generator())
    c = sample_channel(8, 4, RngStream(9, 4).generator())
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_channel_rejects_wide():
    with pytest.raises(ValueError):
        sample_channel(1, 2, RngStream(0, 0).generator())


def test_transmit_noiseless(rng):
    H = sample_channel(6, 3, rng)
    x = build_constellation(16).points[[1, 5, 9]]
    assert np.array_equal(transmit(H, x, 0.0, rng), H @ x)
    assert np.array_equal(transmit(np.eye(3), x, 0.0, rng), x)
    assert np.array_equal(transmit(np.array([[2.0]]), np.array([1.0]), 0.0, rng), [2.0])


def test_transmit_noise_power(rng):
    H = np.zeros((200_000, 1))
    y = transmit(H, np.array([1.0]), 0.3, rng)
    assert abs(np.mean(np.abs(y) ** 2) - 0.3) < 0.005


def test_transmit_rejects_mismatch(rng):
    with pytest.raises(ValueError):
        transmit(np.ones((3, 2)), np.ones(3), 0.1, rng)


def test_snr_convention():
    assert snr_to_noise_variance(0, 1, 1.0) == 1.0
    assert abs(snr_to_noise_variance(10, 1, 1.0) - 0.1) < 1e-15
    assert abs(snr_to_noise_variance(3.0103, 2, 1.0) - 1.0) < 1e-4
    assert abs(noise_variance_to_snr(snr_to_noise_variance(7.5, 8), 8) - 7.5) < 1e-12
