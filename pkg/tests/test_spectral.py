import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from specdiff.losses import grad_check
from specdiff.spectral import (
    LogPolarParams,
    apodize,
    bilinear_sample,
    fft_magnitude,
    highpass,
    highpass_gain,
    log_polar,
    normalize_to_distribution,
    phase_correlate,
    soft_expectation,
    to_grayscale,
)


def rings(n=128, period=9.0):
    y, x = np.mgrid[:n, :n] - n // 2
    return 0.5 + 0.5 * np.cos(2 * np.pi * np.hypot(y, x) / period)


def blobs(n=128, seed=0, count=12):
    rng = np.random.default_rng(seed)
    img = np.zeros((n, n))
    y, x = np.mgrid[:n, :n]
    for _ in range(count):
        cy, cx = rng.uniform(0.25 * n, 0.75 * n, 2)
        s = rng.uniform(2, 5)
        img += rng.uniform(0.3, 1) * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * s * s))
    return img


# ---------------------------------------------------------------- grayscale


def test_grayscale_white_rgb_is_one():
    assert np.all(to_grayscale(np.ones((4, 5, 3))) == 1.0)


def test_grayscale_single_channel_is_identity():
    p = np.random.default_rng(0).random((6, 7))
    assert np.array_equal(to_grayscale(p), p)
    assert np.array_equal(to_grayscale(p[..., None]), p)


def test_grayscale_pure_red():
    img = np.zeros((3, 3, 3))
    img[..., 0] = 1
    assert np.allclose(to_grayscale(img), 0.299)


def test_grayscale_rejects_two_channels():
    with pytest.raises(ValueError):
        to_grayscale(np.zeros((4, 4, 2)))


# ---------------------------------------------------------------- window


def test_apodize_zeroes_border():
    out = apodize(np.random.default_rng(1).random((16, 12)) + 1)
    assert np.all(out[0] == 0) and np.all(out[-1] == 0)
    assert np.all(out[:, 0] == 0) and np.all(out[:, -1] == 0)


def test_apodize_odd_center_is_one():
    out = apodize(np.ones((9, 9)))
    assert out[4, 4] == pytest.approx(1.0)


@pytest.mark.parametrize("h,w", [(8, 8), (16, 32), (7, 9)])
def test_apodize_sum_matches_window_product(h, w):
    def win(n):
        return [0.5 * (1 - math.cos(2 * math.pi * i / (n - 1))) for i in range(n)]

    expected = sum(win(h)) * sum(win(w))
    assert apodize(np.ones((h, w))).sum() == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------- spectrum


def test_fft_magnitude_constant_is_dc_only():
    m = fft_magnitude(np.full((16, 16), 0.3))
    assert m[8, 8] == pytest.approx(0.3 * 256)
    m[8, 8] = 0
    assert np.all(m < 1e-9)


def test_fft_magnitude_impulse_is_flat():
    p = np.zeros((16, 16))
    p[3, 11] = 1.0
    assert np.allclose(fft_magnitude(p), 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (16, 16), elements=st.floats(0, 1)), st.integers(-16, 16), st.integers(-16, 16))
def test_fft_magnitude_translation_invariant(p, dr, dc):
    assert np.allclose(fft_magnitude(p), fft_magnitude(np.roll(p, (dr, dc), (0, 1))), atol=1e-9)


def test_fft_magnitude_rejects_nan():
    p = np.zeros((8, 8))
    p[1, 1] = np.nan
    with pytest.raises(ValueError):
        fft_magnitude(p)


def test_highpass_dc_and_rim():
    spec = np.ones((32, 32))
    out = highpass(spec)
    assert out[16, 16] == 0.0
    # rho = 1 on the axes at half the side
    assert out[16, 0] == pytest.approx(1.0)
    assert out[0, 16] == pytest.approx(1.0)


def test_highpass_gain_half_radius():
    u = (1 - math.cos(math.pi * 0.5)) / 2
    assert highpass_gain(0.5) == pytest.approx(u * (2 - u))
    assert highpass_gain(0.5) == pytest.approx(0.75)


@given(st.floats(0, 1), st.floats(0, 1))
def test_highpass_gain_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert 0 <= highpass_gain(lo) <= highpass_gain(hi) <= 1


# ---------------------------------------------------------------- log-polar


def test_log_polar_symmetric_input_has_constant_rows():
    lp = LogPolarParams(angular_bins=64, radial_bins=32, r_max=40.0)
    out = log_polar(rings(), lp)
    # interpolation residue only
    assert np.max(out.max(axis=1) - out.min(axis=1)) < 0.1


def test_log_polar_grid_geometry():
    lp = LogPolarParams(angular_bins=16, radial_bins=10, r_min=2.0, r_max=50.0).resolve((128, 128))
    r = lp.radii()
    assert r[0] == pytest.approx(2.0) and r[-1] == pytest.approx(50.0)
    assert np.allclose(r[1:] / r[:-1], (50 / 2) ** (1 / 9))


def test_log_polar_outside_is_zero():
    lp = LogPolarParams(angular_bins=16, radial_bins=8, r_min=1.0, r_max=200.0)
    out = log_polar(np.ones((32, 32)), lp)
    assert np.all(out[-1] == 0)


def test_log_polar_rotation_90_shifts_64_columns():
    p = blobs(128, seed=3)
    # np.rot90 turns about the middle of the pixel grid, not the spectral center bin
    lp = LogPolarParams(angular_bins=256, radial_bins=64, r_min=2.0, r_max=40.0, center=(63.5, 63.5))
    a = log_polar(p, lp)
    # rot90 maps (row, col) offsets (dy, dx) -> (-dx, dy) about the center
    b = log_polar(np.rot90(p, k=1, axes=(1, 0)).copy(), lp)
    shifts = np.arange(256)
    err = [np.abs(np.roll(a, s, axis=1) - b).mean() for s in shifts]
    assert int(np.argmin(err)) in (63, 64, 65)


def test_log_polar_scale_row_shift():
    lp = LogPolarParams(angular_bins=128, radial_bins=128, r_min=2.0, r_max=56.0).resolve((128, 128))
    p = blobs(128, seed=5, count=25)
    zoomed = ndimage.affine_transform(p, np.eye(2) / 1.2, offset=(64 - 64 / 1.2, 64 - 64 / 1.2), order=1)
    a, b = log_polar(p, lp), log_polar(zoomed, lp)
    expected = math.log(1.2) / math.log(lp.r_max / lp.r_min) * (lp.radial_bins - 1)
    # resample-and-correlate oracle over integer row shifts
    errs = {s: np.abs(a[5:-20] - b[5 + s : len(b) - 20 + s]).mean() for s in range(0, 12)}
    assert abs(min(errs, key=errs.get) - expected) <= 1.0


def test_log_polar_params_validation():
    with pytest.raises(ValueError):
        LogPolarParams(r_min=5, r_max=4).validate()
    with pytest.raises(ValueError):
        LogPolarParams(angular_bins=4).validate()


# ---------------------------------------------------------------- bilinear


def test_bilinear_integer_points_exact():
    p = np.random.default_rng(2).random((5, 6))
    r, c = np.mgrid[:5, :6]
    assert np.array_equal(bilinear_sample(p, r.astype(float), c.astype(float)), p)


def test_bilinear_midpoint():
    p = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear_sample(p, np.array([0.5]), np.array([0.5]))[0] == pytest.approx(1.5)


# ---------------------------------------------------------------- phase correlation


def test_phase_correlate_self_peaks_at_center():
    a = np.random.default_rng(0).random((32, 32))
    c = phase_correlate(a, a)
    assert np.unravel_index(np.argmax(c), c.shape) == (16, 16)
    assert c.max() >= 0.99


def test_phase_correlate_circular_shift():
    a = np.random.default_rng(1).random((64, 64))
    b = np.roll(a, (5, -3), axis=(0, 1))
    c = phase_correlate(a, b)
    assert np.unravel_index(np.argmax(c), c.shape) == (32 + 5, 32 - 3)


def test_phase_correlate_independent_noise_is_low():
    peaks = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        peaks.append(phase_correlate(rng.random((64, 64)), rng.random((64, 64))).max())
    assert max(peaks) < 0.2


def test_phase_correlate_flat_plane_is_a_plateau():
    # only the DC bin survives normalisation, so every shift scores 1/N
    c = phase_correlate(np.full((8, 8), 0.4), np.full((8, 8), 0.4))
    assert np.allclose(c, 1 / 64, atol=1e-15)


def test_phase_correlate_shape_mismatch():
    with pytest.raises(ValueError):
        phase_correlate(np.zeros((8, 8)), np.zeros((8, 16)))


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (16, 16), elements=st.floats(0.01, 1)))
def test_phase_correlate_self_center_property(a):
    c = phase_correlate(a, a)
    # a flat input gives a plateau, which the center still tops
    assert c[8, 8] >= c.max() - 1e-12


# ---------------------------------------------------------------- soft expectation


def _delta(shape, *points):
    c = np.full(shape, -1e3)
    for p in points:
        c[p] = 0.0
    return c


def test_soft_expectation_delta():
    assert soft_expectation(_delta((32, 48), (10, 20))) == pytest.approx((10.0, 20.0))


def test_soft_expectation_two_points():
    assert soft_expectation(_delta((32, 48), (10, 20), (12, 20))) == pytest.approx((11.0, 20.0))


def test_soft_expectation_gaussian_bump():
    y, x = np.mgrid[:32, :32]
    c = np.exp(-((y - 5.5) ** 2 + (x - 7.25) ** 2) / (2 * 1.5**2))
    row, col = soft_expectation(c, temperature=10.0)
    p = np.exp(10 * c)
    p /= p.sum()
    r0, c0 = np.unravel_index(np.argmax(c), c.shape)

    def offsets(n, center):
        # nearest representative of each index around the peak; the bin
        # exactly opposite counts as no offset
        out = []
        for i in range(n):
            d = (i - center) % n
            out.append(0 if d == n // 2 else d if d < n // 2 else d - n)
        return np.array(out, dtype=float)

    # dense weighted-mean oracle over peak-relative coordinates
    want_row = r0 + sum(p[i, j] * offsets(32, r0)[i] for i in range(32) for j in range(32))
    want_col = c0 + sum(p[i, j] * offsets(32, c0)[j] for i in range(32) for j in range(32))
    assert row == pytest.approx(want_row, abs=1e-9) and col == pytest.approx(want_col, abs=1e-9)
    assert row == pytest.approx(5.5, abs=0.05) and col == pytest.approx(7.25, abs=0.05)


def test_soft_expectation_across_seam():
    c = _delta((16, 16), (0, 8), (15, 8))
    row, col = soft_expectation(c)
    assert min(abs(row - 15.5), abs(row + 0.5)) < 1e-9
    assert col == pytest.approx(8.0)


def test_soft_expectation_rejects_nan():
    c = np.zeros((4, 4))
    c[0, 0] = np.inf
    with pytest.raises(ValueError):
        soft_expectation(c)


def test_soft_expectation_gradient_matches_fd():
    c = torch.rand(16, 16, dtype=torch.float64)
    report = grad_check(lambda m: sum(soft_expectation(m, 10.0)), c, 1e-6, 60)
    assert report.max_rel_error < 1e-3


# ---------------------------------------------------------------- distribution


def test_normalize_constant_is_uniform():
    p = normalize_to_distribution(np.full((8, 16), 0.7))
    assert np.allclose(p, 1 / 128)


def test_normalize_two_bin_closed_form():
    c = np.zeros((4, 8))
    c[1, 3] = 1.0
    p = normalize_to_distribution(c, temperature=1.0)
    assert p[1, 3] == pytest.approx(math.e / (math.e + 31))
    assert p[0, 0] == pytest.approx(1 / (math.e + 31))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(-5, 5)), st.floats(0.1, 50))
def test_normalize_sums_to_one_and_keeps_argmax(c, t):
    p = normalize_to_distribution(c, t)
    assert abs(p.sum() - 1) < 1e-6
    assert p.flat[np.argmax(c)] == pytest.approx(p.max())
