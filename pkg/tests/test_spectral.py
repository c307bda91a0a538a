"""Tri-domain transform checks against a direct O(T^2) DFT oracle."""

import logging
import math

import numpy as np
import pytest

from fepcross import spectral
from fepcross.errors import ConfigError, ShapeError


def direct_dft(x):
    """Hand-rolled DFT summation, the independent oracle for the fft path."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    t = np.arange(T)
    basis = np.exp(-2j * np.pi * np.outer(t, t) / T)
    return x @ basis.T


def band_limited(rng, T, n_harmonics=5, dtype=np.float64):
    t = np.arange(T)
    x = np.zeros(T)
    for _ in range(n_harmonics):
        k = rng.integers(1, T // 2 - 1)
        x += rng.normal() * np.cos(2 * np.pi * k * t / T + rng.uniform(-np.pi, np.pi))
    x += rng.normal() * 3
    return x.astype(dtype)


# -- forward transform --------------------------------------------------------


def test_amplitude_phase_match_direct_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=288)
    amp, phase = spectral.to_tri_domain(x)
    full = direct_dft(x)
    half = full[:144]
    assert amp.shape == (144,) and phase.shape == (144,)
    assert np.allclose(amp, np.abs(half), rtol=1e-9, atol=1e-9)
    big = np.abs(half) > 1e-9
    assert np.allclose(phase[big], np.angle(half[big]), atol=1e-9)


def test_constant_series_closed_form():
    c = 2.5
    amp, phase = spectral.to_tri_domain(np.full(288, c))
    assert amp[0] == pytest.approx(288 * c, rel=1e-12)
    assert np.allclose(amp[1:], 0.0, atol=1e-9)
    assert np.allclose(phase, 0.0)


def test_unit_cosine_closed_form():
    t = np.arange(288)
    x = np.cos(2 * np.pi * t / 288)
    amp, phase = spectral.to_tri_domain(x)
    assert amp[1] == pytest.approx(144.0, abs=1e-9)
    assert phase[1] == pytest.approx(0.0, abs=1e-9)
    others = np.delete(amp, 1)
    assert np.all(others < 1e-9)


def test_cosine_phase_offset_recovered():
    t = np.arange(288)
    x = np.cos(2 * np.pi * 7 * t / 288 + 0.7)
    _, phase = spectral.to_tri_domain(x)
    assert phase[7] == pytest.approx(0.7, abs=1e-9)


def test_phase_range_and_tiny_bins_zeroed():
    rng = np.random.default_rng(1)
    x = band_limited(rng, 96)
    amp, phase = spectral.to_tri_domain(x)
    assert np.all(phase > -np.pi) and np.all(phase <= np.pi)
    assert np.all(phase[amp < 1e-9] == 0.0)


def test_rounding_residue_phases_zeroed_float32():
    # a float32 pure cosine leaves ~1e-5 residue in every empty bin; their
    # angles are arbitrary, so they must come back as exactly 0
    t = np.arange(288)
    x = (10.0 * np.cos(2 * np.pi * 3 * t / 288 + 0.4)).astype(np.float32)
    amp, phase = spectral.to_tri_domain(x)
    empty = np.ones(144, dtype=bool)
    empty[3] = False
    assert amp[empty].max() > 1e-9  # residue really is above the absolute floor
    assert amp[empty].max() < 1e-6 * amp.max()
    assert np.all(phase[empty] == 0.0)
    assert phase[3] == pytest.approx(0.4, abs=1e-4)


def test_parseval_identity():
    rng = np.random.default_rng(2)
    x = rng.normal(size=288)
    full = direct_dft(x)
    energy_time = float((x ** 2).sum())
    energy_freq = float((np.abs(full) ** 2).sum()) / 288
    assert abs(energy_time - energy_freq) / energy_time < 1e-6
    # retained bins + mirror + Nyquist account for the same energy
    amp, _ = spectral.to_tri_domain(x)
    rebuilt = amp[0] ** 2 + 2 * (amp[1:] ** 2).sum() + np.abs(full[144]) ** 2
    assert abs(energy_time - rebuilt / 288) / energy_time < 1e-6


def test_odd_length_rejected():
    with pytest.raises(ConfigError):
        spectral.to_tri_domain(np.zeros(289))


# -- round trips --------------------------------------------------------------


def test_roundtrip_float64_band_limited():
    rng = np.random.default_rng(3)
    x = band_limited(rng, 288)
    amp, phase = spectral.to_tri_domain(x)
    back = spectral.from_tri_domain(amp, phase, 288)
    assert np.abs(back - x).max() < 1e-9


def test_roundtrip_float32_band_limited():
    rng = np.random.default_rng(4)
    x = band_limited(rng, 288, dtype=np.float32)
    amp, phase = spectral.to_tri_domain(x)
    assert amp.dtype == np.float32
    back = spectral.from_tri_domain(amp, phase, 288)
    assert back.dtype == np.float32
    assert np.abs(back - x.astype(np.float64)).max() < 1e-4


def test_from_tri_domain_validates():
    with pytest.raises(ShapeError):
        spectral.from_tri_domain(np.ones(4), np.ones(5), 8)
    with pytest.raises(ConfigError):
        spectral.from_tri_domain(np.ones(4), np.ones(4), 10)


# -- patching -----------------------------------------------------------------


def test_patchify_slices_in_order():
    x = np.arange(288.0)
    patches = spectral.patchify(x, 24)
    assert patches.shape == (24, 12)
    assert np.array_equal(patches[3], x[36:48])
    assert np.array_equal(spectral.unpatchify(patches), x)


def test_patchify_rejects_nondivisible():
    with pytest.raises(ConfigError):
        spectral.patchify(np.zeros(288), 25)


def test_window_to_sample_shapes_and_invariants():
    rng = np.random.default_rng(5)
    series = rng.normal(size=(4, 288)) + 60
    s = spectral.window_to_sample(series, 24)
    assert s.time_patches.shape == (4, 24, 12)
    assert s.amp_patches.shape == (4, 24, 6)
    assert s.phase_patches.shape == (4, 24, 6)
    assert np.all(s.amp_patches >= 0)
    flat_phase = s.phase_patches.reshape(-1)
    assert np.all(flat_phase > -np.pi) and np.all(flat_phase <= np.pi)
    assert not s.time_mask.any() and not s.amp_mask.any() and not s.phase_mask.any()
    assert np.array_equal(spectral.sample_to_series(s), series)


def test_window_to_sample_amp_scale():
    t = np.arange(288)
    series = np.cos(2 * np.pi * t / 288)[None, :] * 3.0
    s = spectral.window_to_sample(series, 24, amp_scale=2.0 / 288)
    # unit conditioning: harmonic of amplitude 3 shows up as ~3
    assert s.amp_patches.reshape(1, 144)[0, 1] == pytest.approx(3.0, rel=1e-6)


def test_window_to_sample_rejects_bad_patch_count():
    with pytest.raises(ConfigError):
        spectral.window_to_sample(np.zeros((2, 288)), 28)


# -- masking ------------------------------------------------------------------


def test_mask_counts_exact():
    rng = np.random.default_rng(6)
    s = spectral.window_to_sample(rng.normal(size=(5, 288)), 24)
    masked = spectral.apply_mask(s, 0.75, rng_seed=9)
    for m in (masked.time_mask, masked.amp_mask, masked.phase_mask):
        assert np.all(m.sum(axis=1) == 18)  # ceil(0.75 * 24)
    assert not s.time_mask.any()  # input untouched


@pytest.mark.parametrize("ratio,expected", [(0.0, 0), (0.25, 6), (0.5, 12), (1.0, 24), (0.7, 17)])
def test_mask_count_is_ceiling(ratio, expected):
    assert spectral.masked_patch_count(ratio, 24) == expected


def test_mask_deterministic_in_seed():
    rng = np.random.default_rng(7)
    s = spectral.window_to_sample(rng.normal(size=(3, 288)), 24)
    a = spectral.apply_mask(s, 0.75, rng_seed=42)
    b = spectral.apply_mask(s, 0.75, rng_seed=42)
    c = spectral.apply_mask(s, 0.75, rng_seed=43)
    assert np.array_equal(a.time_mask, b.time_mask)
    assert np.array_equal(a.amp_mask, b.amp_mask)
    assert not np.array_equal(a.time_mask, c.time_mask)


def test_masks_independent_across_domains():
    rng = np.random.default_rng(8)
    s = spectral.window_to_sample(rng.normal(size=(30, 96)), 24)
    joint = 0
    total = 0
    for seed in range(200):
        m = spectral.apply_mask(s, 0.5, rng_seed=seed)
        joint += np.sum(m.time_mask & m.amp_mask)
        total += m.time_mask.size
    # P(time AND amp masked) should be ~0.25 if the draws are independent
    assert abs(joint / total - 0.25) < 0.01


def test_mask_ratio_out_of_range():
    s = spectral.window_to_sample(np.zeros((2, 96)), 24)
    with pytest.raises(ConfigError):
        spectral.apply_mask(s, 1.5, rng_seed=0)


# -- amplitude swap -----------------------------------------------------------


def test_derangement_has_no_fixed_points():
    rng = np.random.default_rng(9)
    for n in range(2, 13):
        for _ in range(20):
            perm = spectral.derangement(rng, n)
            assert not np.any(perm == np.arange(n))
            assert sorted(perm) == list(range(n))


def test_amplitude_swap_exchanges_blocks_bit_exactly():
    rng = np.random.default_rng(10)
    s = spectral.window_to_sample(rng.normal(size=(6, 96)) + 50, 24)
    swapped = spectral.amplitude_swap(s, rng_seed=5)
    assert np.array_equal(swapped.time_patches, s.time_patches)
    assert np.array_equal(swapped.phase_patches, s.phase_patches)
    original_rows = {row.tobytes() for row in s.amp_patches}
    swapped_rows = {row.tobytes() for row in swapped.amp_patches}
    assert original_rows == swapped_rows  # same blocks, moved whole
    for i in range(6):
        assert not np.array_equal(swapped.amp_patches[i], s.amp_patches[i])


def test_amplitude_swap_deterministic():
    rng = np.random.default_rng(11)
    s = spectral.window_to_sample(rng.normal(size=(5, 96)), 24)
    a = spectral.amplitude_swap(s, rng_seed=3)
    b = spectral.amplitude_swap(s, rng_seed=3)
    assert np.array_equal(a.amp_patches, b.amp_patches)


def test_amplitude_swap_single_node_warns(caplog):
    s = spectral.window_to_sample(np.random.default_rng(0).normal(size=(1, 96)), 24)
    with caplog.at_level(logging.WARNING, logger="fepcross.spectral"):
        out = spectral.amplitude_swap(s, rng_seed=0)
    assert "no-op" in caplog.text
    assert np.array_equal(out.amp_patches, s.amp_patches)
