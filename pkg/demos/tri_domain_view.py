"""Decompose a traffic window into time/amplitude/phase and mask it.

Walks the exact preprocessing every training window goes through: DFT
split, patching, random patch masking, and the amplitude-swap used to
build contrastive views.
"""

import numpy as np

from fepcross.spectral import (amplitude_swap, apply_mask, from_tri_domain,
                               sample_to_series, to_tri_domain,
                               window_to_sample)

T = 288          # one day at 5-minute steps
PATCHES = 24
MASK_RATIO = 0.75
AMP_SCALE = 2.0 / T


def make_windows(n):
    t = np.arange(T)
    rng = np.random.default_rng(1)
    base = np.cos(2 * np.pi * t / T)[None, :] * rng.uniform(0.5, 1.5, (n, 1))
    return base + 0.3 * np.cos(4 * np.pi * t / T + rng.uniform(0, 2, (n, 1)))


def main():
    windows = make_windows(4).astype(np.float32)

    amp, phase = to_tri_domain(windows)
    live = amp > 1e-3 * amp.max()
    print(f"retained bins: {amp.shape[-1]}, live per node: {live.sum(axis=1)}")

    back = from_tri_domain(amp, phase, T)
    print(f"round-trip max error: {np.abs(back - windows).max():.2e}")

    sample = window_to_sample(windows, PATCHES, AMP_SCALE)
    print(f"patch shapes: time {sample.time_patches.shape} "
          f"amp {sample.amp_patches.shape} phase {sample.phase_patches.shape}")

    rng = np.random.default_rng(7)
    masked = apply_mask(sample, MASK_RATIO, rng)
    print(f"masked patches per node (time domain): "
          f"{masked.time_mask.sum(axis=1).astype(int)} of {PATCHES}")

    swapped = amplitude_swap(masked, rng)
    moved = ~np.all(swapped.amp_patches == masked.amp_patches, axis=(1, 2))
    kept = np.array_equal(swapped.time_patches, masked.time_patches)
    print(f"amplitude swap moved all rows: {moved.all()}, "
          f"time patches untouched: {kept}")

    series = sample_to_series(sample)
    print(f"patches -> series round trip max error: "
          f"{np.abs(series - windows).max():.2e}")


if __name__ == "__main__":
    main()
