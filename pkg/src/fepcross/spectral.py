"""Tri-domain decomposition of traffic windows: time, amplitude, phase.

A length-T window is transformed once with an unnormalized forward DFT
(X_k = sum_t x_t exp(-2*pi*i*k*t/T)); the first T/2 bins are retained (the
Nyquist bin and the conjugate mirror are dropped) and the window's three
views (raw series, per-bin magnitude, per-bin phase) are each cut into P
contiguous patches. Masking and the amplitude-swap augmentation operate on
whole patches.

Forward transforms follow the input dtype (float32 windows produce float32
magnitudes, which is where the 32-bit round-trip error budget lives); the
inverse is always evaluated in complex128 so its imaginary residue stays
far below the 1e-6 postcondition.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

PHASE_EPSILON = 1e-9      # absolute floor: bins with |X_k| below this get phase 0
PHASE_REL_EPSILON = 1e-6  # and relative to the series peak, since float32
                          # windows leave rounding residue ~1e-7*peak in empty
                          # bins whose angles are sign noise, not signal


def to_tri_domain(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude and phase of the retained half-spectrum of ``x``.

    ``x`` has shape (..., T) with even T; both outputs have shape (..., T//2).
    Phase lies in (-pi, pi] and is zeroed wherever the magnitude falls below
    max(PHASE_EPSILON, PHASE_REL_EPSILON * series peak), so empty bins carry
    a deterministic 0 instead of the angle of rounding residue.
    """
    x = np.asarray(x)
    T = x.shape[-1]
    if T % 2 != 0:
        raise ConfigError(f"window length {T} must be even")
    half = T // 2
    spectrum = np.fft.fft(x, axis=-1)[..., :half]
    amplitude = np.abs(spectrum)
    phase = np.arctan2(spectrum.imag, spectrum.real)
    cutoff = np.maximum(PHASE_EPSILON,
                        PHASE_REL_EPSILON * amplitude.max(axis=-1, keepdims=True))
    phase = np.where(amplitude < cutoff, 0.0, phase)
    phase = np.where(phase == -np.pi, np.pi, phase)
    return amplitude, phase.astype(amplitude.dtype, copy=False)


def from_tri_domain(amplitude: np.ndarray, phase: np.ndarray, length: int) -> np.ndarray:
    """Rebuild a real window from retained-bin amplitude and phase.

    The dropped Nyquist bin is taken as zero and bins above it as the
    conjugate mirror, so the result is exact only for signals with no
    Nyquist energy. Raises if the inverse transform's imaginary residue
    exceeds 1e-6.
    """
    amplitude = np.asarray(amplitude)
    phase = np.asarray(phase)
    if amplitude.shape != phase.shape:
        raise ShapeError("from_tri_domain", amplitude.shape, phase.shape)
    half = amplitude.shape[-1]
    if length != 2 * half:
        raise ConfigError(f"length {length} does not match {half} retained bins")

    spectrum = np.zeros(amplitude.shape[:-1] + (length,), dtype=np.complex128)
    spectrum[..., :half] = amplitude.astype(np.float64) * np.exp(1j * phase.astype(np.float64))
    spectrum[..., half] = 0.0
    spectrum[..., half + 1:] = np.conj(spectrum[..., 1:half][..., ::-1])
    x = np.fft.ifft(spectrum, axis=-1)
    residue = float(np.abs(x.imag).max()) if x.size else 0.0
    if residue > 1e-6:
        raise ConfigError(f"inverse transform imaginary residue {residue:.3g} exceeds 1e-6")
    return x.real.astype(amplitude.dtype, copy=False)


def patchify(x: np.ndarray, patch_count: int) -> np.ndarray:
    """(..., T) -> (..., P, T//P) by contiguous slices in order."""
    x = np.asarray(x)
    T = x.shape[-1]
    if patch_count < 1 or T % patch_count != 0:
        raise ConfigError(f"axis of length {T} cannot be cut into {patch_count} patches")
    return x.reshape(x.shape[:-1] + (patch_count, T // patch_count))


def unpatchify(patches: np.ndarray) -> np.ndarray:
    """Inverse of patchify: (..., P, L) -> (..., P*L)."""
    patches = np.asarray(patches)
    if patches.ndim < 2:
        raise ShapeError("unpatchify", patches.shape, detail="need (..., P, L)")
    return patches.reshape(patches.shape[:-2] + (patches.shape[-2] * patches.shape[-1],))


@dataclass
class TriDomainSample:
    """Patched tri-domain views of one window for N nodes.

    Masks are boolean (N, P) arrays, True where the patch is hidden from the
    encoder; they are drawn independently per node and per domain.
    """

    time_patches: np.ndarray   # (N, P, L_t)
    amp_patches: np.ndarray    # (N, P, L_f), entries >= 0 up to conditioning scale
    phase_patches: np.ndarray  # (N, P, L_f), values in (-pi, pi]
    time_mask: np.ndarray      # (N, P) bool
    amp_mask: np.ndarray       # (N, P) bool
    phase_mask: np.ndarray     # (N, P) bool

    def __post_init__(self):
        n, p = self.time_patches.shape[:2]
        for name in ("amp_patches", "phase_patches"):
            arr = getattr(self, name)
            if arr.shape[:2] != (n, p):
                raise ShapeError("TriDomainSample", self.time_patches.shape, arr.shape,
                                 detail=f"{name} disagrees on (N, P)")
        if self.amp_patches.shape != self.phase_patches.shape:
            raise ShapeError("TriDomainSample", self.amp_patches.shape, self.phase_patches.shape)
        for name in ("time_mask", "amp_mask", "phase_mask"):
            arr = getattr(self, name)
            if arr.shape != (n, p):
                raise ShapeError("TriDomainSample", (n, p), arr.shape, detail=f"{name} shape")

    @property
    def n_nodes(self) -> int:
        return self.time_patches.shape[0]

    @property
    def patch_count(self) -> int:
        return self.time_patches.shape[1]

    def copy(self) -> "TriDomainSample":
        return TriDomainSample(*(getattr(self, f).copy() for f in (
            "time_patches", "amp_patches", "phase_patches",
            "time_mask", "amp_mask", "phase_mask")))


def window_to_sample(series: np.ndarray, patch_count: int, amp_scale: float = 1.0) -> TriDomainSample:
    """Build an unmasked TriDomainSample from (N, T) node series.

    ``amp_scale`` conditions the magnitude channel for model consumption
    (2/T maps a unit-amplitude harmonic to ~1); the spectral contract itself
    is unscaled, so pass 1.0 for analysis uses.
    """
    series = np.asarray(series)
    if series.ndim != 2:
        raise ShapeError("window_to_sample", series.shape, detail="need (N, T)")
    T = series.shape[1]
    if T % (2 * patch_count) != 0:
        raise ConfigError(f"window length {T} must be divisible by 2*P = {2 * patch_count}")
    amplitude, phase = to_tri_domain(series)
    if amp_scale != 1.0:
        amplitude = amplitude * np.asarray(amp_scale, dtype=amplitude.dtype)
    n = series.shape[0]
    zeros = np.zeros((n, patch_count), dtype=bool)
    return TriDomainSample(
        time_patches=patchify(series, patch_count),
        amp_patches=patchify(amplitude, patch_count),
        phase_patches=patchify(phase, patch_count),
        time_mask=zeros,
        amp_mask=zeros.copy(),
        phase_mask=zeros.copy(),
    )


def sample_to_series(sample: TriDomainSample) -> np.ndarray:
    """Recover the (N, T) time series stored in a sample's time patches."""
    return unpatchify(sample.time_patches)


def masked_patch_count(mask_ratio: float, patch_count: int) -> int:
    return math.ceil(mask_ratio * patch_count)


def apply_mask(sample: TriDomainSample, mask_ratio: float, rng_seed: int) -> TriDomainSample:
    """Draw fresh masks: exactly ceil(ratio*P) patches per node per domain.

    Positions are uniform without replacement and independent across the
    three domains; the data arrays are untouched.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise ConfigError(f"mask_ratio {mask_ratio} outside [0, 1]")
    rng = np.random.default_rng(rng_seed)
    n, p = sample.n_nodes, sample.patch_count
    k = masked_patch_count(mask_ratio, p)
    masks = []
    for _ in range(3):
        m = np.zeros((n, p), dtype=bool)
        for i in range(n):
            m[i, rng.choice(p, size=k, replace=False)] = True
        masks.append(m)
    return replace(sample, time_mask=masks[0], amp_mask=masks[1], phase_mask=masks[2])


def derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform-ish permutation of range(n) with no fixed point, by resampling."""
    if n < 2:
        raise ConfigError("derangement needs n >= 2")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def amplitude_swap(sample: TriDomainSample, rng_seed: int) -> TriDomainSample:
    """Exchange amplitude blocks between nodes by a random derangement.

    Node i receives the amplitude patches of node perm(i); time and phase
    are returned bit-identical. With a single node the swap is the identity
    and a warning is logged.
    """
    out = sample.copy()
    if sample.n_nodes < 2:
        log.warning("amplitude_swap: batch of size 1, augmentation is a no-op")
        return out
    rng = np.random.default_rng(rng_seed)
    perm = derangement(rng, sample.n_nodes)
    out.amp_patches = sample.amp_patches[perm].copy()
    out.amp_mask = sample.amp_mask[perm].copy()
    return out
