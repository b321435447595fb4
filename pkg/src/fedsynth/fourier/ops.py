"""Amplitude/phase spectra and amplitude-mixing perturbation.

Convention: the forward transform uses the e^{-j*2*pi*kn/N} kernel and the
spectrum is stored as F = A * exp(-j*P), i.e. P is the negated argument of F,
wrapped to (-pi, pi]. Mixing replaces only A and keeps P, so the perturbed
image keeps the original spatial structure (phase) while its low-level
appearance (amplitude) drifts toward the reference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from ..seeding import derive_seed
from . import _kernel

if TYPE_CHECKING:  # pragma: no cover
    from ..coreset import CoreSet

REF_SOURCES = ("other_image", "uniform_noise")


@dataclass
class Spectrum:
    """Per-channel amplitude (>= 0) and phase in (-pi, pi]."""

    amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self) -> None:
        if self.amplitude.shape != self.phase.shape:
            raise ValueError(
                f"amplitude/phase shape mismatch: {self.amplitude.shape} vs {self.phase.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.amplitude.shape)


@dataclass(frozen=True)
class PerturbConfig:
    lam: float  # mixing coefficient in [0, 1]
    ref_source: str = "other_image"
    seed: int = 0
    same_class_ref: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.ref_source not in REF_SOURCES:
            raise ValueError(f"ref_source must be one of {REF_SOURCES}, got {self.ref_source!r}")


def _channels(image: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(image)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim == 3:
        return arr, False
    raise ValueError(f"expected (H, W) or (C, H, W) image, got shape {arr.shape}")


def fft2(image: np.ndarray) -> Spectrum:
    """Per-channel 2-D DFT split into amplitude and phase.

    Sides must be powers of two (radix-2 kernel).
    """
    chans, squeeze = _channels(image)
    if not np.isfinite(chans).all():
        raise ValueError("image has non-finite values")
    amp = np.empty(chans.shape, dtype=np.float64)
    phase = np.empty(chans.shape, dtype=np.float64)
    for c in range(chans.shape[0]):
        freq = _kernel.fft2d(chans[c].astype(np.float64), inverse=False)
        amp[c] = np.abs(freq)
        # angle(conj(F)) is the negated argument; fold the atan2(-0., x) edge
        # case back so the range is (-pi, pi].
        chan_phase = np.angle(np.conj(freq))
        chan_phase[chan_phase == -np.pi] = np.pi
        phase[c] = chan_phase
    if squeeze:
        return Spectrum(amplitude=amp[0], phase=phase[0])
    return Spectrum(amplitude=amp, phase=phase)


def perturb_amplitude(spec: Spectrum, ref_amp: np.ndarray, lam: float) -> Spectrum:
    """Mix the amplitude toward `ref_amp`: (1 - lam) * A + lam * A_ref; phase kept."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    ref_amp = np.asarray(ref_amp, dtype=np.float64)
    if ref_amp.shape != spec.amplitude.shape:
        raise ValueError(
            f"reference amplitude shape {ref_amp.shape} != spectrum shape {spec.amplitude.shape}"
        )
    mixed = (1.0 - lam) * spec.amplitude + lam * ref_amp
    return Spectrum(amplitude=mixed, phase=spec.phase.copy())


def _inverse_channels(spec: Spectrum) -> tuple[np.ndarray, float]:
    amp, squeeze = _channels(spec.amplitude)
    phase, _ = _channels(spec.phase)
    out = np.empty(amp.shape, dtype=np.float64)
    residual = 0.0
    for c in range(amp.shape[0]):
        freq = amp[c] * np.exp(-1j * phase[c])
        spatial = _kernel.fft2d(freq, inverse=True)
        out[c] = spatial.real
        residual = max(residual, float(np.abs(spatial.imag).max()))
    if squeeze:
        out = out[0]
    return out, residual


def ifft2_full(spec: Spectrum) -> tuple[np.ndarray, float]:
    """Unclipped inverse transform and the peak imaginary residual magnitude."""
    return _inverse_channels(spec)


def ifft2(spec: Spectrum) -> np.ndarray:
    """Real part of the inverse transform of A * exp(-j*P), clipped to [0, 1]."""
    out, _ = _inverse_channels(spec)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def amplitude_of(image: np.ndarray) -> np.ndarray:
    return fft2(image).amplitude


def _noise_amplitude(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    return amplitude_of(rng.uniform(0.0, 1.0, size=shape))


def fourier_perturb(coreset: "CoreSet", cfg: PerturbConfig) -> list[np.ndarray]:
    """Perturb every core-set patch; output pairs 1:1 with coreset.patches.

    The reference x* for patch i is another core-set patch from a different
    source image (same class only if cfg.same_class_ref), or seeded uniform
    noise. A single-patch core-set silently lacks cross-image references and
    falls back to noise with a warning.
    """
    patches = coreset.patches
    if not patches:
        raise ValueError("core-set is empty")
    out: list[np.ndarray] = []
    for i, patch in enumerate(patches):
        rng = np.random.default_rng(derive_seed(cfg.seed, "perturb", i))
        ref_amp = None
        if cfg.ref_source == "other_image":
            candidates = [
                j for j, other in enumerate(patches)
                if other.source_index != patch.source_index
                and (not cfg.same_class_ref or other.label == patch.label)
            ]
            if candidates:
                pick = candidates[int(rng.integers(len(candidates)))]
                ref_amp = amplitude_of(patches[pick].pixels)
            else:
                warnings.warn(
                    "no cross-image reference available; falling back to noise",
                    RuntimeWarning,
                    stacklevel=2,
                )
        if ref_amp is None:
            ref_amp = _noise_amplitude(patch.pixels.shape, rng)
        spec = fft2(patch.pixels)
        mixed = perturb_amplitude(spec, ref_amp, cfg.lam)
        out.append(ifft2(mixed))
    return out
