"""Privacy leakage metrics (PSNR/SSIM), noise and mixing baselines, and
communication-cost accounting.

Lower PSNR/SSIM between what an honest-but-curious server can reconstruct and
the client's core-set originals means stronger privacy. SSIM follows the
standard single-scale formulation: 11x11 Gaussian window (sigma 1.5),
stabilizers C1=0.01^2 and C2=0.03^2 on unit dynamic range, channel-averaged,
reported on a x100 scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .models import SoftLabel
from .seeding import derive_seed

if TYPE_CHECKING:  # pragma: no cover
    from .coreset import CoreSet

PSNR_CAP_DB = 100.0
_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _pairs(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for unit-range images, capped at 100 dB."""
    a, b = _pairs(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _gaussian_window() -> np.ndarray:
    radius = (_SSIM_WIN - 1) // 2
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (coords / _SSIM_SIGMA) ** 2)
    kern /= kern.sum()
    return np.outer(kern, kern)


_WINDOW = _gaussian_window()


def _local_mean(plane: np.ndarray) -> np.ndarray:
    view = sliding_window_view(plane, (_SSIM_WIN, _SSIM_WIN))
    return np.einsum("ijkl,kl->ij", view, _WINDOW)


def _ssim_plane(x: np.ndarray, y: np.ndarray) -> float:
    ux = _local_mean(x)
    uy = _local_mean(y)
    uxx = _local_mean(x * x)
    uyy = _local_mean(y * y)
    uxy = _local_mean(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    cxy = uxy - ux * uy
    num = (2.0 * ux * uy + _C1) * (2.0 * cxy + _C2)
    den = (ux * ux + uy * uy + _C1) * (vx + vy + _C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Channel-averaged single-scale SSIM on a x100 scale."""
    a, b = _pairs(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W) images, got shape {a.shape}")
    if a.shape[-2] < _SSIM_WIN or a.shape[-1] < _SSIM_WIN:
        raise ValueError(f"images smaller than the {_SSIM_WIN}x{_SSIM_WIN} window")
    return 100.0 * float(np.mean([_ssim_plane(a[c], b[c]) for c in range(a.shape[0])]))


@dataclass
class PrivacyReport:
    mean_psnr: float
    mean_ssim: float
    psnr_values: list[float] = field(repr=False, default_factory=list)
    ssim_values: list[float] = field(repr=False, default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "psnr_values": self.psnr_values,
            "ssim_values": self.ssim_values,
            "config": self.config,
        }


def privacy_report(coreset: "CoreSet", decoded: list[np.ndarray], config: dict | None = None) -> PrivacyReport:
    """Mean and per-pair PSNR/SSIM between originals and reconstructions.

    ``decoded`` must pair 1:1 with coreset.patches (the server-side decode of
    what was transmitted, standing in for the reconstruction attack).
    """
    if len(decoded) != len(coreset.patches):
        raise ValueError(f"pairing mismatch: {len(decoded)} decoded vs {len(coreset.patches)} patches")
    if not decoded:
        raise ValueError("nothing to compare")
    psnr_values = [psnr(p.pixels, d) for p, d in zip(coreset.patches, decoded)]
    ssim_values = [ssim(p.pixels, d) for p, d in zip(coreset.patches, decoded)]
    return PrivacyReport(
        mean_psnr=float(np.mean(psnr_values)),
        mean_ssim=float(np.mean(ssim_values)),
        psnr_values=psnr_values,
        ssim_values=ssim_values,
        config=dict(config or {}),
    )


@dataclass(frozen=True)
class NoiseConfig:
    p: float  # perturbation coefficient in [0, 1]
    s: float  # noise scale > 0 (0 allowed as the degenerate no-noise case)
    distribution: str = "gaussian"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0, 1], got {self.p}")
        if self.s < 0.0:
            raise ValueError(f"s must be >= 0, got {self.s}")
        if self.distribution not in ("laplace", "gaussian"):
            raise ValueError(f"distribution must be laplace or gaussian, got {self.distribution!r}")


def noise_perturb(latents: np.ndarray, cfg: NoiseConfig) -> np.ndarray:
    """Elementwise z <- (1-p)*z + e*s with unit-scale i.i.d. noise e."""
    arr = np.asarray(latents)
    rng = np.random.default_rng(derive_seed(cfg.seed, "noise", cfg.distribution))
    if cfg.distribution == "gaussian":
        e = rng.normal(0.0, 1.0, size=arr.shape)
    else:
        e = rng.laplace(0.0, 1.0, size=arr.shape)
    return ((1.0 - cfg.p) * arr.astype(np.float64) + e * cfg.s).astype(arr.dtype)


@dataclass
class FedMixResult:
    images: list[np.ndarray]
    soft_labels: list[SoftLabel]
    pairs: list[tuple[int, int]]  # core-set indices averaged into each image


def fedmix_synthesize(coreset: "CoreSet", num_classes: int, seed: int = 0) -> FedMixResult:
    """Average seeded random disjoint pairs of core-set patches.

    Each synthetic image is the elementwise mean of two real patches; its
    label is the mean of the two one-hot labels. An odd leftover patch is
    dropped.
    """
    n = len(coreset.patches)
    if n < 2:
        raise ValueError("fedmix needs at least 2 patches")
    rng = np.random.default_rng(derive_seed(seed, "fedmix"))
    order = rng.permutation(n)
    images = []
    labels = []
    pairs = []
    for k in range(n // 2):
        i, j = int(order[2 * k]), int(order[2 * k + 1])
        a, b = coreset.patches[i], coreset.patches[j]
        images.append(((a.pixels.astype(np.float64) + b.pixels.astype(np.float64)) / 2.0).astype(np.float32))
        onehot = np.zeros(num_classes, dtype=np.float64)
        onehot[a.label] += 0.5
        onehot[b.label] += 0.5
        labels.append(SoftLabel(probs=onehot))
        pairs.append((i, j))
    return FedMixResult(images=images, soft_labels=labels, pairs=pairs)


@dataclass
class CostReport:
    payload_bytes: int
    model_checkpoint_bytes: int
    ratio: float
    per_client_payload_bytes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "payload_bytes": self.payload_bytes,
            "model_checkpoint_bytes": self.model_checkpoint_bytes,
            "ratio": self.ratio,
            "per_client_payload_bytes": self.per_client_payload_bytes,
        }


def comm_cost(
    payload_bytes: int,
    model_checkpoint_bytes: int,
    per_client_payload_bytes: list[int] | None = None,
) -> CostReport:
    """Distillate payload vs model-upload bytes and their ratio.

    Distributing the autoencoder is excluded: it is predefined server-side
    and reusable across tasks, so it is not part of per-round cost.
    """
    ratio = payload_bytes / model_checkpoint_bytes if model_checkpoint_bytes else math.inf
    return CostReport(
        payload_bytes=int(payload_bytes),
        model_checkpoint_bytes=int(model_checkpoint_bytes),
        ratio=float(ratio),
        per_client_payload_bytes=list(per_client_payload_bytes or []),
    )
