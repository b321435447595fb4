"""Metric-oracle tests: PSNR/SSIM against closed forms and the scikit-image
reference implementations, plus noise/mixing baselines and cost accounting."""

import math

import numpy as np
import pytest

from fedsynth.coreset import CoreSet, Patch
from fedsynth.metrics import (
    NoiseConfig,
    comm_cost,
    fedmix_synthesize,
    noise_perturb,
    privacy_report,
    psnr,
    ssim,
)


def test_psnr_identical_hits_cap():
    img = np.random.default_rng(0).uniform(0, 1, (3, 16, 16))
    assert psnr(img, img) == 100.0


def test_psnr_closed_form():
    a = np.zeros((1, 16, 16))
    b = np.full((1, 16, 16), 0.1)  # MSE = 0.01
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_psnr_matches_direct_formula():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.uniform(0, 1, (3, 16, 16))
        b = rng.uniform(0, 1, (3, 16, 16))
        expected = 10.0 * math.log10(1.0 / np.mean((a - b) ** 2))
        assert psnr(a, b) == pytest.approx(expected, abs=1e-6)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        psnr(np.zeros((3, 16, 16)), np.zeros((3, 8, 8)))


def test_ssim_identical():
    img = np.random.default_rng(2).uniform(0, 1, (3, 16, 16))
    assert ssim(img, img) == pytest.approx(100.0)


def test_ssim_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(5):
        a = rng.uniform(0, 1, (16, 16))
        b = rng.uniform(0, 1, (16, 16))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)


def test_ssim_constant_images_closed_form():
    # Zero variances leave only the luminance term:
    # 100 * (2ab + C1) * C2 / ((a^2 + b^2 + C1) * C2)
    a_val, b_val = 0.3, 0.7
    a = np.full((16, 16), a_val)
    b = np.full((16, 16), b_val)
    expected = 100.0 * (2 * a_val * b_val + 0.01**2) / (a_val**2 + b_val**2 + 0.01**2)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-9)


def test_ssim_window_too_large():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_metrics_match_skimage_reference():
    from skimage.metrics import peak_signal_noise_ratio, structural_similarity

    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.uniform(0, 1, (16, 16))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=1.0), abs=1e-6)
        ref = structural_similarity(
            a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
        )
        assert ssim(a, b) == pytest.approx(100.0 * ref, abs=1e-4)


def _toy_coreset(images):
    return CoreSet(
        patches=[
            Patch(pixels=np.asarray(img, dtype=np.float32), source_index=i, label=i % 2, score=0.0)
            for i, img in enumerate(images)
        ],
        ipc=len(images),
    )


def test_privacy_report_identity_and_means():
    rng = np.random.default_rng(5)
    images = [rng.uniform(0, 1, (3, 16, 16)).astype(np.float32) for _ in range(6)]
    cs = _toy_coreset(images)
    rep = privacy_report(cs, images)
    assert rep.mean_psnr == pytest.approx(100.0)
    assert rep.mean_ssim == pytest.approx(100.0)

    noisy = [np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1) for img in images]
    rep2 = privacy_report(cs, noisy, config={"mode": "test"})
    assert rep2.mean_psnr == pytest.approx(np.mean(rep2.psnr_values))
    assert rep2.mean_ssim == pytest.approx(np.mean(rep2.ssim_values))
    assert rep2.config == {"mode": "test"}
    with pytest.raises(ValueError, match="mismatch"):
        privacy_report(cs, noisy[:-1])


def test_noise_perturb_degenerate_cases():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(4, 8)).astype(np.float32)
    out = noise_perturb(z, NoiseConfig(p=1.0, s=0.0, seed=1))
    np.testing.assert_array_equal(out, np.zeros_like(z))

    out = noise_perturb(z, NoiseConfig(p=0.0, s=1e-4, distribution="gaussian", seed=1))
    assert np.abs(out - z).max() <= 3e-3  # |e| stays within ~6 sigma on this draw
    assert out.dtype == z.dtype


@pytest.mark.parametrize("dist,unit_var", [("gaussian", 1.0), ("laplace", 2.0)])
def test_noise_perturb_variance_monte_carlo(dist, unit_var):
    rng = np.random.default_rng(7)
    z = rng.normal(0, 2.0, size=100_000)
    p, s = 0.3, 0.5
    out = noise_perturb(z, NoiseConfig(p=p, s=s, distribution=dist, seed=9))
    expected = (1 - p) ** 2 * np.var(z) + s**2 * unit_var
    assert np.var(out) == pytest.approx(expected, rel=0.1)


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(p=1.5, s=0.1)
    with pytest.raises(ValueError):
        NoiseConfig(p=0.5, s=-1)
    with pytest.raises(ValueError):
        NoiseConfig(p=0.5, s=0.1, distribution="uniform")


def test_fedmix_identical_pair():
    img = np.random.default_rng(8).uniform(0, 1, (3, 16, 16)).astype(np.float32)
    cs = _toy_coreset([img, img.copy()])
    result = fedmix_synthesize(cs, num_classes=4, seed=0)
    assert len(result.images) == 1
    np.testing.assert_allclose(result.images[0], img, atol=1e-7)


def test_fedmix_counts_and_convexity():
    rng = np.random.default_rng(9)
    images = [rng.uniform(0, 1, (3, 16, 16)) for _ in range(10)]
    cs = _toy_coreset(images)
    result = fedmix_synthesize(cs, num_classes=4, seed=3)
    assert len(result.images) == 5
    used = [i for pair in result.pairs for i in pair]
    assert len(set(used)) == 10  # disjoint pairing
    for img, label in zip(result.images, result.soft_labels):
        assert img.min() >= 0.0 and img.max() <= 1.0
        label.validate()
    with pytest.raises(ValueError, match="at least 2"):
        fedmix_synthesize(_toy_coreset(images[:1]), num_classes=4)


def test_comm_cost_arithmetic():
    # 500 latents of 256 elements + 500 soft labels over 10 classes, float32
    payload = 500 * (256 + 10) * 4
    assert payload == 532_000
    report = comm_cost(payload, 11_000_000 * 4)
    assert report.ratio == pytest.approx(0.0121, abs=1e-3)

    empty = comm_cost(0, 1000)
    assert empty.payload_bytes == 0 and empty.ratio == 0.0
