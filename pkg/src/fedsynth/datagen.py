"""Synthetic desk-scale image corpus: 10 shape classes on noisy backgrounds.

Class identity lives in the spatial layout (shape geometry), not in texture
frequencies, so it survives amplitude-spectrum perturbation the way natural
image semantics do: the phase spectrum keeps the shape, the amplitude carries
appearance. Each sample randomizes shape position, size, colors, and noise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .partitioner import LabeledImage, save_corpus_archive
from .seeding import derive_seed

SHAPE_CLASSES = (
    "disk",
    "ring",
    "square",
    "diamond",
    "cross",
    "xcross",
    "triangle",
    "tee",
    "hbar",
    "vbar",
)


def _shape_mask(name: str, side: int, rng: np.random.Generator) -> np.ndarray:
    """Binary (side, side) mask for one shape instance with jittered geometry."""
    radius = min(rng.uniform(0.22, 0.38) * side, side / 2 - 2)
    margin = radius + 1
    cy = rng.uniform(margin, side - margin)
    cx = rng.uniform(margin, side - margin)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    arm = max(1.5, 0.22 * radius)

    if name == "disk":
        return dy**2 + dx**2 <= radius**2
    if name == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= radius**2) & (r2 >= (0.55 * radius) ** 2)
    if name == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if name == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius
    if name == "cross":
        inside = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
        return inside & ((np.abs(dy) <= arm) | (np.abs(dx) <= arm))
    if name == "xcross":
        inside = (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
        return inside & ((np.abs(dy - dx) <= 1.4 * arm) | (np.abs(dy + dx) <= 1.4 * arm))
    if name == "triangle":
        # Downward-pointing isoceles triangle.
        return (dy >= -radius) & (np.abs(dx) <= (radius - dy) * 0.5) & (dy <= radius)
    if name == "tee":
        top = (np.abs(dy + radius * 0.7) <= arm) & (np.abs(dx) <= radius)
        stem = (np.abs(dx) <= arm) & (dy >= -radius * 0.7) & (dy <= radius)
        return top | stem
    if name == "hbar":
        return (np.abs(dy) <= arm) & (np.abs(dx) <= radius)
    if name == "vbar":
        return (np.abs(dx) <= arm) & (np.abs(dy) <= radius)
    raise ValueError(f"unknown shape class {name!r}")


def _render(name: str, side: int, rng: np.random.Generator) -> np.ndarray:
    mask = _shape_mask(name, side, rng)
    bg = rng.uniform(0.05, 0.40, size=3)
    fg = rng.uniform(0.60, 0.95, size=3)
    if rng.random() < 0.5:
        bg, fg = fg, bg
    # Gentle background gradient keeps the amplitude spectrum non-degenerate.
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    slope = rng.uniform(-0.12, 0.12, size=2)
    ramp = slope[0] * yy + slope[1] * xx
    img = np.empty((3, side, side), dtype=np.float64)
    for c in range(3):
        img[c] = bg[c] + ramp
        img[c][mask] = fg[c] + ramp[mask] * 0.5
    img += rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_corpus(
    per_class: int,
    side: int = 32,
    seed: int = 0,
    classes: tuple[str, ...] = SHAPE_CLASSES,
) -> list[LabeledImage]:
    """Generate a labeled corpus of `per_class` samples per shape class."""
    corpus = []
    for label, name in enumerate(classes):
        for j in range(per_class):
            rng = np.random.default_rng(derive_seed(seed, "corpus", name, j))
            corpus.append(LabeledImage(pixels=_render(name, side, rng), label=label))
    return corpus


def write_corpus_archive(path: str | Path, per_class: int, side: int = 32, seed: int = 0) -> int:
    return save_corpus_archive(make_corpus(per_class, side, seed), path)


def write_corpus_tree(root: str | Path, per_class: int, side: int = 32, seed: int = 0) -> int:
    """Write the corpus as a class-per-directory PNG tree; returns image count."""
    from PIL import Image

    root = Path(root)
    corpus = make_corpus(per_class, side, seed)
    for idx, img in enumerate(corpus):
        class_dir = root / SHAPE_CLASSES[img.label]
        class_dir.mkdir(parents=True, exist_ok=True)
        u8 = np.round(img.pixels.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(u8, mode="RGB").save(class_dir / f"{idx:05d}.png")
    return len(corpus)
