"""Informative-patch core-set selection scored by the local model.

Each image contributes K multi-scale random crops; the crop the local model
finds most predictable of the image's label (highest log-probability, i.e.
lowest cross-entropy) survives level 1. Level 2 keeps the top-ipc survivors
per class; classes with fewer survivors than ipc are dropped unless
``keep_underfull`` pads them with everything available.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import floats_from_payload, read_archive, write_archive
from .models import LocalModel, predict_logits
from .partitioner import ClientShard, LabeledImage
from .seeding import derive_seed


@dataclass
class Patch:
    pixels: np.ndarray  # (3, R, R) float32 in [0, 1]
    source_index: int
    label: int
    score: float = math.nan


@dataclass
class CoreSet:
    """Selected patches, grouped by class ascending, score descending within class."""

    patches: list[Patch]
    ipc: int
    covered_classes: set[int] = field(default_factory=set)

    def per_class(self) -> dict[int, list[Patch]]:
        out: dict[int, list[Patch]] = {}
        for p in self.patches:
            out.setdefault(p.label, []).append(p)
        return out


@dataclass(frozen=True)
class SelectionSpec:
    ipc: int
    K: int = 4
    scale_range: tuple[float, float] = (0.08, 1.0)
    seed: int = 0
    aspect_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)

    def __post_init__(self) -> None:
        if self.ipc < 1:
            raise ValueError("ipc must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) array (half-pixel-centered sampling)."""
    c, h, w = image.shape
    if h == out_h and w == out_w:
        return image.astype(np.float32)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def _sample_crop(rng: np.random.Generator, h: int, w: int, spec: SelectionSpec) -> tuple[int, int, int, int]:
    """Sample (top, left, crop_h, crop_w): area in scale_range, aspect in aspect_range.

    Falls back to a center crop after 10 failed aspect draws.
    """
    area = h * w
    log_lo, log_hi = math.log(spec.aspect_range[0]), math.log(spec.aspect_range[1])
    for _ in range(10):
        target = area * rng.uniform(spec.scale_range[0], spec.scale_range[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        crop_w = int(round(math.sqrt(target * aspect)))
        crop_h = int(round(math.sqrt(target / aspect)))
        if 0 < crop_w <= w and 0 < crop_h <= h:
            top = int(rng.integers(0, h - crop_h + 1))
            left = int(rng.integers(0, w - crop_w + 1))
            return top, left, crop_h, crop_w
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def extract_patches(image: LabeledImage, spec: SelectionSpec, source_index: int) -> list[Patch]:
    """K random-resized-crop candidates, deterministic given (seed, source_index)."""
    rng = np.random.default_rng(derive_seed(spec.seed, "patch", source_index))
    _, h, w = image.pixels.shape
    out = []
    for _ in range(spec.K):
        top, left, crop_h, crop_w = _sample_crop(rng, h, w, spec)
        crop = image.pixels[:, top:top + crop_h, left:left + crop_w]
        out.append(
            Patch(
                pixels=bilinear_resize(crop, h, w),
                source_index=source_index,
                label=image.label,
            )
        )
    return out


def score_patch(model: LocalModel, patch: Patch) -> float:
    """Negative cross-entropy of the model on the patch's own label.

    Equals log p(label | patch) under the observer, so ranking by score is
    ranking by the model's probability on the true class; 0 for a perfectly
    confident correct prediction, -log C under a uniform observer.
    """
    return float(score_patches(model, [patch])[0])


def score_patches(model: LocalModel, patches: list[Patch]) -> np.ndarray:
    for p in patches:
        if not 0 <= p.label < model.num_classes:
            raise ValueError(f"label {p.label} outside [0, {model.num_classes})")
    scores = np.empty(len(patches), dtype=np.float64)
    for start in range(0, len(patches), 256):
        chunk = patches[start:start + 256]
        logits = predict_logits(model, np.stack([p.pixels for p in chunk])).astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logprobs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        for j, p in enumerate(chunk):
            scores[start + j] = logprobs[j, p.label]
    return scores


def _two_level_select(
    survivors: list[Patch], ipc: int, keep_underfull: bool
) -> tuple[list[Patch], set[int]]:
    """Level-2 rule: per class keep the top-ipc by (score desc, source asc)."""
    by_class: dict[int, list[Patch]] = {}
    for p in survivors:
        by_class.setdefault(p.label, []).append(p)
    selected: list[Patch] = []
    covered: set[int] = set()
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda p: (-p.score, p.source_index))
        if len(group) >= ipc:
            selected.extend(group[:ipc])
            covered.add(label)
        elif keep_underfull:
            selected.extend(group)
            covered.add(label)
    return selected, covered


def select_coreset(
    shard: ClientShard,
    model: LocalModel,
    spec: SelectionSpec,
    keep_underfull: bool = False,
) -> CoreSet:
    """Two-level selection: best-of-K per image, then top-ipc per class.

    Ties break by (score, source_index) lexicographically: within an image the
    first of K equal candidates wins; across images the lower source index
    wins. Deterministic given (shard, model, spec).
    """
    if not shard.images:
        raise ValueError(f"client {shard.client_id}: empty shard")
    survivors: list[Patch] = []
    all_scores: list[float] = []
    for source_index, image in enumerate(shard.images):
        candidates = extract_patches(image, spec, source_index)
        scores = score_patches(model, candidates)
        all_scores.extend(scores.tolist())
        best = int(np.argmax(scores))  # ties keep the earliest candidate
        winner = candidates[best]
        winner.score = float(scores[best])
        survivors.append(winner)
    if len(all_scores) > 1 and float(np.ptp(all_scores)) < 1e-9:
        warnings.warn(
            "observer scores are constant; the model looks untrained and "
            "selection degenerates to tie-breaking",
            RuntimeWarning,
            stacklevel=2,
        )
    selected, covered = _two_level_select(survivors, spec.ipc, keep_underfull)
    return CoreSet(patches=selected, ipc=spec.ipc, covered_classes=covered)


def select_coreset_random(
    shard: ClientShard,
    spec: SelectionSpec,
    model: LocalModel | None = None,
    keep_underfull: bool = False,
) -> CoreSet:
    """Ablation: random patch per image, random ipc per class (no observer).

    Scores are filled in from the model when one is given (for reporting
    only); selection ignores them.
    """
    if not shard.images:
        raise ValueError(f"client {shard.client_id}: empty shard")
    rng = np.random.default_rng(derive_seed(spec.seed, "random-selection"))
    survivors: list[Patch] = []
    for source_index, image in enumerate(shard.images):
        candidates = extract_patches(image, spec, source_index)
        survivors.append(candidates[int(rng.integers(spec.K))])

    by_class: dict[int, list[Patch]] = {}
    for p in survivors:
        by_class.setdefault(p.label, []).append(p)
    selected: list[Patch] = []
    covered: set[int] = set()
    for label in sorted(by_class):
        group = by_class[label]
        if len(group) >= spec.ipc:
            picks = rng.choice(len(group), size=spec.ipc, replace=False)
            selected.extend(group[int(i)] for i in sorted(picks))
            covered.add(label)
        elif keep_underfull:
            selected.extend(group)
            covered.add(label)
    if model is not None and selected:
        scores = score_patches(model, selected)
        for p, s in zip(selected, scores):
            p.score = float(s)
        selected.sort(key=lambda p: (p.label, -p.score, p.source_index))
    return CoreSet(patches=selected, ipc=spec.ipc, covered_classes=covered)


def save_coreset_archive(
    coreset: CoreSet, path: str | Path, client_id: int, spec: SelectionSpec
) -> int:
    """Write a core-set archive; manifest rows carry label + score per patch."""
    resolution = coreset.patches[0].pixels.shape[1] if coreset.patches else 0
    header = {
        "client_id": client_id,
        "ipc": coreset.ipc,
        "K": spec.K,
        "seed": spec.seed,
        "count": len(coreset.patches),
        "resolution": resolution,
        "covered_classes": ",".join(str(c) for c in sorted(coreset.covered_classes)) or "-",
    }
    items = [f"patch {p.source_index} {p.label} {p.score!r}" for p in coreset.patches]
    arrays = [p.pixels for p in coreset.patches]
    return write_archive(path, "coreset", header, items, arrays)


def load_coreset_archive(path: str | Path) -> tuple[CoreSet, int]:
    """Read a core-set archive; returns (coreset, client_id)."""
    kind, header, items, payload = read_archive(path)
    if kind != "coreset":
        raise ValueError(f"expected a coreset archive, got kind={kind!r}")
    resolution = int(header["resolution"])
    patches = []
    offset = 0
    for item in items:
        _, source_s, label_s, score_s = item.split(" ")
        flat = floats_from_payload(payload, offset, 3 * resolution * resolution)
        offset += 3 * resolution * resolution * 4
        patches.append(
            Patch(
                pixels=flat.reshape(3, resolution, resolution),
                source_index=int(source_s),
                label=int(label_s),
                score=float(score_s),
            )
        )
    covered = set()
    if header["covered_classes"] != "-":
        covered = {int(c) for c in header["covered_classes"].split(",")}
    coreset = CoreSet(patches=patches, ipc=int(header["ipc"]), covered_classes=covered)
    return coreset, int(header["client_id"])
