"""Corpus loading and heterogeneous (Dirichlet) client partitioning.

A corpus is a list of labeled images, loaded either from a class-per-directory
tree of raster images or from a binary corpus archive (see
:func:`save_corpus_archive`). Partitioning draws, for every class, a
proportion vector over clients from Dir(alpha) and assigns that class's
samples to clients by cumulative shares, so small alpha concentrates each
class on few clients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import floats_from_payload, read_archive, write_archive

RASTER_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tiff", ".webp", ".ppm"}


class CorpusError(RuntimeError):
    """Raised when a corpus path is missing, unreadable, or degenerate."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class LabeledImage:
    """A 3-channel float image in [0,1] with its class index.

    Sides must be powers of two >= 16 (keeps the radix FFT and autoencoder
    strides simple).
    """

    pixels: np.ndarray  # (3, H, W) float32
    label: int

    def validate(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"expected (3, H, W) pixels, got {self.pixels.shape}")
        _, h, w = self.pixels.shape
        if not (_is_pow2(h) and _is_pow2(w) and h >= 16 and w >= 16):
            raise ValueError(f"sides must be powers of two >= 16, got {h}x{w}")
        if not np.isfinite(self.pixels).all():
            raise ValueError("non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")
        if self.label < 0:
            raise ValueError(f"negative label {self.label}")

    @property
    def resolution(self) -> int:
        return int(self.pixels.shape[1])


@dataclass
class ClientShard:
    """One client's private slice of the corpus."""

    client_id: int
    images: list[LabeledImage]
    class_histogram: np.ndarray  # (C,) int64

    def validate(self) -> None:
        counts = np.zeros_like(self.class_histogram)
        for img in self.images:
            counts[img.label] += 1
        if not np.array_equal(counts, self.class_histogram):
            raise ValueError(f"class_histogram inconsistent for client {self.client_id}")

    @property
    def num_classes(self) -> int:
        return int(len(self.class_histogram))


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    alpha: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be >= 1, got {self.n_clients}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")


@dataclass
class HeterogeneityReport:
    """Summary of how unevenly classes are spread over clients."""

    n_clients: int
    n_classes: int
    client_sizes: list[int]
    class_shares: np.ndarray = field(repr=False)  # (C, n) rows sum to 1
    max_class_share: np.ndarray = field(repr=False)  # (C,) max over clients
    mean_max_class_share: float = 0.0

    def to_dict(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "n_classes": self.n_classes,
            "client_sizes": self.client_sizes,
            "class_shares": self.class_shares.tolist(),
            "max_class_share": self.max_class_share.tolist(),
            "mean_max_class_share": self.mean_max_class_share,
        }


def _resize_channels(pixels: np.ndarray, side: int) -> np.ndarray:
    """Bilinear-resize a (3, H, W) float image to (3, side, side)."""
    from PIL import Image

    if pixels.shape[1] == side and pixels.shape[2] == side:
        return pixels.astype(np.float32)
    out = np.empty((3, side, side), dtype=np.float32)
    for c in range(3):
        chan = Image.fromarray(pixels[c].astype(np.float32), mode="F")
        out[c] = np.asarray(chan.resize((side, side), Image.BILINEAR), dtype=np.float32)
    return np.clip(out, 0.0, 1.0)


def _load_raster(path: Path, resize: int) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (resize, resize):
                img = img.resize((resize, resize), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except Exception as exc:
        raise CorpusError(f"unreadable image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_corpus(path: str | Path, resize: int) -> list[LabeledImage]:
    """Load a corpus from a class-directory tree or a binary corpus archive.

    Class indices follow sorted class-directory names so they are comparable
    across runs. All images come out as (3, resize, resize) float32 in [0,1].
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus path does not exist: {path}")
    if not (_is_pow2(resize) and resize >= 16):
        raise CorpusError(f"resize must be a power of two >= 16, got {resize}")
    if path.is_file():
        return load_corpus_archive(path, resize)

    class_dirs = sorted(d for d in path.iterdir() if d.is_dir())
    if len(class_dirs) < 2:
        raise CorpusError(f"fewer than 2 classes under {path}")
    corpus: list[LabeledImage] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(
            f for f in class_dir.iterdir()
            if f.is_file() and f.suffix.lower() in RASTER_SUFFIXES
        )
        for f in files:
            img = LabeledImage(pixels=_load_raster(f, resize), label=label)
            img.validate()
            corpus.append(img)
    if not corpus:
        raise CorpusError(f"no images found under {path}")
    return corpus


def save_corpus_archive(images: list[LabeledImage], path: str | Path) -> int:
    """Write the binary corpus archive; returns payload bytes.

    Manifest rows are ``<byte offset into payload> <H> <W> <label>``; pixel
    blobs are channel-major (C, H, W) float32 little-endian.
    """
    items = []
    offset = 0
    arrays = []
    for img in images:
        _, h, w = img.pixels.shape
        items.append(f"{offset} {h} {w} {img.label}")
        arrays.append(img.pixels)
        offset += 3 * h * w * 4
    header = {"count": len(images), "channels": 3}
    return write_archive(path, "corpus", header, items, arrays)


def load_corpus_archive(path: str | Path, resize: int) -> list[LabeledImage]:
    kind, header, items, payload = read_archive(path)
    if kind != "corpus":
        raise CorpusError(f"expected a corpus archive, got kind={kind!r}")
    corpus: list[LabeledImage] = []
    for row in items:
        offset_s, h_s, w_s, label_s = row.split()
        offset, h, w, label = int(offset_s), int(h_s), int(w_s), int(label_s)
        flat = floats_from_payload(payload, offset, 3 * h * w)
        pixels = flat.reshape(3, h, w)
        if h != resize or w != resize:
            pixels = _resize_channels(pixels, resize)
        img = LabeledImage(pixels=pixels, label=label)
        img.validate()
        corpus.append(img)
    if len({img.label for img in corpus}) < 2:
        raise CorpusError(f"fewer than 2 classes in archive {path}")
    return corpus


def num_classes_of(corpus: list[LabeledImage]) -> int:
    return int(max(img.label for img in corpus)) + 1


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Round proportions*total to integers that sum exactly to total."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # Hand the leftovers to the largest fractional remainders; ties go to
        # the lower client index so the result is order-deterministic.
        remainders = raw - counts
        order = np.lexsort((np.arange(len(counts)), -remainders))
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(corpus: list[LabeledImage], spec: PartitionSpec) -> list[ClientShard]:
    """Split the corpus into disjoint client shards via per-class Dir(alpha).

    For each class k a proportion vector over clients is drawn from
    Dir(alpha); the class's samples are shuffled (seeded) and handed out in
    contiguous slices sized by largest-remainder rounding, so every sample
    lands in exactly one shard. Identical (corpus, spec) yields identical
    shards; clients may legitimately receive zero samples of a class.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    n_classes = num_classes_of(corpus)
    rng = np.random.default_rng(spec.seed)

    by_class: list[list[int]] = [[] for _ in range(n_classes)]
    for idx, img in enumerate(corpus):
        by_class[img.label].append(idx)

    assignment: list[list[int]] = [[] for _ in range(spec.n_clients)]
    for k in range(n_classes):
        indices = np.array(by_class[k], dtype=np.int64)
        if indices.size == 0:
            rng.dirichlet([spec.alpha] * spec.n_clients)  # keep stream position stable
            continue
        proportions = rng.dirichlet([spec.alpha] * spec.n_clients)
        rng.shuffle(indices)
        counts = _largest_remainder(proportions, len(indices))
        start = 0
        for client, count in enumerate(counts):
            assignment[client].extend(indices[start:start + count].tolist())
            start += count

    shards = []
    for client_id, sample_indices in enumerate(assignment):
        images = [corpus[i] for i in sorted(sample_indices)]
        histogram = np.zeros(n_classes, dtype=np.int64)
        for img in images:
            histogram[img.label] += 1
        shards.append(ClientShard(client_id=client_id, images=images, class_histogram=histogram))
    return shards


def partition_stats(shards: list[ClientShard]) -> HeterogeneityReport:
    """Per-client sizes and per-class client shares for one partition."""
    if not shards:
        raise ValueError("empty shard list")
    n_classes = shards[0].num_classes
    counts = np.stack([s.class_histogram for s in shards], axis=1).astype(np.float64)  # (C, n)
    totals = counts.sum(axis=1, keepdims=True)
    shares = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    present = totals[:, 0] > 0
    max_share = shares.max(axis=1)
    mean_max = float(max_share[present].mean()) if present.any() else 0.0
    return HeterogeneityReport(
        n_clients=len(shards),
        n_classes=n_classes,
        client_sizes=[len(s.images) for s in shards],
        class_shares=shares,
        max_class_share=max_share,
        mean_max_class_share=mean_max,
    )
