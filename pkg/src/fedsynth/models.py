"""Client classifiers: a feature extractor h plus a linear head f.

Two desk-scale architectures are provided: ``small_conv`` (three
conv-norm-relu-pool blocks ending in global pooling, feature width 128 at
32x32 input) and ``resnet_small`` (an 8-layer residual net). GroupNorm is
used throughout so models carry no running statistics, which keeps one-shot
parameter averaging and checkpointing simple.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .container import floats_from_payload, read_archive, write_archive
from .partitioner import ClientShard, LabeledImage
from .seeding import derive_seed

ARCHS = ("small_conv", "resnet_small")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "learning_rate", "momentum", "weight_decay"):
            if getattr(self, name) < 0 or (name in ("batch_size", "learning_rate") and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")


@dataclass
class SoftLabel:
    """A class-probability vector (post-softmax)."""

    probs: np.ndarray

    def validate(self) -> None:
        if self.probs.ndim != 1:
            raise ValueError("soft label must be a vector")
        if (self.probs < 0).any() or abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ValueError("soft label entries must be >= 0 and sum to 1")


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
        nn.AvgPool2d(2),
    )


class SmallConvFeatures(nn.Module):
    out_dim = 128

    def __init__(self) -> None:
        super().__init__()
        self.blocks = nn.Sequential(
            _conv_block(3, 32),
            _conv_block(32, 96),
            _conv_block(96, 128),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.blocks(x)), 1)


class _ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, cout)
        self.skip = (
            nn.Conv2d(cin, cout, 1, stride=stride)
            if (stride != 1 or cin != cout)
            else nn.Identity()
        )
        self.act = nn.ReLU(inplace=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(y + self.skip(x))


class SmallResNetFeatures(nn.Module):
    out_dim = 128

    def __init__(self) -> None:
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, 32, 3, padding=1), nn.GroupNorm(8, 32), nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(
            _ResidualBlock(32, 64, stride=2),
            _ResidualBlock(64, 128, stride=2),
            _ResidualBlock(128, 128, stride=2),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.blocks(self.stem(x))), 1)


_FEATURES = {"small_conv": SmallConvFeatures, "resnet_small": SmallResNetFeatures}


class LocalModel(nn.Module):
    """Classifier split into feature extractor and head; feature tap is the
    output of the final pooling layer, right before the head."""

    def __init__(self, arch_id: str, num_classes: int, resolution: int) -> None:
        super().__init__()
        if arch_id not in _FEATURES:
            raise ValueError(f"unknown arch {arch_id!r}; choose from {ARCHS}")
        self.arch_id = arch_id
        self.num_classes = num_classes
        self.resolution = resolution
        self.feature_extractor = _FEATURES[arch_id]()
        self.d = self.feature_extractor.out_dim
        self.head = nn.Linear(self.d, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.feature_extractor(x))


def build_model(arch_id: str, num_classes: int, resolution: int, seed: int = 0) -> LocalModel:
    """Construct a model with seeded initialization."""
    torch.manual_seed(derive_seed(seed, "init", arch_id))
    return LocalModel(arch_id, num_classes, resolution)


def as_batch_array(batch) -> np.ndarray:
    """Normalize a batch (list of LabeledImage/arrays, or an array) to (N, 3, H, W) float32."""
    if isinstance(batch, np.ndarray):
        arr = batch
        if arr.ndim == 3:
            arr = arr[None]
        return np.ascontiguousarray(arr, dtype=np.float32)
    pixels = []
    for item in batch:
        pixels.append(item.pixels if isinstance(item, LabeledImage) else np.asarray(item))
    if not pixels:
        return np.zeros((0, 3, 0, 0), dtype=np.float32)
    return np.ascontiguousarray(np.stack(pixels), dtype=np.float32)


def _check_resolution(model: LocalModel, arr: np.ndarray) -> None:
    if arr.shape[0] and (arr.shape[-2] != model.resolution or arr.shape[-1] != model.resolution):
        raise ValueError(
            f"batch resolution {arr.shape[-2]}x{arr.shape[-1]} != model resolution {model.resolution}"
        )


@dataclass
class LocalTrainResult:
    model: LocalModel
    train_accuracy: float
    single_class: bool
    epoch_losses: list[float] = field(default_factory=list)


def train_local(
    shard: ClientShard,
    arch_id: str,
    cfg: TrainConfig,
    num_classes: int | None = None,
) -> LocalTrainResult:
    """Train a local classifier on one shard with SGD (momentum + weight decay).

    Deterministic given (shard, cfg) up to backend nondeterminism; a
    single-class shard is legal (the non-IID case) and flagged in the result.
    """
    if not shard.images:
        raise ValueError(f"client {shard.client_id}: empty shard")
    if num_classes is None:
        num_classes = shard.num_classes
    resolution = shard.images[0].resolution
    model = build_model(arch_id, num_classes, resolution, seed=cfg.seed)
    single_class = int((shard.class_histogram > 0).sum()) == 1

    x_all = torch.from_numpy(as_batch_array(shard.images))
    y_all = torch.tensor([img.label for img in shard.images], dtype=torch.long)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    loss_fn = nn.CrossEntropyLoss()
    n = len(shard.images)
    epoch_losses: list[float] = []
    model.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, "order", epoch)).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            optimizer.zero_grad()
            loss = loss_fn(model(x_all[idx]), y_all[idx])
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
        epoch_losses.append(total / n)
    model.eval()
    train_accuracy = evaluate(model, shard.images)
    return LocalTrainResult(
        model=model,
        train_accuracy=train_accuracy,
        single_class=single_class,
        epoch_losses=epoch_losses,
    )


@torch.no_grad()
def extract_features(model: LocalModel, batch) -> np.ndarray:
    """Row j is h(image_j); returns an (N, d) float32 matrix without grad state."""
    arr = as_batch_array(batch)
    if arr.shape[0] == 0:
        return np.zeros((0, model.d), dtype=np.float32)
    _check_resolution(model, arr)
    model.eval()
    feats = model.feature_extractor(torch.from_numpy(arr).to(next(model.parameters()).dtype))
    return feats.cpu().numpy().astype(np.float32)


@torch.no_grad()
def predict_logits(model: LocalModel, batch) -> np.ndarray:
    arr = as_batch_array(batch)
    if arr.shape[0] == 0:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    _check_resolution(model, arr)
    model.eval()
    logits = model(torch.from_numpy(arr).to(next(model.parameters()).dtype))
    return logits.cpu().numpy().astype(np.float32)


def predict_soft(model: LocalModel, batch) -> list[SoftLabel]:
    """Softmax of f(h(x)) at temperature 1 for each image in the batch."""
    logits = torch.from_numpy(predict_logits(model, batch))
    probs = torch.softmax(logits.double(), dim=1).numpy()
    out = []
    for row in probs:
        label = SoftLabel(probs=row.astype(np.float64))
        label.validate()
        out.append(label)
    return out


def evaluate(model: LocalModel, dataset: list[LabeledImage]) -> float:
    """Top-1 accuracy over a labeled dataset."""
    if not dataset:
        raise ValueError("empty evaluation dataset")
    hits = 0
    for start in range(0, len(dataset), 256):
        chunk = dataset[start:start + 256]
        logits = predict_logits(model, chunk)
        pred = logits.argmax(axis=1)
        hits += int(sum(int(p) == img.label for p, img in zip(pred, chunk)))
    return hits / len(dataset)


def save_checkpoint(model: LocalModel, path: str | Path, seed: int = 0) -> int:
    """Write a model checkpoint; returns the parameter payload size in bytes."""
    header = {
        "arch_id": model.arch_id,
        "d": model.d,
        "num_classes": model.num_classes,
        "resolution": model.resolution,
        "seed": seed,
    }
    items = []
    arrays = []
    for name, param in model.state_dict().items():
        arr = param.detach().cpu().numpy()
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        items.append(f"param {name} {shape}")
        arrays.append(arr)
    return write_archive(path, "model", header, items, arrays)


def load_checkpoint(path: str | Path) -> LocalModel:
    kind, header, items, payload = read_archive(path)
    if kind != "model":
        raise ValueError(f"expected a model checkpoint, got kind={kind!r}")
    model = LocalModel(header["arch_id"], int(header["num_classes"]), int(header["resolution"]))
    state = {}
    offset = 0
    for item in items:
        _, name, shape_s = item.split(" ")
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        count = int(np.prod(shape)) if shape else 1
        flat = floats_from_payload(payload, offset, count)
        offset += 4 * count
        state[name] = torch.from_numpy(flat.reshape(shape).copy())
    model.load_state_dict(state)
    model.eval()
    return model
