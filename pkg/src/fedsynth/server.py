"""Server side: aggregate distillates, decode, and distill a global model.

Training minimizes the KL divergence from each transmitted soft label to the
student's prediction on the decoded latent (soft-target distillation at
temperature 1), with images decoded on the fly so only latents are ever
stored. Also provides the one-shot parameter-averaging and ensemble
baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .distiller import Autoencoder, Distillate, DistillateSet
from .models import LabeledImage, LocalModel, build_model, evaluate, predict_logits
from .seeding import derive_seed

_TEACHER_FLOOR = 1e-8


@dataclass
class CombinedSet:
    """All clients' distillates concatenated in client-id order."""

    distillates: list[Distillate]
    per_client_counts: list[int]
    client_ids: list[int]
    latent_shape: tuple[int, int, int]
    num_classes: int


def aggregate(sets: list[DistillateSet]) -> CombinedSet:
    """Concatenate client sets (sorted by client id, so input order is moot)."""
    if not sets:
        raise ValueError("no distillate sets to aggregate")
    ordered = sorted(sets, key=lambda s: s.client_id)
    shape = ordered[0].latent_shape
    classes = ordered[0].num_classes
    for s in ordered:
        if s.latent_shape != shape:
            raise ValueError(f"latent shape mismatch: {s.latent_shape} vs {shape}")
        if s.num_classes != classes:
            raise ValueError(f"class-count mismatch: {s.num_classes} vs {classes}")
    distillates: list[Distillate] = []
    for s in ordered:
        distillates.extend(s.distillates)
    return CombinedSet(
        distillates=distillates,
        per_client_counts=[len(s.distillates) for s in ordered],
        client_ids=[s.client_id for s in ordered],
        latent_shape=shape,
        num_classes=classes,
    )


@dataclass(frozen=True)
class ServerTrainConfig:
    epochs: int = 200
    eta_trn: float = 0.02
    batch_size: int = 128
    seed: int = 0
    kl_direction: str = "forward"  # forward: KL(teacher || student)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.eta_trn <= 0:
            raise ValueError("epochs/batch_size/eta_trn must be positive")
        if self.kl_direction not in ("forward", "reverse"):
            raise ValueError(f"kl_direction must be forward or reverse, got {self.kl_direction!r}")


def kl_distillation_loss(
    logits: torch.Tensor, teacher: torch.Tensor, direction: str = "forward"
) -> torch.Tensor:
    """Batch-mean KL between teacher soft labels and student predictions.

    Forward KL(y || p) reduces exactly to cross-entropy for one-hot teachers.
    Teacher probabilities are floored at 1e-8 inside logs so the loss stays
    finite for any input.
    """
    log_p = torch.log_softmax(logits, dim=1)
    log_y = torch.log(torch.clamp(teacher, min=_TEACHER_FLOOR))
    if direction == "forward":
        per_sample = (teacher * (log_y - log_p)).sum(dim=1)
    else:
        p = torch.softmax(logits, dim=1)
        per_sample = (p * (log_p - log_y)).sum(dim=1)
    return per_sample.mean()


@dataclass
class ServerTrainResult:
    model: LocalModel
    epoch_losses: list[float] = field(default_factory=list)
    accuracy_trace: list[tuple[int, float]] = field(default_factory=list)


def train_server(
    combined: CombinedSet,
    ae: Autoencoder,
    arch_id: str,
    cfg: ServerTrainConfig,
    eval_data: list[LabeledImage] | None = None,
    eval_every: int = 0,
) -> ServerTrainResult:
    """Distill the combined set into a fresh global model.

    Latents are decoded per batch with the frozen decoder; mini-batch order is
    a seeded shuffle of the (canonically ordered) combined set.
    """
    if not combined.distillates:
        raise ValueError("combined distillate set is empty")
    if ae.latent_shape != combined.latent_shape:
        raise ValueError(
            f"decoder latent shape {ae.latent_shape} != distillate shape {combined.latent_shape}"
        )
    model = build_model(arch_id, combined.num_classes, ae.resolution, seed=cfg.seed)
    z_all = np.stack([d.latent for d in combined.distillates])
    y_all = torch.from_numpy(
        np.stack([d.soft_label.probs for d in combined.distillates]).astype(np.float32)
    )
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.eta_trn, momentum=0.9)
    n = len(combined.distillates)
    result = ServerTrainResult(model=model)
    model.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, "server-order", epoch)).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images = torch.from_numpy(ae.decode(z_all[idx]))
            optimizer.zero_grad()
            loss = kl_distillation_loss(model(images), y_all[idx], cfg.kl_direction)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite server loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
        result.epoch_losses.append(total / n)
        if eval_data and eval_every > 0 and ((epoch + 1) % eval_every == 0 or epoch == cfg.epochs - 1):
            model.eval()
            result.accuracy_trace.append((epoch + 1, evaluate(model, eval_data)))
            model.train()
    model.eval()
    return result


def fedavg_oneshot(models: list[LocalModel]) -> LocalModel:
    """Elementwise uniform parameter average (the one-round FedAvg baseline)."""
    if not models:
        raise ValueError("no models to average")
    first = models[0]
    for m in models[1:]:
        if m.arch_id != first.arch_id or m.num_classes != first.num_classes:
            raise ValueError("architecture mismatch across clients")
    avg = build_model(first.arch_id, first.num_classes, first.resolution, seed=0)
    states = [m.state_dict() for m in models]
    merged = {}
    for name in states[0]:
        stacked = torch.stack([s[name].detach().double() for s in states])
        merged[name] = stacked.mean(dim=0).to(states[0][name].dtype)
    avg.load_state_dict(merged)
    avg.eval()
    return avg


def ensemble_eval(models: list[LocalModel], dataset: list[LabeledImage]) -> float:
    """Accuracy of the mean-softmax ensemble (diagnostic upper reference)."""
    if not models:
        raise ValueError("no models in ensemble")
    if not dataset:
        raise ValueError("empty evaluation dataset")
    hits = 0
    for start in range(0, len(dataset), 256):
        chunk = dataset[start:start + 256]
        probs = None
        for m in models:
            logits = torch.from_numpy(predict_logits(m, chunk)).double()
            p = torch.softmax(logits, dim=1)
            probs = p if probs is None else probs + p
        pred = probs.argmax(dim=1).numpy()
        hits += int(sum(int(p) == img.label for p, img in zip(pred, chunk)))
    return hits / len(dataset)
