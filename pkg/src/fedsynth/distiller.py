"""Autoencoder distiller and latent distillate synthesis.

The autoencoder maps images to compact latents and back. Latents are
initialized from the perturbed core-set, then optimized so the decoded
latents' batch-mean features match the ORIGINAL core-set's batch-mean
features under the frozen local model (plain gradient descent on z; the
autoencoder and classifier never change). The resulting (latent, soft label)
pairs are the only payload a client transmits.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .container import floats_from_payload, read_archive, write_archive
from .coreset import CoreSet
from .models import LocalModel, SoftLabel, predict_soft
from .seeding import derive_seed

AE_KINDS = ("trained_small", "random_init", "identity_passthrough")


def _enc_stack(latent_channels: int, stages: int) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(3, 32, 3, padding=1), nn.GroupNorm(8, 32), nn.ReLU(inplace=True)]
    width = 32
    for _ in range(stages):
        nxt = min(width * 2, 64)
        layers += [nn.Conv2d(width, nxt, 3, stride=2, padding=1), nn.GroupNorm(8, nxt), nn.ReLU(inplace=True)]
        width = nxt
    layers.append(nn.Conv2d(width, latent_channels, 3, padding=1))
    return nn.Sequential(*layers)


def _dec_stack(latent_channels: int, stages: int) -> nn.Sequential:
    width = 64
    layers: list[nn.Module] = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.GroupNorm(8, width), nn.ReLU(inplace=True)]
    for i in range(stages):
        nxt = 32 if i == stages - 1 else width
        layers += [
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, nxt, 3, padding=1),
            nn.GroupNorm(8, nxt),
            nn.ReLU(inplace=True),
        ]
        width = nxt
    layers.append(nn.Conv2d(width, 3, 3, padding=1))
    return nn.Sequential(*layers)


class Autoencoder(nn.Module):
    """Encoder/decoder pair; decode output is clipped to [0, 1].

    ``identity_passthrough`` keeps latents equal to pixels (the no-compression
    ablation); the other kinds compress to latent_channels x (H/f) x (W/f),
    which must stay below the pixel element count.

    ``latent_scale`` reparameterizes the transmitted latents (encoder output
    is multiplied by it, decoder input divided by it), leaving D(E(x))
    untouched. Scaling below 1 amplifies decoder sensitivity per latent unit,
    which conditions latent-space gradient descent at the default step size;
    the public reference distillers ship the same kind of fixed scale factor.
    """

    def __init__(
        self,
        kind: str,
        resolution: int,
        latent_channels: int = 4,
        downsample_factor: int = 4,
        latent_scale: float = 0.5,
    ) -> None:
        super().__init__()
        if kind not in AE_KINDS:
            raise ValueError(f"unknown autoencoder kind {kind!r}; choose from {AE_KINDS}")
        if latent_scale <= 0:
            raise ValueError(f"latent_scale must be > 0, got {latent_scale}")
        self.kind = kind
        self.resolution = resolution
        self.latent_scale = float(latent_scale)
        if kind == "identity_passthrough":
            self.latent_channels = 3
            self.downsample_factor = 1
            self.latent_scale = 1.0
            self.encoder = None
            self.decoder = None
        else:
            stages = int(round(np.log2(downsample_factor)))
            if 2**stages != downsample_factor or stages < 1:
                raise ValueError(f"downsample_factor must be a power of two >= 2, got {downsample_factor}")
            if resolution % downsample_factor != 0:
                raise ValueError(
                    f"resolution {resolution} not divisible by downsample {downsample_factor}"
                )
            self.latent_channels = latent_channels
            self.downsample_factor = downsample_factor
            self.encoder = _enc_stack(latent_channels, stages)
            self.decoder = _dec_stack(latent_channels, stages)
            lat = latent_channels * (resolution // downsample_factor) ** 2
            if lat >= 3 * resolution * resolution:
                raise ValueError(f"latent size {lat} does not compress {3 * resolution * resolution} pixels")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        side = self.resolution // self.downsample_factor
        return (self.latent_channels, side, side)

    def encode_t(self, x: torch.Tensor) -> torch.Tensor:
        if self.encoder is None:
            return x
        return self.encoder(x) * self.latent_scale

    def decode_t(self, z: torch.Tensor) -> torch.Tensor:
        if self.decoder is None:
            return torch.clamp(z, 0.0, 1.0)
        return torch.clamp(self.decoder(z / self.latent_scale), 0.0, 1.0)

    def _decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        # Unclipped decoder output; only the reconstruction loss uses this.
        if self.decoder is None:
            return z
        return self.decoder(z / self.latent_scale)

    @torch.no_grad()
    def encode(self, images: np.ndarray) -> np.ndarray:
        arr, squeeze = _as_4d(images)
        self.eval()
        z = self.encode_t(torch.from_numpy(arr).to(self._dtype()))
        out = z.cpu().float().numpy()
        return out[0] if squeeze else out

    @torch.no_grad()
    def decode(self, latents: np.ndarray) -> np.ndarray:
        arr, squeeze = _as_4d(latents)
        self.eval()
        x = self.decode_t(torch.from_numpy(arr).to(self._dtype()))
        out = x.cpu().float().numpy()
        return out[0] if squeeze else out

    def _dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return torch.float32

    def config_hash(self) -> str:
        h = hashlib.sha256()
        h.update(
            f"{self.kind}|{self.resolution}|{self.latent_channels}|"
            f"{self.downsample_factor}|{self.latent_scale!r}".encode()
        )
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()[:16]


def _as_4d(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ValueError(f"expected 3-D or 4-D array, got shape {arr.shape}")


def build_autoencoder(
    kind: str,
    resolution: int,
    latent_channels: int = 4,
    downsample_factor: int = 4,
    seed: int = 0,
    latent_scale: float = 0.5,
) -> Autoencoder:
    torch.manual_seed(derive_seed(seed, "autoencoder", kind))
    ae = Autoencoder(kind, resolution, latent_channels, downsample_factor, latent_scale)
    ae.eval()
    return ae


@dataclass(frozen=True)
class AETrainConfig:
    kind: str = "trained_small"
    latent_channels: int = 4
    downsample_factor: int = 4
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    latent_scale: float = 0.5


@dataclass
class AutoencoderTrainResult:
    ae: Autoencoder
    recon_error: float  # mean squared per-pixel error on the training sample
    epoch_losses: list[float] = field(default_factory=list)


def reconstruction_error(ae: Autoencoder, images: np.ndarray) -> float:
    """Mean squared per-pixel reconstruction error through encode+decode."""
    arr, _ = _as_4d(images)
    err = 0.0
    count = 0
    for start in range(0, len(arr), 128):
        chunk = arr[start:start + 128]
        recon = ae.decode(ae.encode(chunk))
        err += float(((recon - chunk) ** 2).sum())
        count += chunk.size
    return err / max(count, 1)


def train_autoencoder(sample: list | np.ndarray, cfg: AETrainConfig) -> AutoencoderTrainResult:
    """Fit the distiller on a server-side proxy sample (never client data).

    ``random_init`` and ``identity_passthrough`` skip the fit and only report
    their reconstruction error on the sample.
    """
    from .models import as_batch_array

    arr = as_batch_array(sample)
    if arr.shape[0] == 0:
        raise ValueError("empty autoencoder training sample")
    resolution = arr.shape[-1]
    ae = build_autoencoder(
        cfg.kind, resolution, cfg.latent_channels, cfg.downsample_factor, cfg.seed, cfg.latent_scale
    )
    epoch_losses: list[float] = []
    if cfg.kind == "trained_small":
        x_all = torch.from_numpy(arr)
        optimizer = torch.optim.Adam(ae.parameters(), lr=cfg.lr)
        n = len(arr)
        ae.train()
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(derive_seed(cfg.seed, "ae-order", epoch)).permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = torch.from_numpy(order[start:start + cfg.batch_size])
                x = x_all[idx]
                optimizer.zero_grad()
                loss = torch.mean((ae._decode_raw(ae.encode_t(x)) - x) ** 2)
                loss.backward()
                optimizer.step()
                total += float(loss.detach()) * len(idx)
            epoch_losses.append(total / n)
        ae.eval()
    return AutoencoderTrainResult(ae=ae, recon_error=reconstruction_error(ae, arr), epoch_losses=epoch_losses)


def save_autoencoder(ae: Autoencoder, path: str | Path, seed: int = 0) -> int:
    header = {
        "kind": ae.kind,
        "resolution": ae.resolution,
        "latent_channels": ae.latent_channels,
        "downsample_factor": ae.downsample_factor,
        "latent_scale": repr(ae.latent_scale),
        "seed": seed,
    }
    items = []
    arrays = []
    for name, param in ae.state_dict().items():
        arr = param.detach().cpu().numpy()
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        items.append(f"param {name} {shape}")
        arrays.append(arr)
    return write_archive(path, "autoencoder", header, items, arrays)


def load_autoencoder(path: str | Path) -> Autoencoder:
    kind_tag, header, items, payload = read_archive(path)
    if kind_tag != "autoencoder":
        raise ValueError(f"expected an autoencoder checkpoint, got kind={kind_tag!r}")
    ae = Autoencoder(
        header["kind"],
        int(header["resolution"]),
        int(header["latent_channels"]),
        int(header["downsample_factor"]),
        float(header.get("latent_scale", 1.0)),
    )
    state = {}
    offset = 0
    for item in items:
        _, name, shape_s = item.split(" ")
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        count = int(np.prod(shape)) if shape else 1
        flat = floats_from_payload(payload, offset, count)
        offset += 4 * count
        state[name] = torch.from_numpy(flat.reshape(shape).copy())
    ae.load_state_dict(state)
    ae.eval()
    return ae


@dataclass(frozen=True)
class SynthesisConfig:
    t_syn: int = 50
    eta_syn: float = 0.1
    batch_size: int = 128
    seed: int = 0
    halving_fallback: bool = False  # retry a step at halved rate if batch loss rises
    per_sample: bool = True  # per-pair feature matching; False: batch-mean form

    def __post_init__(self) -> None:
        if self.t_syn < 0:
            raise ValueError("t_syn must be >= 0")
        if self.eta_syn <= 0:
            raise ValueError("eta_syn must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Distillate:
    latent: np.ndarray  # float32, ae.latent_shape
    soft_label: SoftLabel
    origin: tuple[int, int, int]  # (client_id, class, core-set index)


@dataclass
class DistillateSet:
    client_id: int
    distillates: list[Distillate]
    latent_shape: tuple[int, int, int]
    num_classes: int
    ae_hash: str
    seed: int
    loss_trace: list[list[float]] = field(default_factory=list)  # [epoch][batch]


def synthesis_loss(
    z: torch.Tensor,
    x: torch.Tensor,
    ae: Autoencoder,
    model: LocalModel,
    per_sample: bool = True,
) -> torch.Tensor:
    """Feature-alignment loss between decoded latents and reference images.

    ``per_sample`` (default): mean over the batch of per-pair squared feature
    distances, which anchors every decoded latent to its own original.
    ``per_sample=False``: squared distance between batch-mean feature vectors
    only; measurably worse as a synthesis target at this scale, kept for the
    ablation.
    """
    feats_syn = model.feature_extractor(ae.decode_t(z))
    feats_ref = model.feature_extractor(x)
    if per_sample:
        return ((feats_syn - feats_ref) ** 2).sum(dim=1).mean()
    diff = feats_syn.mean(dim=0) - feats_ref.mean(dim=0)
    return (diff**2).sum()


def synthesize_distillates(
    coreset: CoreSet,
    perturbed: list[np.ndarray],
    ae: Autoencoder,
    model: LocalModel,
    cfg: SynthesisConfig,
    client_id: int = 0,
) -> DistillateSet:
    """Optimize latents so decoded features track the original core-set.

    Latents start at E(perturbed_j); mini-batches are fixed contiguous slices
    in core-set order, so each (z_j, x_j) pair stays index-aligned. Gradient
    descent updates only z; autoencoder and model parameters are frozen
    bit-for-bit. The per-batch pre-step loss trajectory is recorded.
    """
    if len(perturbed) != len(coreset.patches):
        raise ValueError(
            f"perturbed/core-set pairing mismatch: {len(perturbed)} vs {len(coreset.patches)}"
        )
    if not coreset.patches:
        raise ValueError("core-set is empty")
    dtype = next(model.parameters()).dtype
    model.eval()
    ae.eval()

    z_full = torch.from_numpy(ae.encode(np.stack(perturbed))).to(dtype)
    x_full = torch.from_numpy(np.stack([p.pixels for p in coreset.patches])).to(dtype)
    n = len(coreset.patches)
    bounds = [(s, min(s + cfg.batch_size, n)) for s in range(0, n, cfg.batch_size)]

    # Reference features never change; cache what the loss needs per batch.
    ref_cache: list[torch.Tensor] = []
    with torch.no_grad():
        for lo, hi in bounds:
            feats = model.feature_extractor(x_full[lo:hi])
            ref_cache.append(feats if cfg.per_sample else feats.mean(dim=0))

    def batch_loss(zb: torch.Tensor, bi: int) -> torch.Tensor:
        feats_syn = model.feature_extractor(ae.decode_t(zb))
        if cfg.per_sample:
            return ((feats_syn - ref_cache[bi]) ** 2).sum(dim=1).mean()
        diff = feats_syn.mean(dim=0) - ref_cache[bi]
        return (diff**2).sum()

    loss_trace: list[list[float]] = []
    for t in range(cfg.t_syn):
        epoch_losses: list[float] = []
        for bi, (lo, hi) in enumerate(bounds):
            zb = z_full[lo:hi].detach().requires_grad_(True)
            loss = batch_loss(zb, bi)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite synthesis loss at iteration {t}, batch {bi} (client {client_id})"
                )
            epoch_losses.append(value)
            (grad,) = torch.autograd.grad(loss, zb)
            with torch.no_grad():
                if cfg.halving_fallback:
                    step = cfg.eta_syn
                    accepted = zb
                    for _ in range(10):
                        candidate = zb - step * grad
                        if float(batch_loss(candidate, bi)) <= value:
                            accepted = candidate
                            break
                        step *= 0.5
                    z_full[lo:hi] = accepted.detach()
                else:
                    z_full[lo:hi] = (zb - cfg.eta_syn * grad).detach()
        loss_trace.append(epoch_losses)

    latents = z_full.detach().cpu().float().numpy()
    decoded = ae.decode(latents)
    soft_labels = predict_soft(model, decoded)
    distillates = [
        Distillate(
            latent=latents[j].copy(),
            soft_label=soft_labels[j],
            origin=(client_id, coreset.patches[j].label, j),
        )
        for j in range(n)
    ]
    return DistillateSet(
        client_id=client_id,
        distillates=distillates,
        latent_shape=tuple(latents.shape[1:]),
        num_classes=model.num_classes,
        ae_hash=ae.config_hash(),
        seed=cfg.seed,
        loss_trace=loss_trace,
    )


def serialize_distillates(dset: DistillateSet, path: str | Path) -> int:
    """Write a distillate archive; returns the exact payload byte count.

    Payload layout: all latent blobs, then all soft-label blobs (float32 LE).
    The manifest carries provenance only, never pixels.
    """
    count = len(dset.distillates)
    header = {
        "client_id": dset.client_id,
        "count": count,
        "latent_shape": ",".join(str(s) for s in dset.latent_shape),
        "num_classes": dset.num_classes,
        "ae_hash": dset.ae_hash,
        "seed": dset.seed,
    }
    items = [f"origin {d.origin[1]} {d.origin[2]}" for d in dset.distillates]
    arrays = []
    if count:
        arrays.append(np.stack([d.latent for d in dset.distillates]))
        arrays.append(np.stack([d.soft_label.probs.astype(np.float32) for d in dset.distillates]))
    return write_archive(path, "distillates", header, items, arrays)


def load_distillates(path: str | Path) -> DistillateSet:
    kind, header, items, payload = read_archive(path)
    if kind != "distillates":
        raise ValueError(f"expected a distillate archive, got kind={kind!r}")
    count = int(header["count"])
    latent_shape = tuple(int(s) for s in header["latent_shape"].split(","))
    num_classes = int(header["num_classes"])
    client_id = int(header["client_id"])
    lat_elems = int(np.prod(latent_shape))
    distillates = []
    for j in range(count):
        _, class_s, index_s = items[j].split(" ")
        latent = floats_from_payload(payload, j * lat_elems * 4, lat_elems).reshape(latent_shape)
        probs = floats_from_payload(
            payload, count * lat_elems * 4 + j * num_classes * 4, num_classes
        ).astype(np.float64)
        soft = SoftLabel(probs=probs / probs.sum())
        distillates.append(
            Distillate(latent=latent, soft_label=soft, origin=(client_id, int(class_s), int(index_s)))
        )
    return DistillateSet(
        client_id=client_id,
        distillates=distillates,
        latent_shape=latent_shape,
        num_classes=num_classes,
        ae_hash=header["ae_hash"],
        seed=int(header["seed"]),
    )
