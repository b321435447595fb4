"""Declarative experiment harness: config file -> full pipeline -> report.

The pipeline runs partition -> local training -> core-set selection ->
Fourier perturbation -> latent synthesis -> distillate transfer -> server
distillation -> evaluation, plus any toggled baselines (one-shot parameter
averaging, random selection, no-autoencoder, latent-noise, pair-mixing) on
identical shards, local models, and evaluation data. Every stage reads and
writes only the artifact directory, so stages can be rerun and inspected
independently:

    out/
      shards/       client_###.bin, eval.bin, proxy.bin, partition.json
      models/       client_###.ckpt, local_train.json
      coresets/     client_###.bin, client_###.perturbed.bin  (+ per-variant subdirs)
      distillates/  client_###.bin                            (+ per-variant subdirs)
      global/       autoencoder.ckpt, global_<method>.ckpt, trace_<method>.tsv
      reports/      report.json, accuracy.tsv, privacy.tsv, comm.tsv, *.png
"""

from __future__ import annotations

import dataclasses
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import coreset as coreset_mod
from .container import read_archive, write_archive
from .distiller import (
    AETrainConfig,
    Autoencoder,
    DistillateSet,
    SynthesisConfig,
    build_autoencoder,
    load_autoencoder,
    load_distillates,
    save_autoencoder,
    serialize_distillates,
    synthesize_distillates,
    train_autoencoder,
)
from .fourier import PerturbConfig, fourier_perturb
from .metrics import (
    CostReport,
    NoiseConfig,
    comm_cost,
    fedmix_synthesize,
    noise_perturb,
    privacy_report,
)
from .models import (
    LabeledImage,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train_local,
)
from .partitioner import (
    ClientShard,
    PartitionSpec,
    dirichlet_partition,
    load_corpus,
    load_corpus_archive,
    partition_stats,
    save_corpus_archive,
)
from .distiller import Distillate
from .seeding import derive_seed, set_backend_deterministic
from .server import ServerTrainConfig, aggregate, fedavg_oneshot, train_server

MAIN_METHOD = "distillate"


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name (and client, if any)."""


class ConfigError(ValueError):
    """Bad or unknown experiment-config key/value."""


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; see the field comments for semantics.

    Defaults follow the reference recipe (local SGD momentum 0.9 / lr 0.01 /
    weight decay 1e-4 / batch 128 / 200 epochs; lambda 0.8; T_syn 50 with step
    0.1; server lr 0.02). Desk configs typically scale epoch counts down.
    """

    # corpus
    corpus_path: str = ""
    resolution: int = 32
    eval_fraction: float = 0.1  # held-out global evaluation split
    proxy_fraction: float = 0.1  # server-side sample for distiller training
    # partition
    n_clients: int = 5
    alpha: float = 0.1
    # local training
    arch: str = "small_conv"
    local_epochs: int = 200
    local_batch_size: int = 128
    local_lr: float = 0.01
    local_momentum: float = 0.9
    local_weight_decay: float = 1e-4
    # core-set selection
    ipc: int = 50
    patches_per_image: int = 4
    scale_lo: float = 0.08
    scale_hi: float = 1.0
    keep_underfull: bool = True  # pad underfull classes instead of dropping them
    # Fourier perturbation
    fourier_lambda: float = 0.8
    ref_source: str = "other_image"
    same_class_ref: bool = False
    # autoencoder distiller
    ae_kind: str = "trained_small"
    ae_latent_channels: int = 4
    ae_downsample: int = 4
    ae_latent_scale: float = 0.5
    ae_epochs: int = 20
    ae_lr: float = 1e-3
    ae_batch_size: int = 64
    # distillate synthesis
    t_syn: int = 50
    eta_syn: float = 0.1
    syn_batch_size: int = 128
    halving_fallback: bool = False
    per_sample_loss: bool = True
    # server distillation
    t_trn: int = 200
    eta_trn: float = 0.02
    server_batch_size: int = 128
    kl_direction: str = "forward"
    eval_every: int = 0  # 0: evaluate only after the last epoch
    # baselines / ablations
    baseline_fedavg: bool = False
    baseline_random_selection: bool = False
    baseline_no_ae: bool = False
    baseline_noise: bool = False
    noise_p: str = "0.1"  # comma-separated perturbation coefficients
    noise_s: float = 0.05
    noise_dist: str = "gaussian"
    baseline_fedmix: bool = False
    fourier_lambda_sweep: str = ""  # extra lambdas, each a full synth+train pass
    # run control
    out_dir: str = ""
    master_seed: int = 0
    deterministic: bool = False

    def noise_p_values(self) -> list[float]:
        return [float(v) for v in self.noise_p.split(",") if v.strip()]

    def lambda_sweep_values(self) -> list[float]:
        return [float(v) for v in self.fourier_lambda_sweep.split(",") if v.strip()]

    def validate(self) -> None:
        if not self.corpus_path:
            raise ConfigError("corpus_path is required")
        if not self.out_dir:
            raise ConfigError("out_dir is required")
        if not 0 <= self.eval_fraction < 1 or not 0 <= self.proxy_fraction < 1:
            raise ConfigError("eval_fraction/proxy_fraction must be in [0, 1)")
        if self.eval_fraction + self.proxy_fraction >= 0.9:
            raise ConfigError("eval+proxy fractions leave too little training data")
        for p in self.noise_p_values():
            if not 0 <= p <= 1:
                raise ConfigError(f"noise_p entries must be in [0, 1], got {p}")
        for lam in self.lambda_sweep_values():
            if not 0 <= lam <= 1:
                raise ConfigError(f"lambda sweep entries must be in [0, 1], got {lam}")
        # Constructing the sub-configs validates the rest of the fields.
        self.partition_spec()
        self.train_config()
        self.selection_spec()
        self.perturb_config()
        self.synthesis_config()
        self.server_config()

    # Sub-config builders (all seeds derive from master_seed).
    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(
            n_clients=self.n_clients,
            alpha=self.alpha,
            seed=derive_seed(self.master_seed, "partition"),
        )

    def train_config(self, client_id: int = 0) -> TrainConfig:
        return TrainConfig(
            epochs=self.local_epochs,
            batch_size=self.local_batch_size,
            learning_rate=self.local_lr,
            momentum=self.local_momentum,
            weight_decay=self.local_weight_decay,
            seed=derive_seed(self.master_seed, "local", client_id),
        )

    def selection_spec(self, client_id: int = 0) -> coreset_mod.SelectionSpec:
        return coreset_mod.SelectionSpec(
            ipc=self.ipc,
            K=self.patches_per_image,
            scale_range=(self.scale_lo, self.scale_hi),
            seed=derive_seed(self.master_seed, "coreset", client_id),
        )

    def perturb_config(self, client_id: int = 0, lam: float | None = None) -> PerturbConfig:
        return PerturbConfig(
            lam=self.fourier_lambda if lam is None else lam,
            ref_source=self.ref_source,
            seed=derive_seed(self.master_seed, "perturb", client_id),
            same_class_ref=self.same_class_ref,
        )

    def ae_config(self) -> AETrainConfig:
        return AETrainConfig(
            kind=self.ae_kind,
            latent_channels=self.ae_latent_channels,
            downsample_factor=self.ae_downsample,
            epochs=self.ae_epochs,
            lr=self.ae_lr,
            batch_size=self.ae_batch_size,
            seed=derive_seed(self.master_seed, "autoencoder"),
            latent_scale=self.ae_latent_scale,
        )

    def synthesis_config(self, client_id: int = 0) -> SynthesisConfig:
        return SynthesisConfig(
            t_syn=self.t_syn,
            eta_syn=self.eta_syn,
            batch_size=self.syn_batch_size,
            seed=derive_seed(self.master_seed, "synthesis", client_id),
            halving_fallback=self.halving_fallback,
            per_sample=self.per_sample_loss,
        )

    def server_config(self, method: str = MAIN_METHOD) -> ServerTrainConfig:
        return ServerTrainConfig(
            epochs=self.t_trn,
            eta_trn=self.eta_trn,
            batch_size=self.server_batch_size,
            seed=derive_seed(self.master_seed, "server", method),
            kl_direction=self.kl_direction,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse the flat `key = value` config format; unknown keys are errors."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, raw)
    values.update(overrides or {})
    return ExperimentConfig(**values)


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), overrides)


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = [f"{name} = {getattr(cfg, name)}" for name in _FIELD_TYPES]
    return "\n".join(lines) + "\n"


@dataclass
class MethodResult:
    name: str
    accuracy: float
    payload_bytes: int = 0
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PrivacyRow:
    method: str
    params: dict
    mean_psnr: float
    mean_ssim: float
    n_pairs: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentReport:
    methods: list[MethodResult] = field(default_factory=list)
    privacy: list[PrivacyRow] = field(default_factory=list)
    comm: CostReport | None = None
    stage_seconds: dict = field(default_factory=dict)
    client_diagnostics: dict = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)

    def method(self, name: str) -> MethodResult:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(f"no method {name!r} in report")

    def to_dict(self) -> dict:
        return {
            "methods": [m.to_dict() for m in self.methods],
            "privacy": [p.to_dict() for p in self.privacy],
            "comm": self.comm.to_dict() if self.comm else None,
            "stage_seconds": self.stage_seconds,
            "client_diagnostics": self.client_diagnostics,
            "config_echo": self.config_echo,
        }

    @staticmethod
    def from_dict(data: dict) -> "ExperimentReport":
        report = ExperimentReport(
            methods=[MethodResult(**m) for m in data["methods"]],
            privacy=[PrivacyRow(**p) for p in data["privacy"]],
            comm=CostReport(**data["comm"]) if data.get("comm") else None,
            stage_seconds=data.get("stage_seconds", {}),
            client_diagnostics=data.get("client_diagnostics", {}),
            config_echo=data.get("config_echo", {}),
        )
        return report


# --------------------------------------------------------------------------
# artifact-directory helpers


def _dirs(cfg: ExperimentConfig) -> dict[str, Path]:
    out = Path(cfg.out_dir)
    return {
        "out": out,
        "shards": out / "shards",
        "models": out / "models",
        "coresets": out / "coresets",
        "distillates": out / "distillates",
        "global": out / "global",
        "reports": out / "reports",
    }


def _client_ids(cfg: ExperimentConfig) -> list[int]:
    return list(range(cfg.n_clients))


def _shard_path(d: dict, cid: int) -> Path:
    return d["shards"] / f"client_{cid:03d}.bin"


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise StageError(f"missing artifact {path}; run the producing stage first")
    return json.loads(path.read_text(encoding="utf-8"))


def _save_images(path: Path, images: list[np.ndarray]) -> int:
    items = [f"image {i}" for i in range(len(images))]
    header = {"count": len(images)}
    if images:
        header["shape"] = ",".join(str(s) for s in images[0].shape)
    return write_archive(path, "images", header, items, list(images))


def _load_images(path: Path) -> list[np.ndarray]:
    kind, header, _, payload = read_archive(path)
    if kind != "images":
        raise StageError(f"expected an images archive at {path}, got {kind!r}")
    count = int(header["count"])
    if count == 0:
        return []
    shape = tuple(int(s) for s in header["shape"].split(","))
    per = int(np.prod(shape))
    flat = np.frombuffer(payload, dtype="<f4", count=count * per).copy()
    return [a.reshape(shape) for a in flat.reshape(count, per)]


def _load_shard(d: dict, cid: int, n_classes: int, resolution: int) -> ClientShard:
    images = load_corpus_archive(_shard_path(d, cid), resolution)
    histogram = np.zeros(n_classes, dtype=np.int64)
    for img in images:
        histogram[img.label] += 1
    return ClientShard(client_id=cid, images=images, class_histogram=histogram)


# --------------------------------------------------------------------------
# stages


def stage_partition(cfg: ExperimentConfig) -> dict:
    """Load the corpus, split off eval/proxy sets, and shard the rest."""
    d = _dirs(cfg)
    corpus = load_corpus(cfg.corpus_path, cfg.resolution)
    n_classes = max(img.label for img in corpus) + 1

    rng = np.random.default_rng(derive_seed(cfg.master_seed, "split"))
    by_class: dict[int, list[int]] = {}
    for i, img in enumerate(corpus):
        by_class.setdefault(img.label, []).append(i)
    eval_idx: list[int] = []
    proxy_idx: list[int] = []
    train_idx: list[int] = []
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        rng.shuffle(idx)
        n_eval = int(round(len(idx) * cfg.eval_fraction))
        n_proxy = int(round(len(idx) * cfg.proxy_fraction))
        eval_idx.extend(idx[:n_eval].tolist())
        proxy_idx.extend(idx[n_eval:n_eval + n_proxy].tolist())
        train_idx.extend(idx[n_eval + n_proxy:].tolist())

    train = [corpus[i] for i in sorted(train_idx)]
    shards = dirichlet_partition(train, cfg.partition_spec())
    for shard in shards:
        save_corpus_archive(shard.images, _shard_path(d, shard.client_id))
    save_corpus_archive([corpus[i] for i in sorted(eval_idx)], d["shards"] / "eval.bin")
    save_corpus_archive([corpus[i] for i in sorted(proxy_idx)], d["shards"] / "proxy.bin")

    stats = partition_stats(shards)
    info = {
        "n_classes": n_classes,
        "n_clients": cfg.n_clients,
        "resolution": cfg.resolution,
        "train_size": len(train),
        "eval_size": len(eval_idx),
        "proxy_size": len(proxy_idx),
        "stats": stats.to_dict(),
    }
    _write_json(d["shards"] / "partition.json", info)
    return info


def stage_train_local(cfg: ExperimentConfig) -> dict:
    d = _dirs(cfg)
    info = _read_json(d["shards"] / "partition.json")
    n_classes = info["n_classes"]
    diag = {}
    for cid in _client_ids(cfg):
        try:
            shard = _load_shard(d, cid, n_classes, cfg.resolution)
            result = train_local(shard, cfg.arch, cfg.train_config(cid), num_classes=n_classes)
            bytes_written = save_checkpoint(
                result.model, d["models"] / f"client_{cid:03d}.ckpt", seed=cfg.train_config(cid).seed
            )
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"stage train-local, client {cid}: {exc}") from exc
        diag[str(cid)] = {
            "train_accuracy": result.train_accuracy,
            "single_class": result.single_class,
            "shard_size": len(shard.images),
            "checkpoint_bytes": bytes_written,
        }
    _write_json(d["models"] / "local_train.json", diag)
    return diag


def _coreset_dir(d: dict, variant: str | None) -> Path:
    return d["coresets"] if variant is None else d["coresets"] / variant


def _distillate_dir(d: dict, variant: str | None) -> Path:
    return d["distillates"] if variant is None else d["distillates"] / variant


def stage_coreset(cfg: ExperimentConfig, variant: str | None = None) -> dict:
    """Select core-sets with the local observer (or randomly, for the ablation)."""
    d = _dirs(cfg)
    info = _read_json(d["shards"] / "partition.json")
    out_dir = _coreset_dir(d, variant)
    diag = {}
    for cid in _client_ids(cfg):
        try:
            shard = _load_shard(d, cid, info["n_classes"], cfg.resolution)
            model = load_checkpoint(d["models"] / f"client_{cid:03d}.ckpt")
            spec = cfg.selection_spec(cid)
            if variant == "random_selection":
                cs = coreset_mod.select_coreset_random(
                    shard, spec, model=model, keep_underfull=cfg.keep_underfull
                )
            else:
                cs = coreset_mod.select_coreset(shard, model, spec, keep_underfull=cfg.keep_underfull)
            coreset_mod.save_coreset_archive(cs, out_dir / f"client_{cid:03d}.bin", cid, spec)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"stage coreset, client {cid}: {exc}") from exc
        diag[str(cid)] = {
            "patches": len(cs.patches),
            "covered_classes": sorted(cs.covered_classes),
        }
    _write_json(out_dir / "coreset.json", diag)
    return diag


def stage_perturb(cfg: ExperimentConfig, variant: str | None = None, lam: float | None = None) -> dict:
    """Fourier-perturb each client's core-set (lambda=0 keeps it unchanged)."""
    d = _dirs(cfg)
    out_dir = _coreset_dir(d, variant)
    diag = {}
    for cid in _client_ids(cfg):
        try:
            cs, _ = coreset_mod.load_coreset_archive(out_dir / f"client_{cid:03d}.bin")
            perturbed = fourier_perturb(cs, cfg.perturb_config(cid, lam=lam))
            _save_images(out_dir / f"client_{cid:03d}.perturbed.bin", perturbed)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"stage perturb, client {cid}: {exc}") from exc
        diag[str(cid)] = {"count": len(perturbed)}
    return diag


def _ensure_autoencoder(cfg: ExperimentConfig, kind: str | None = None) -> Autoencoder:
    """Load the distiller checkpoint, training and saving it on first use."""
    d = _dirs(cfg)
    kind = kind or cfg.ae_kind
    path = d["global"] / ("autoencoder.ckpt" if kind == cfg.ae_kind else f"autoencoder_{kind}.ckpt")
    if path.exists():
        return load_autoencoder(path)
    if kind == "identity_passthrough":
        ae = build_autoencoder("identity_passthrough", cfg.resolution)
        save_autoencoder(ae, path)
        return ae
    proxy = load_corpus_archive(d["shards"] / "proxy.bin", cfg.resolution)
    ae_cfg = dataclasses.replace(cfg.ae_config(), kind=kind)
    result = train_autoencoder(proxy, ae_cfg)
    save_autoencoder(result.ae, path, seed=ae_cfg.seed)
    _write_json(
        d["global"] / f"autoencoder_{kind}.json",
        {"recon_error": result.recon_error, "epochs": ae_cfg.epochs, "kind": kind},
    )
    return result.ae


def stage_synthesize(
    cfg: ExperimentConfig,
    variant: str | None = None,
    ae_kind: str | None = None,
    use_perturbed: bool = True,
    coreset_variant: str | None = "same",
) -> dict:
    """Optimize latents per client and write the transmitted archives."""
    d = _dirs(cfg)
    if coreset_variant == "same":
        coreset_variant = variant
    cs_dir = _coreset_dir(d, coreset_variant)
    out_dir = _distillate_dir(d, variant)
    ae = _ensure_autoencoder(cfg, kind=ae_kind)
    diag = {}
    for cid in _client_ids(cfg):
        try:
            cs, _ = coreset_mod.load_coreset_archive(cs_dir / f"client_{cid:03d}.bin")
            if use_perturbed:
                perturbed = _load_images(cs_dir / f"client_{cid:03d}.perturbed.bin")
            else:
                perturbed = [p.pixels for p in cs.patches]
            model = load_checkpoint(d["models"] / f"client_{cid:03d}.ckpt")
            dset = synthesize_distillates(
                cs, perturbed, ae, model, cfg.synthesis_config(cid), client_id=cid
            )
            payload = serialize_distillates(dset, out_dir / f"client_{cid:03d}.bin")
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"stage synthesize, client {cid}: {exc}") from exc
        trace = [float(np.mean(epoch)) for epoch in dset.loss_trace]
        diag[str(cid)] = {
            "count": len(dset.distillates),
            "payload_bytes": payload,
            "loss_first": trace[0] if trace else None,
            "loss_last": trace[-1] if trace else None,
        }
    _write_json(out_dir / "synthesis.json", diag)
    return diag


def stage_server_train(
    cfg: ExperimentConfig,
    method: str = MAIN_METHOD,
    variant: str | None = None,
    ae_kind: str | None = None,
) -> dict:
    d = _dirs(cfg)
    try:
        sets = [
            load_distillates(_distillate_dir(d, variant) / f"client_{cid:03d}.bin")
            for cid in _client_ids(cfg)
        ]
        combined = aggregate(sets)
        ae = _ensure_autoencoder(cfg, kind=ae_kind)
        eval_data = load_corpus_archive(d["shards"] / "eval.bin", cfg.resolution)
        result = train_server(
            combined,
            ae,
            cfg.arch,
            cfg.server_config(method),
            eval_data=eval_data,
            eval_every=cfg.eval_every if cfg.eval_every > 0 else cfg.t_trn,
        )
        save_checkpoint(result.model, d["global"] / f"global_{method}.ckpt")
        trace_lines = ["epoch\tloss\taccuracy"]
        acc_by_epoch = dict(result.accuracy_trace)
        for epoch, loss in enumerate(result.epoch_losses, start=1):
            acc = acc_by_epoch.get(epoch, "")
            trace_lines.append(f"{epoch}\t{loss!r}\t{acc!r}" if acc != "" else f"{epoch}\t{loss!r}\t")
        (d["global"] / f"trace_{method}.tsv").write_text("\n".join(trace_lines) + "\n", encoding="utf-8")
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"stage serve-train ({method}): {exc}") from exc
    accuracy = result.accuracy_trace[-1][1] if result.accuracy_trace else float("nan")
    return {"method": method, "accuracy": accuracy, "final_loss": result.epoch_losses[-1]}


def stage_evaluate(cfg: ExperimentConfig) -> dict:
    """Top-1 accuracy of every trained global checkpoint on the eval split."""
    d = _dirs(cfg)
    eval_data = load_corpus_archive(d["shards"] / "eval.bin", cfg.resolution)
    out = {}
    ckpts = sorted(d["global"].glob("global_*.ckpt"))
    if not ckpts:
        raise StageError("stage evaluate: no global checkpoints found; run serve-train first")
    for ckpt in ckpts:
        method = ckpt.stem[len("global_"):]
        out[method] = evaluate(load_checkpoint(ckpt), eval_data)
    _write_json(d["reports"] / "evaluate.json", out)
    return out


def _decoded_for_privacy(cfg: ExperimentConfig, variant: str | None, ae: Autoencoder) -> tuple[list, list]:
    """Originals and server-side decoded reconstructions, paired across clients."""
    d = _dirs(cfg)
    originals = []
    decoded = []
    for cid in _client_ids(cfg):
        cs, _ = coreset_mod.load_coreset_archive(_coreset_dir(d, variant) / f"client_{cid:03d}.bin")
        dset = load_distillates(_distillate_dir(d, variant) / f"client_{cid:03d}.bin")
        if len(dset.distillates) != len(cs.patches):
            raise StageError(f"privacy pairing mismatch for client {cid}")
        originals.extend(cs.patches)
        decoded.extend(ae.decode(np.stack([dd.latent for dd in dset.distillates])))
    return originals, decoded


def stage_privacy(cfg: ExperimentConfig, rows: list[PrivacyRow] | None = None) -> list[PrivacyRow]:
    """PSNR/SSIM of server-side reconstructions against core-set originals."""
    d = _dirs(cfg)
    ae = _ensure_autoencoder(cfg)
    originals, decoded = _decoded_for_privacy(cfg, None, ae)
    cs_all = coreset_mod.CoreSet(patches=originals, ipc=cfg.ipc)
    rep = privacy_report(cs_all, decoded, config={"lambda": cfg.fourier_lambda})
    out = rows if rows is not None else []
    out.append(
        PrivacyRow(
            method=MAIN_METHOD,
            params={"lambda": cfg.fourier_lambda},
            mean_psnr=rep.mean_psnr,
            mean_ssim=rep.mean_ssim,
            n_pairs=len(rep.psnr_values),
        )
    )
    _write_json(d["reports"] / "privacy.json", {"rows": [r.to_dict() for r in out]})
    return out


# --------------------------------------------------------------------------
# full pipeline


def _timed(stage_seconds: dict, name: str, fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    stage_seconds[name] = round(time.perf_counter() - start, 3)
    return out


def run_pipeline(cfg: ExperimentConfig) -> ExperimentReport:
    """Execute the full pipeline plus toggled baselines; write report.json."""
    cfg.validate()
    set_backend_deterministic(cfg.deterministic)
    d = _dirs(cfg)
    for path in d.values():
        path.mkdir(parents=True, exist_ok=True)

    report = ExperimentReport(config_echo=cfg.to_dict())
    times = report.stage_seconds

    partition_info = _timed(times, "partition", stage_partition, cfg)
    report.client_diagnostics["partition"] = {
        k: partition_info[k] for k in ("train_size", "eval_size", "proxy_size", "n_classes")
    }
    local_diag = _timed(times, "train_local", stage_train_local, cfg)
    report.client_diagnostics["local"] = local_diag

    coreset_diag = _timed(times, "coreset", stage_coreset, cfg)
    report.client_diagnostics["coreset"] = coreset_diag
    _timed(times, "perturb", stage_perturb, cfg)
    syn_diag = _timed(times, "synthesize", stage_synthesize, cfg)
    report.client_diagnostics["synthesis"] = syn_diag
    main_out = _timed(times, "serve_train", stage_server_train, cfg)

    payload_per_client = [syn_diag[str(cid)]["payload_bytes"] for cid in _client_ids(cfg)]
    model_bytes = _read_json(d["models"] / "local_train.json")["0"]["checkpoint_bytes"]
    report.comm = comm_cost(
        int(np.mean(payload_per_client)), model_bytes, per_client_payload_bytes=payload_per_client
    )
    report.methods.append(
        MethodResult(
            name=MAIN_METHOD,
            accuracy=main_out["accuracy"],
            payload_bytes=int(np.mean(payload_per_client)),
            params={"lambda": cfg.fourier_lambda, "ae_kind": cfg.ae_kind},
        )
    )
    privacy_rows = _timed(times, "privacy", stage_privacy, cfg)

    if cfg.baseline_fedavg:
        _timed(times, "fedavg", _run_fedavg, cfg, report)
    if cfg.baseline_random_selection:
        _timed(times, "random_selection", _run_random_selection, cfg, report)
    if cfg.baseline_no_ae:
        _timed(times, "no_ae", _run_no_ae, cfg, report)
    if cfg.baseline_noise:
        _timed(times, "noise", _run_noise, cfg, report, privacy_rows)
    if cfg.baseline_fedmix:
        _timed(times, "fedmix", _run_fedmix, cfg, report, privacy_rows)
    for lam in cfg.lambda_sweep_values():
        _timed(times, f"lambda_{lam}", _run_lambda_variant, cfg, report, privacy_rows, lam)

    report.privacy = privacy_rows
    _write_json(d["reports"] / "privacy.json", {"rows": [r.to_dict() for r in privacy_rows]})
    _write_json(d["reports"] / "report.json", report.to_dict())
    emit_report(report, d["reports"])
    return report


def _run_fedavg(cfg: ExperimentConfig, report: ExperimentReport) -> None:
    d = _dirs(cfg)
    models = [load_checkpoint(d["models"] / f"client_{cid:03d}.ckpt") for cid in _client_ids(cfg)]
    avg = fedavg_oneshot(models)
    bytes_written = save_checkpoint(avg, d["global"] / "global_fedavg.ckpt")
    eval_data = load_corpus_archive(d["shards"] / "eval.bin", cfg.resolution)
    report.methods.append(
        MethodResult(
            name="fedavg",
            accuracy=evaluate(avg, eval_data),
            payload_bytes=bytes_written,
            params={"upload": "model parameters"},
        )
    )


def _run_random_selection(cfg: ExperimentConfig, report: ExperimentReport) -> None:
    variant = "random_selection"
    stage_coreset(cfg, variant=variant)
    stage_perturb(cfg, variant=variant)
    diag = stage_synthesize(cfg, variant=variant)
    out = stage_server_train(cfg, method=variant, variant=variant)
    payload = int(np.mean([diag[str(cid)]["payload_bytes"] for cid in _client_ids(cfg)]))
    report.methods.append(
        MethodResult(name=variant, accuracy=out["accuracy"], payload_bytes=payload, params={})
    )


def _run_no_ae(cfg: ExperimentConfig, report: ExperimentReport) -> None:
    variant = "no_ae"
    diag = stage_synthesize(cfg, variant=variant, ae_kind="identity_passthrough", coreset_variant=None)
    out = stage_server_train(cfg, method=variant, variant=variant, ae_kind="identity_passthrough")
    payload = int(np.mean([diag[str(cid)]["payload_bytes"] for cid in _client_ids(cfg)]))
    report.methods.append(
        MethodResult(
            name=variant, accuracy=out["accuracy"], payload_bytes=payload,
            params={"ae_kind": "identity_passthrough"},
        )
    )


def _run_noise(cfg: ExperimentConfig, report: ExperimentReport, privacy_rows: list[PrivacyRow]) -> None:
    """Latent-noise baseline: no Fourier init, z <- (1-p) z + s e before upload."""
    d = _dirs(cfg)
    base_variant = "noise_base"
    stage_synthesize(cfg, variant=base_variant, use_perturbed=False, coreset_variant=None)
    ae = _ensure_autoencoder(cfg)
    eval_data = load_corpus_archive(d["shards"] / "eval.bin", cfg.resolution)
    for p in cfg.noise_p_values():
        method = f"noise_p{p:g}"
        variant = f"noise_p{p:g}"
        payloads = []
        originals = []
        decoded = []
        for cid in _client_ids(cfg):
            dset = load_distillates(_distillate_dir(d, base_variant) / f"client_{cid:03d}.bin")
            noise_cfg = NoiseConfig(
                p=p,
                s=cfg.noise_s,
                distribution=cfg.noise_dist,
                seed=derive_seed(cfg.master_seed, "noise", f"{p:g}", cid),
            )
            for dd in dset.distillates:
                dd.latent = noise_perturb(dd.latent, dataclasses.replace(
                    noise_cfg, seed=derive_seed(noise_cfg.seed, dd.origin[2])
                ))
            payloads.append(serialize_distillates(dset, _distillate_dir(d, variant) / f"client_{cid:03d}.bin"))
            cs, _ = coreset_mod.load_coreset_archive(_coreset_dir(d, None) / f"client_{cid:03d}.bin")
            originals.extend(cs.patches)
            decoded.extend(ae.decode(np.stack([dd.latent for dd in dset.distillates])))
        out = stage_server_train(cfg, method=method, variant=variant)
        report.methods.append(
            MethodResult(
                name=method,
                accuracy=out["accuracy"],
                payload_bytes=int(np.mean(payloads)),
                params={"p": p, "s": cfg.noise_s, "distribution": cfg.noise_dist},
            )
        )
        rep = privacy_report(
            coreset_mod.CoreSet(patches=originals, ipc=cfg.ipc), decoded,
            config={"p": p, "s": cfg.noise_s},
        )
        privacy_rows.append(
            PrivacyRow(
                method=method,
                params={"p": p, "s": cfg.noise_s, "distribution": cfg.noise_dist},
                mean_psnr=rep.mean_psnr,
                mean_ssim=rep.mean_ssim,
                n_pairs=len(rep.psnr_values),
            )
        )


def _run_fedmix(cfg: ExperimentConfig, report: ExperimentReport, privacy_rows: list[PrivacyRow]) -> None:
    """Pair-averaging baseline: upload means of two real patches, no distiller."""
    d = _dirs(cfg)
    info = _read_json(d["shards"] / "partition.json")
    n_classes = info["n_classes"]
    identity = _ensure_autoencoder(cfg, kind="identity_passthrough")
    variant = "fedmix"
    payloads = []
    psnr_pairs: list[tuple[np.ndarray, np.ndarray]] = []
    sets = []
    for cid in _client_ids(cfg):
        cs, _ = coreset_mod.load_coreset_archive(_coreset_dir(d, None) / f"client_{cid:03d}.bin")
        mix = fedmix_synthesize(cs, n_classes, seed=derive_seed(cfg.master_seed, "fedmix", cid))
        distillates = [
            Distillate(latent=img, soft_label=lab, origin=(cid, int(np.argmax(lab.probs)), k))
            for k, (img, lab) in enumerate(zip(mix.images, mix.soft_labels))
        ]
        dset = DistillateSet(
            client_id=cid,
            distillates=distillates,
            latent_shape=identity.latent_shape,
            num_classes=n_classes,
            ae_hash=identity.config_hash(),
            seed=cfg.master_seed,
        )
        payloads.append(serialize_distillates(dset, _distillate_dir(d, variant) / f"client_{cid:03d}.bin"))
        sets.append(dset)
        for (i, j), img in zip(mix.pairs, mix.images):
            psnr_pairs.append((cs.patches[i].pixels, img))
            psnr_pairs.append((cs.patches[j].pixels, img))
    out = stage_server_train(cfg, method=variant, variant=variant, ae_kind="identity_passthrough")
    report.methods.append(
        MethodResult(
            name=variant,
            accuracy=out["accuracy"],
            payload_bytes=int(np.mean(payloads)),
            params={"synthesis": "pair averaging"},
        )
    )
    from .metrics import psnr as psnr_fn, ssim as ssim_fn

    psnr_vals = [psnr_fn(a, b) for a, b in psnr_pairs]
    ssim_vals = [ssim_fn(a, b) for a, b in psnr_pairs]
    privacy_rows.append(
        PrivacyRow(
            method=variant,
            params={"synthesis": "pair averaging"},
            mean_psnr=float(np.mean(psnr_vals)),
            mean_ssim=float(np.mean(ssim_vals)),
            n_pairs=len(psnr_vals),
        )
    )


def _run_lambda_variant(
    cfg: ExperimentConfig, report: ExperimentReport, privacy_rows: list[PrivacyRow], lam: float
) -> None:
    """Re-run perturb+synthesize+train at another lambda (privacy sweep row)."""
    d = _dirs(cfg)
    variant = f"lambda_{lam:g}"
    cs_dir = _coreset_dir(d, variant)
    cs_dir.mkdir(parents=True, exist_ok=True)
    for cid in _client_ids(cfg):
        src = _coreset_dir(d, None) / f"client_{cid:03d}.bin"
        (cs_dir / f"client_{cid:03d}.bin").write_bytes(src.read_bytes())
    stage_perturb(cfg, variant=variant, lam=lam)
    diag = stage_synthesize(cfg, variant=variant)
    method = f"distillate_lambda{lam:g}"
    out = stage_server_train(cfg, method=method, variant=variant)
    payload = int(np.mean([diag[str(cid)]["payload_bytes"] for cid in _client_ids(cfg)]))
    report.methods.append(
        MethodResult(name=method, accuracy=out["accuracy"], payload_bytes=payload, params={"lambda": lam})
    )
    ae = _ensure_autoencoder(cfg)
    originals, decoded = _decoded_for_privacy(cfg, variant, ae)
    rep = privacy_report(coreset_mod.CoreSet(patches=originals, ipc=cfg.ipc), decoded)
    privacy_rows.append(
        PrivacyRow(
            method=MAIN_METHOD,
            params={"lambda": lam},
            mean_psnr=rep.mean_psnr,
            mean_ssim=rep.mean_ssim,
            n_pairs=len(rep.psnr_values),
        )
    )


# --------------------------------------------------------------------------
# report emission


def _format_table(rows: list[list[str]]) -> str:
    return "\n".join("\t".join(row) for row in rows) + "\n"


def emit_report(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Write tables (byte-stable across re-emission) and plots for a report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    acc_rows = [["method", "accuracy", "payload_bytes", "params"]]
    for m in report.methods:
        acc_rows.append([m.name, repr(m.accuracy), str(m.payload_bytes), json.dumps(m.params, sort_keys=True)])
    path = out_dir / "accuracy.tsv"
    path.write_text(_format_table(acc_rows), encoding="utf-8")
    written.append(path)

    priv_rows = [["method", "params", "mean_psnr", "mean_ssim", "n_pairs"]]
    for p in report.privacy:
        priv_rows.append(
            [p.method, json.dumps(p.params, sort_keys=True), repr(p.mean_psnr), repr(p.mean_ssim), str(p.n_pairs)]
        )
    path = out_dir / "privacy.tsv"
    path.write_text(_format_table(priv_rows), encoding="utf-8")
    written.append(path)

    if report.comm:
        comm_rows = [["field", "value"]]
        for key, value in sorted(report.comm.to_dict().items()):
            comm_rows.append([key, json.dumps(value)])
        path = out_dir / "comm.tsv"
        path.write_text(_format_table(comm_rows), encoding="utf-8")
        written.append(path)

    written.extend(_emit_plots(report, out_dir))
    return written


def _emit_plots(report: ExperimentReport, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if report.methods:
        fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(report.methods)), 3.2), constrained_layout=True)
        names = [m.name for m in report.methods]
        accs = [m.accuracy for m in report.methods]
        ax.bar(names, accs, color="#4878b0")
        ax.set_ylabel("global accuracy")
        ax.set_ylim(0, 1)
        ax.tick_params(axis="x", rotation=30)
        path = out_dir / "accuracy_by_method.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    lam_rows = sorted(
        (r for r in report.privacy if "lambda" in r.params),
        key=lambda r: r.params["lambda"],
    )
    if lam_rows:
        fig, ax = plt.subplots(figsize=(4.5, 3.2), constrained_layout=True)
        ax.plot([r.params["lambda"] for r in lam_rows], [r.mean_psnr for r in lam_rows], marker="o")
        ax.set_xlabel("amplitude mixing coefficient")
        ax.set_ylabel("mean PSNR (dB)")
        ax.grid(alpha=0.3)
        path = out_dir / "psnr_vs_lambda.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    else:
        warnings.warn("no Fourier privacy rows; skipping the PSNR plot", RuntimeWarning, stacklevel=2)
    return written


def write_sample_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Write a config file populated with defaults plus overrides."""
    cfg = ExperimentConfig(**overrides)
    Path(path).write_text(config_to_text(cfg), encoding="utf-8")
    return cfg
