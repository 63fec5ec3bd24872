"""Multi-task pretraining: batch assembly, alternating generator/discriminator
updates, ablation toggles, checkpointing and metrics logging.

Determinism contract: module initialization is seeded from the config seed;
batch composition for step t draws from generator stream (seed, BATCH, t);
the sample drawn into slot s of step t is preprocessed with stream
(seed, SAMPLE, t * batch_size + s); latent vectors come from a torch
generator whose state persists through checkpoints.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import (
    CheckpointManifest,
    config_digest,
    read_checkpoint,
    write_checkpoint,
)
from .encoder import DisentangleHead, DisentangledFeatures, SwinEncoder3D, make_variant
from .errors import CheckpointMismatchError, ConfigError, CorruptCheckpointError
from .phantom import load_manifest
from .pretext import (
    ContrastiveConfig,
    LatentDiscriminator,
    LossReport,
    LossWeights,
    MetadataHead,
    PSpaceConfig,
    PSpaceMapper,
    ReconstructionHead,
    RegionHead,
    Translator,
    adversarial_losses,
    loss_contrastive,
    loss_metadata,
    loss_recon,
    loss_region,
    total_pretrain_loss,
)
from .preprocess import MaskSpec, PretrainSample, preprocess_sample
from .volume import ScanMetadata, load_volume

# stream tags for the (seed, tag, index) generator derivation
_STREAM_BATCH = 1
_STREAM_SAMPLE = 2


@dataclass
class PretextToggles:
    """Ablation switches for the four objectives."""

    mir: bool = True
    meta: bool = True
    tran: bool = True
    con: bool = True


@dataclass
class PretrainConfig:
    manifest: str = ""
    variant: str = "tiny"
    weights: LossWeights = field(default_factory=LossWeights)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    pspace: PSpaceConfig = field(default_factory=PSpaceConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    toggles: PretextToggles = field(default_factory=PretextToggles)
    crop_edge: int = 96
    batch_size: int = 8
    steps: int = 100
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    weight_decay: float = 0.01
    cosine_decay: bool = False
    seed: int = 0
    n_regions: int = 4
    projection_dim: int = 128
    checkpoint_interval: int = 100
    out_dir: str = "runs/pretrain"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.toggles.con and self.batch_size < 2:
            raise ConfigError(
                "batch_size must be >= 2 when the contrastive task is enabled"
            )
        if self.pspace.p_dim != self.projection_dim:
            raise ConfigError(
                f"pspace.p_dim {self.pspace.p_dim} must equal "
                f"projection_dim {self.projection_dim}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetadataNormalizer:
    """z-scores for (log TR, log TE, FA), computed on the training corpus."""

    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def fit(cls, triples: list[tuple[float, float, float]]) -> "MetadataNormalizer":
        arr = np.asarray(triples, dtype=np.float64)
        feats = np.stack(
            [np.log(arr[:, 0]), np.log(arr[:, 1]), arr[:, 2]], axis=1
        )
        mean = feats.mean(axis=0)
        std = feats.std(axis=0)
        std[std < 1e-8] = 1.0
        return cls(mean=tuple(mean.tolist()), std=tuple(std.tolist()))

    def normalize(self, tr_ms: float, te_ms: float, fa_deg: float) -> np.ndarray:
        feats = np.array([math.log(tr_ms), math.log(te_ms), fa_deg])
        return (feats - np.asarray(self.mean)) / np.asarray(self.std)


class PretrainModules(nn.Module):
    """All trainable pieces of the pretraining graph."""

    def __init__(self, cfg: PretrainConfig):
        super().__init__()
        encoder_cfg = make_variant(cfg.variant, projection_dim=cfg.projection_dim)
        self.encoder = SwinEncoder3D(encoder_cfg)
        self.disentangle = DisentangleHead(
            encoder_cfg.bottleneck_channels, cfg.projection_dim
        )
        self.recon_head = ReconstructionHead(encoder_cfg)
        self.mapper = PSpaceMapper(cfg.pspace)
        self.translator = Translator(encoder_cfg, cfg.projection_dim)
        self.discriminator = LatentDiscriminator(cfg.projection_dim)
        self.metadata_head = MetadataHead(cfg.projection_dim)
        self.region_head = RegionHead(cfg.projection_dim, cfg.n_regions)

    def generator_parameters(self):
        for name, param in self.named_parameters():
            if not name.startswith("discriminator."):
                yield param


@dataclass
class TrainState:
    step: int
    modules: PretrainModules
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    torch_rng: torch.Generator
    normalizer: MetadataNormalizer
    last_losses: dict = field(default_factory=dict)


class PretrainCorpus:
    """Flattened view of a phantom-corpus manifest, with an in-memory cache."""

    def __init__(self, manifest_path):
        manifest_path = Path(manifest_path)
        self.root = manifest_path.parent
        self.manifest = load_manifest(manifest_path)
        self.entries = []
        self.held_out = []
        for case in self.manifest["cases"]:
            for j, seq in enumerate(case["sequences"]):
                entry = {
                    "subject": case["case_id"],
                    "sequence_index": j,
                    "path": seq["path"],
                    "region": case["region_label"],
                    "tr_ms": seq["tr_ms"],
                    "te_ms": seq["te_ms"],
                    "flip_angle_deg": seq["flip_angle_deg"],
                }
                if case["split"] == "train":
                    self.entries.append(entry)
                else:
                    self.held_out.append(entry)
        if not self.entries:
            raise ConfigError("manifest has no training-split sequences")
        self._cache: dict[str, object] = {}

    def volume(self, entry):
        path = entry["path"]
        if path not in self._cache:
            self._cache[path] = load_volume(self.root / path)
        return self._cache[path]

    def metadata_triples(self):
        return [(e["tr_ms"], e["te_ms"], e["flip_angle_deg"]) for e in self.entries]


def build_state(cfg: PretrainConfig, corpus: PretrainCorpus | None = None) -> TrainState:
    torch.manual_seed(cfg.seed)
    modules = PretrainModules(cfg)
    opt_g = torch.optim.AdamW(
        modules.generator_parameters(), lr=cfg.lr_g, weight_decay=cfg.weight_decay
    )
    opt_d = torch.optim.AdamW(
        modules.discriminator.parameters(), lr=cfg.lr_d, weight_decay=cfg.weight_decay
    )
    torch_rng = torch.Generator()
    torch_rng.manual_seed(cfg.seed)
    if corpus is not None:
        normalizer = MetadataNormalizer.fit(corpus.metadata_triples())
    else:
        normalizer = MetadataNormalizer()
    return TrainState(
        step=0,
        modules=modules,
        opt_g=opt_g,
        opt_d=opt_d,
        torch_rng=torch_rng,
        normalizer=normalizer,
    )


def sample_to_entry_rng(cfg: PretrainConfig, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng(
        [cfg.seed, _STREAM_SAMPLE, step * cfg.batch_size + slot]
    )


def make_batch(corpus: PretrainCorpus, cfg: PretrainConfig, step: int) -> list[PretrainSample]:
    """Draw one batch; with the contrastive task on, force >= 2 distinct subjects."""
    rng = np.random.default_rng([cfg.seed, _STREAM_BATCH, step])
    n = len(corpus.entries)
    indices = rng.integers(0, n, size=cfg.batch_size)
    if cfg.toggles.con:
        subjects = {corpus.entries[i]["subject"] for i in indices}
        tries = 0
        while len(subjects) < 2 and tries < 100:
            indices[-1] = rng.integers(0, n)
            subjects = {corpus.entries[i]["subject"] for i in indices}
            tries += 1
        if len(subjects) < 2:
            raise ConfigError("corpus does not contain two distinct training subjects")

    batch = []
    for slot, idx in enumerate(indices):
        entry = corpus.entries[int(idx)]
        volume = corpus.volume(entry)
        meta = ScanMetadata(
            tr_ms=entry["tr_ms"],
            te_ms=entry["te_ms"],
            flip_angle_deg=entry["flip_angle_deg"],
        )
        sample = preprocess_sample(
            volume,
            meta,
            region=entry["region"],
            mask=cfg.mask,
            rng=sample_to_entry_rng(cfg, step, slot),
            crop_edge=cfg.crop_edge,
            subject_id=entry["subject"],
            sequence_index=entry["sequence_index"],
        )
        batch.append(sample)
    return batch


def _batch_tensors(batch: list[PretrainSample], normalizer: MetadataNormalizer):
    crops = torch.from_numpy(np.stack([s.crop.voxels for s in batch]))[:, None]
    masked = torch.from_numpy(np.stack([s.masked_crop.voxels for s in batch]))[:, None]
    targets = torch.from_numpy(
        np.stack(
            [
                normalizer.normalize(
                    s.metadata.tr_ms, s.metadata.te_ms, s.metadata.flip_angle_deg
                )
                for s in batch
            ]
        ).astype(np.float32)
    )
    regions = torch.tensor([s.region_label for s in batch], dtype=torch.long)
    subjects = [s.subject_id for s in batch]
    return crops.float(), masked.float(), targets, regions, subjects


def _contrastive_term(feats, fake_feats, subjects, cfg: PretrainConfig):
    losses = []
    for i in range(len(subjects)):
        neg_idx = [j for j, subj in enumerate(subjects) if subj != subjects[i]]
        if not neg_idx:
            continue
        losses.append(
            loss_contrastive(
                feats.f_ana[i],
                fake_feats.f_ana[i],
                feats.f_ana[neg_idx],
                cfg.contrastive,
            )
        )
    if not losses:
        raise ConfigError("no valid negatives in batch; need >= 2 distinct subjects")
    return torch.stack(losses).mean()


def _set_lr(optimizer: torch.optim.Optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr


def train_step(
    batch: list[PretrainSample], state: TrainState, cfg: PretrainConfig
) -> tuple[TrainState, LossReport]:
    """One discriminator update (if enabled) then one generator-side update.

    All losses are evaluated from pre-update parameters and checked finite
    before either optimizer runs, so a non-finite loss aborts the step with
    the state unmodified.
    """
    modules = state.modules
    modules.train()
    toggles = cfg.toggles
    crops, masked, targets, regions, subjects = _batch_tensors(batch, state.normalizer)

    pyramid = modules.encoder(masked)
    feats = modules.disentangle(pyramid)

    parts: dict[str, torch.Tensor] = {}
    d_loss = None
    if toggles.mir:
        parts["recon"] = loss_recon(crops, modules.recon_head(pyramid))
    if toggles.tran or toggles.con:
        z = torch.randn(
            len(batch), cfg.pspace.z_dim, generator=state.torch_rng
        )
        f_p = modules.mapper(z)
        synthetic = modules.translator(feats.f_ana, feats.f_seq, f_p, pyramid)
        fake_feats = modules.disentangle(modules.encoder(synthetic))
        if toggles.tran:
            g_adv, d_loss = adversarial_losses(feats, fake_feats, modules.discriminator)
            parts["g_adv"] = g_adv
            parts["d_adv"] = d_loss
        if toggles.con:
            parts["contrastive"] = _contrastive_term(feats, fake_feats, subjects, cfg)
    if toggles.meta:
        parts["metadata_mae"] = loss_metadata(
            modules.metadata_head(feats.f_seq), targets
        )
        parts["region_ce"] = loss_region(
            modules.region_head(feats.f_ana), regions, cfg.n_regions
        )

    # finiteness gate before any state mutation
    total, report = total_pretrain_loss(parts, cfg.weights, step=state.step + 1)

    if cfg.cosine_decay:
        scale = 0.5 * (1.0 + math.cos(math.pi * state.step / cfg.steps))
        _set_lr(state.opt_g, cfg.lr_g * scale)
        _set_lr(state.opt_d, cfg.lr_d * scale)

    # Both backward passes run against pre-update parameters; updates are then
    # applied discriminator-first. Stepping D before the generator backward
    # would invalidate the g_adv graph (in-place parameter mutation).
    state.opt_g.zero_grad(set_to_none=True)
    state.opt_d.zero_grad(set_to_none=True)
    if torch.is_tensor(total):
        total.backward()
        modules.discriminator.zero_grad(set_to_none=True)
    if d_loss is not None:
        d_loss.backward()
        state.opt_d.step()
    if torch.is_tensor(total):
        state.opt_g.step()

    state.step += 1
    state.last_losses = report.as_dict()
    return state, report


def evaluate_metadata(
    state: TrainState, corpus: PretrainCorpus, cfg: PretrainConfig, entries=None
) -> tuple[float, float]:
    """Held-out metadata MAE and the predict-the-training-mean baseline."""
    entries = entries if entries is not None else corpus.held_out
    if not entries:
        raise ConfigError("no held-out entries to evaluate")
    modules = state.modules
    modules.eval()

    train_targets = np.stack(
        [state.normalizer.normalize(tr, te, fa) for tr, te, fa in corpus.metadata_triples()]
    )
    train_mean = train_targets.mean(axis=0)

    preds, targets = [], []
    for i, entry in enumerate(entries):
        meta = ScanMetadata(
            tr_ms=entry["tr_ms"],
            te_ms=entry["te_ms"],
            flip_angle_deg=entry["flip_angle_deg"],
        )
        sample = preprocess_sample(
            corpus.volume(entry),
            meta,
            region=entry["region"],
            mask=cfg.mask,
            rng=np.random.default_rng([cfg.seed, 3, i]),
            crop_edge=cfg.crop_edge,
        )
        with torch.no_grad():
            x = torch.from_numpy(sample.masked_crop.voxels).float()[None, None]
            feats = modules.disentangle(modules.encoder(x))
            preds.append(modules.metadata_head(feats.f_seq)[0].numpy())
        targets.append(state.normalizer.normalize(meta.tr_ms, meta.te_ms, meta.flip_angle_deg))

    preds = np.stack(preds)
    targets = np.stack(targets)
    mae = float(np.abs(preds - targets).mean())
    baseline = float(np.abs(targets - train_mean).mean())
    return mae, baseline


# ---------------------------------------------------------------------------
# checkpoint plumbing


def _module_blocks(modules: nn.Module) -> dict[str, np.ndarray]:
    return {
        f"model/{name}": tensor.detach().cpu().numpy()
        for name, tensor in modules.state_dict().items()
    }


def _optimizer_blocks(prefix: str, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    blocks = {}
    state_dict = optimizer.state_dict()
    for idx, entry in state_dict["state"].items():
        for key, value in entry.items():
            if torch.is_tensor(value):
                blocks[f"{prefix}/{idx}/{key}"] = value.detach().cpu().numpy()
    return blocks


def _optimizer_meta(optimizer: torch.optim.Optimizer) -> list[dict]:
    groups = []
    for group in optimizer.state_dict()["param_groups"]:
        groups.append({k: v for k, v in group.items()})
    return groups


def _restore_optimizer(prefix: str, optimizer: torch.optim.Optimizer,
                       blocks: dict[str, np.ndarray], groups_meta: list[dict]):
    state: dict[int, dict] = {}
    for name, arr in blocks.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    optimizer.load_state_dict({"state": state, "param_groups": groups_meta})


def save_checkpoint(state: TrainState, path, cfg: PretrainConfig) -> Path:
    blocks = _module_blocks(state.modules)
    blocks.update(_optimizer_blocks("opt_g", state.opt_g))
    blocks.update(_optimizer_blocks("opt_d", state.opt_d))
    blocks["rng/torch"] = state.torch_rng.get_state().numpy()
    manifest = CheckpointManifest(
        config_digest=config_digest(cfg.to_dict()),
        step=state.step,
        losses=dict(state.last_losses),
        config=cfg.to_dict(),
        extra={
            "opt_g_groups": _optimizer_meta(state.opt_g),
            "opt_d_groups": _optimizer_meta(state.opt_d),
            "normalizer": asdict(state.normalizer),
        },
    )
    return write_checkpoint(path, manifest, blocks)


def _config_from_dict(data: dict) -> PretrainConfig:
    return PretrainConfig(
        manifest=data["manifest"],
        variant=data["variant"],
        weights=LossWeights(**data["weights"]),
        contrastive=ContrastiveConfig(**data["contrastive"]),
        pspace=PSpaceConfig(
            z_dim=data["pspace"]["z_dim"],
            mapper_widths=tuple(data["pspace"]["mapper_widths"]),
            p_dim=data["pspace"]["p_dim"],
        ),
        mask=MaskSpec(**data["mask"]),
        toggles=PretextToggles(**data["toggles"]),
        **{
            k: data[k]
            for k in (
                "crop_edge", "batch_size", "steps", "lr_g", "lr_d", "weight_decay",
                "cosine_decay", "seed", "n_regions", "projection_dim",
                "checkpoint_interval", "out_dir",
            )
        },
    )


def load_checkpoint(path, cfg: PretrainConfig | None = None) -> TrainState:
    """Restore a TrainState; verifies the digest when a config is supplied."""
    manifest, blocks = read_checkpoint(path)
    if config_digest(manifest.config) != manifest.config_digest:
        raise CorruptCheckpointError(
            f"{path}: embedded config does not reproduce the stored digest"
        )
    if cfg is not None and config_digest(cfg.to_dict()) != manifest.config_digest:
        raise CheckpointMismatchError(
            f"{path}: checkpoint config digest {manifest.config_digest[:12]}... does "
            "not match the supplied config"
        )
    stored_cfg = _config_from_dict(manifest.config)
    state = build_state(stored_cfg)
    model_state = {
        name[len("model/"):]: torch.from_numpy(arr.copy())
        for name, arr in blocks.items()
        if name.startswith("model/")
    }
    state.modules.load_state_dict(model_state)
    _restore_optimizer("opt_g", state.opt_g, blocks, manifest.extra["opt_g_groups"])
    _restore_optimizer("opt_d", state.opt_d, blocks, manifest.extra["opt_d_groups"])
    rng_state = torch.from_numpy(blocks["rng/torch"].copy())
    state.torch_rng.set_state(rng_state.to(torch.uint8))
    state.step = manifest.step
    state.last_losses = dict(manifest.losses)
    norm = manifest.extra["normalizer"]
    state.normalizer = MetadataNormalizer(
        mean=tuple(norm["mean"]), std=tuple(norm["std"])
    )
    return state


def run_pretraining(cfg: PretrainConfig) -> tuple[Path, Path]:
    """Execute cfg.steps training steps; returns (checkpoint path, metrics path)."""
    corpus = PretrainCorpus(cfg.manifest)  # raises IOError before any step
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    state = build_state(cfg, corpus)

    final_ckpt = out_dir / f"step{cfg.steps:06d}.ckpt"
    with open(metrics_path, "w") as metrics:
        for step in range(cfg.steps):
            start = time.monotonic()
            batch = make_batch(corpus, cfg, step)
            state, report = train_step(batch, state, cfg)
            record = report.as_dict()
            record["wall_clock_s"] = time.monotonic() - start
            metrics.write(json.dumps(record, sort_keys=True) + "\n")
            if state.step % cfg.checkpoint_interval == 0 or state.step == cfg.steps:
                save_checkpoint(state, out_dir / f"step{state.step:06d}.ckpt", cfg)
    if not final_ckpt.exists():
        save_checkpoint(state, final_ckpt, cfg)
    return final_ckpt, metrics_path
