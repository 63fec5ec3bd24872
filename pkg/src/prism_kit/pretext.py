"""The four self-supervised objectives and their heads.

Masked reconstruction (L1 against the unmasked crop), latent-guided image
translation with a least-squares adversarial game on disentangled features,
anatomy-invariant contrastive learning over unit-norm feature vectors, and
metadata prediction (TR/TE/FA regression on the sequence branch plus body
region classification on the anatomy branch).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import DisentangledFeatures, EncoderConfig, FeaturePyramid
from .errors import ConfigError, LabelError, NonFiniteLossError, ShapeError


@dataclass
class PSpaceConfig:
    """Latent acquisition-space mapping: z ~ N(0, I) -> feature vector."""

    z_dim: int = 64
    mapper_widths: tuple[int, ...] = (128, 128)
    p_dim: int = 128

    def __post_init__(self):
        if self.z_dim < 1 or self.p_dim < 1:
            raise ConfigError("z_dim and p_dim must be >= 1")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    include_positive_in_denominator: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


@dataclass
class LossWeights:
    recon: float = 1.0
    g_adv: float = 1.0
    d_adv: float = 1.0
    contrastive: float = 1.0
    metadata: float = 1.0
    region: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")


@dataclass
class LossReport:
    """Per-term pretext losses plus the weighted generator-side total."""

    recon: float = 0.0
    g_adv: float = 0.0
    d_adv: float = 0.0
    contrastive: float = 0.0
    metadata_mae: float = 0.0
    region_ce: float = 0.0
    total: float = 0.0
    step: int = 0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# heads


class PSpaceMapper(nn.Module):
    """MLP from the Gaussian latent into the acquisition feature space."""

    def __init__(self, cfg: PSpaceConfig):
        super().__init__()
        self.cfg = cfg
        widths = (cfg.z_dim,) + tuple(cfg.mapper_widths)
        layers = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(w_in, w_out), nn.GELU()]
        layers.append(nn.Linear(widths[-1], cfg.p_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.z_dim:
            raise ShapeError(f"latent dim {z.shape[-1]} != z_dim {self.cfg.z_dim}")
        return self.net(z)


def map_pspace(mapper: PSpaceMapper, z: torch.Tensor) -> torch.Tensor:
    return mapper(z)


class _UpsampleDecoder(nn.Module):
    """Transposed-conv stack from the bottleneck grid back to input resolution."""

    def __init__(self, in_channels: int, n_ups: int, out_channels: int = 1):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(n_ups):
            c_out = max(8, c // 2)
            layers += [
                nn.ConvTranspose3d(c, c_out, kernel_size=2, stride=2),
                nn.InstanceNorm3d(c_out),
                nn.GELU(),
            ]
            c = c_out
        layers.append(nn.Conv3d(c, out_channels, kernel_size=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ReconstructionHead(nn.Module):
    """Lightweight transposed-convolution reconstruction of the full crop."""

    def __init__(self, encoder_cfg: EncoderConfig):
        super().__init__()
        n_ups = 4 + int(round(math.log2(encoder_cfg.patch_stride)))
        self.decoder = _UpsampleDecoder(encoder_cfg.bottleneck_channels, n_ups)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return self.decoder(pyramid.bottleneck)


class Translator(nn.Module):
    """Synthesize a re-contrasted crop from (f_ana, f_seq, f_p) and pyramid context.

    f_p modulates f_seq through a per-channel affine (scale, shift); the fused
    vector and f_ana are broadcast over the bottleneck grid, merged with it by
    a convolution, decoded to input resolution and squashed into [0, 1].
    """

    def __init__(self, encoder_cfg: EncoderConfig, p_dim: int):
        super().__init__()
        cb = encoder_cfg.bottleneck_channels
        self.p_dim = p_dim
        self.modulation = nn.Linear(p_dim, 2 * p_dim)
        self.style_proj = nn.Linear(p_dim, cb)
        self.anatomy_proj = nn.Linear(p_dim, cb)
        self.fuse = nn.Conv3d(3 * cb, cb, kernel_size=3, padding=1)
        n_ups = 4 + int(round(math.log2(encoder_cfg.patch_stride)))
        self.decoder = _UpsampleDecoder(cb, n_ups)

    def forward(
        self,
        f_ana: torch.Tensor,
        f_seq: torch.Tensor,
        f_p: torch.Tensor,
        pyramid: FeaturePyramid,
    ) -> torch.Tensor:
        if f_ana.shape[-1] != self.p_dim or f_seq.shape[-1] != self.p_dim:
            raise ShapeError("feature dimension does not match translator p_dim")
        if f_p.shape[-1] != self.p_dim:
            raise ShapeError(f"f_p dim {f_p.shape[-1]} != p_dim {self.p_dim}")
        scale, shift = self.modulation(f_p).chunk(2, dim=-1)
        fused = f_seq * (1.0 + scale) + shift

        grid = pyramid.bottleneck
        b, _, d, h, w = grid.shape
        style = self.style_proj(fused)[:, :, None, None, None].expand(-1, -1, d, h, w)
        anatomy = self.anatomy_proj(f_ana)[:, :, None, None, None].expand(-1, -1, d, h, w)
        merged = self.fuse(torch.cat([grid, anatomy, style], dim=1))
        return torch.sigmoid(self.decoder(merged))


def translate(
    translator: Translator,
    f_ana: torch.Tensor,
    f_seq: torch.Tensor,
    f_p: torch.Tensor,
    pyramid: FeaturePyramid,
) -> torch.Tensor:
    return translator(f_ana, f_seq, f_p, pyramid)


class LatentDiscriminator(nn.Module):
    """Feed-forward scorer on the concatenated (f_ana, f_seq) vector."""

    def __init__(self, p_dim: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * p_dim, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden // 2),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden // 2, 1),
        )

    def forward(self, feats: DisentangledFeatures) -> torch.Tensor:
        return self.net(torch.cat([feats.f_ana, feats.f_seq], dim=-1)).squeeze(-1)


class MetadataHead(nn.Module):
    """Regression head on f_seq predicting normalized (TR, TE, FA)."""

    def __init__(self, p_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(p_dim, hidden), nn.GELU(), nn.Linear(hidden, 3))

    def forward(self, f_seq: torch.Tensor) -> torch.Tensor:
        return self.net(f_seq)


class RegionHead(nn.Module):
    """Classification head on f_ana over scanned body regions."""

    def __init__(self, p_dim: int, n_regions: int, hidden: int = 64):
        super().__init__()
        self.n_regions = n_regions
        self.net = nn.Sequential(
            nn.Linear(p_dim, hidden), nn.GELU(), nn.Linear(hidden, n_regions)
        )

    def forward(self, f_ana: torch.Tensor) -> torch.Tensor:
        return self.net(f_ana)


# ---------------------------------------------------------------------------
# losses


def loss_recon(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute voxel difference between crop and reconstruction."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


def adversarial_losses(
    real: DisentangledFeatures,
    fake: DisentangledFeatures,
    discriminator: LatentDiscriminator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares adversarial pair.

    d_loss = 0.5 * mean[(D(real) - 1)^2 + D(fake)^2] on detached features,
    g_loss = 0.5 * mean[(D(fake) - 1)^2] with gradients into the generator.
    """
    detached_real = DisentangledFeatures(real.f_ana.detach(), real.f_seq.detach())
    detached_fake = DisentangledFeatures(fake.f_ana.detach(), fake.f_seq.detach())
    d_real = discriminator(detached_real)
    d_fake = discriminator(detached_fake)
    d_loss = 0.5 * (((d_real - 1.0) ** 2).mean() + (d_fake**2).mean())
    g_loss = 0.5 * ((discriminator(fake) - 1.0) ** 2).mean()
    return g_loss, d_loss


def loss_contrastive(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    cfg: ContrastiveConfig,
) -> torch.Tensor:
    """Anatomy-invariant contrastive loss.

    -log( exp(anchor.positive / t) / sum(exp(anchor.key / t)) ), the sum over
    the negatives and, by default, the positive. Accepts a single anchor (P,)
    with negatives (K, P) or a batch (B, P) with negatives (B, K, P); batch
    losses are mean-reduced.
    """
    if cfg.temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {cfg.temperature}")
    squeeze = anchor.ndim == 1
    if squeeze:
        anchor, positive, negatives = anchor[None], positive[None], negatives[None]
    if negatives.shape[-2] < 1:
        raise ShapeError("at least one negative is required")

    tau = cfg.temperature
    pos_logit = (anchor * positive).sum(-1) / tau                    # (B,)
    neg_logits = torch.einsum("bp,bkp->bk", anchor, negatives) / tau  # (B, K)
    if cfg.include_positive_in_denominator:
        logits = torch.cat([pos_logit[:, None], neg_logits], dim=1)
        loss = torch.logsumexp(logits, dim=1) - pos_logit
    else:
        loss = torch.logsumexp(neg_logits, dim=1) - pos_logit
    return loss.mean()


def loss_metadata(predictions: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over batch x 3 normalized acquisition components."""
    if predictions.shape != targets.shape:
        raise ShapeError(
            f"shape mismatch: {tuple(predictions.shape)} vs {tuple(targets.shape)}"
        )
    return (predictions - targets).abs().mean()


def loss_region(logits: torch.Tensor, labels: torch.Tensor, n_regions: int) -> torch.Tensor:
    """Mean softmax cross-entropy over body-region labels."""
    if logits.shape[-1] != n_regions:
        raise ShapeError(f"expected {n_regions} logits, got {logits.shape[-1]}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_regions):
        raise LabelError(
            f"region labels must lie in [0, {n_regions}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels)


_GENERATOR_TERMS = (
    ("recon", "recon"),
    ("g_adv", "g_adv"),
    ("contrastive", "contrastive"),
    ("metadata_mae", "metadata"),
    ("region_ce", "region"),
)


def total_pretrain_loss(
    parts: dict[str, torch.Tensor | float], weights: LossWeights, step: int = 0
) -> tuple[torch.Tensor | float, LossReport]:
    """Weighted sum of generator-side terms; d_adv is reported, not summed.

    Any non-finite part raises NonFiniteLossError carrying the term name.
    """
    def scalar(value) -> float:
        return float(value.detach()) if torch.is_tensor(value) else float(value)

    for name, value in parts.items():
        if not math.isfinite(scalar(value)):
            raise NonFiniteLossError(name)
    total = 0.0
    for part_name, weight_name in _GENERATOR_TERMS:
        if part_name in parts:
            total = total + getattr(weights, weight_name) * parts[part_name]
    report = LossReport(
        recon=scalar(parts.get("recon", 0.0)),
        g_adv=scalar(parts.get("g_adv", 0.0)),
        d_adv=scalar(parts.get("d_adv", 0.0)),
        contrastive=scalar(parts.get("contrastive", 0.0)),
        metadata_mae=scalar(parts.get("metadata_mae", 0.0)),
        region_ce=scalar(parts.get("region_ce", 0.0)),
        total=scalar(total),
        step=step,
    )
    return total, report
