"""Hierarchical 3D windowed-attention encoder with a dual-branch head.

Four stages of shifted-window attention blocks over a strided patch
embedding; each stage halves spatial resolution, for a total downsample of
patch_stride * 2**4 = 32. The bottleneck is pooled and projected by two
independent heads into unit-norm anatomical and sequence-specific vectors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

VARIANT_NAMES = ("tiny", "B-scaled", "L-scaled", "H-scaled")


@dataclass
class EncoderConfig:
    patch_stride: int = 2
    stage_depths: tuple[int, int, int, int] = (2, 2, 2, 2)
    base_channels: int = 24
    window_edge: int = 6
    heads_per_stage: tuple[int, int, int, int] = (3, 6, 12, 24)
    variant_name: str = "B-scaled"
    in_channels: int = 1
    projection_dim: int = 128
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if len(self.stage_depths) != 4 or len(self.heads_per_stage) != 4:
            raise ConfigError("exactly 4 stages are required")
        if self.patch_stride < 1 or self.base_channels < 1 or self.window_edge < 1:
            raise ConfigError("patch_stride, base_channels, window_edge must be >= 1")
        for k, heads in enumerate(self.heads_per_stage):
            if (self.base_channels * 2**k) % heads != 0:
                raise ConfigError(
                    f"stage {k} width {self.base_channels * 2 ** k} "
                    f"not divisible by {heads} heads"
                )

    @property
    def total_downsample(self) -> int:
        return self.patch_stride * 2**4

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 16

    def stage_window(self, stage: int) -> int:
        # smaller windows at the two deepest stages, where grids are tiny
        return self.window_edge if stage < 2 else max(1, self.window_edge // 2)


_VARIANTS = {
    "tiny": dict(base_channels=12, stage_depths=(1, 1, 2, 1),
                 heads_per_stage=(2, 4, 8, 16)),
    "B-scaled": dict(base_channels=24, stage_depths=(2, 2, 2, 2),
                     heads_per_stage=(3, 6, 12, 24)),
    "L-scaled": dict(base_channels=36, stage_depths=(2, 2, 2, 2),
                     heads_per_stage=(3, 6, 12, 24)),
    "H-scaled": dict(base_channels=48, stage_depths=(2, 2, 2, 2),
                     heads_per_stage=(3, 6, 12, 24)),
}


def make_variant(name: str, **overrides) -> EncoderConfig:
    """Return the preset config for a capacity variant."""
    if name not in _VARIANTS:
        raise ConfigError(f"unknown encoder variant {name!r}; known: {VARIANT_NAMES}")
    kwargs = dict(_VARIANTS[name])
    kwargs.update(overrides)
    return EncoderConfig(variant_name=name, **kwargs)


@dataclass
class FeaturePyramid:
    """Per-stage feature grids plus the 1/32-resolution bottleneck."""

    stage_features: list[torch.Tensor]
    bottleneck: torch.Tensor


@dataclass
class DisentangledFeatures:
    """Unit-norm anatomical and sequence-specific feature batches."""

    f_ana: torch.Tensor
    f_seq: torch.Tensor


def window_partition(x: torch.Tensor, window: tuple[int, int, int]) -> torch.Tensor:
    """(B, D, H, W, C) -> (num_windows*B, prod(window), C)."""
    b, d, h, w, c = x.shape
    x = x.view(
        b,
        d // window[0], window[0],
        h // window[1], window[1],
        w // window[2], window[2],
        c,
    )
    return (
        x.permute(0, 1, 3, 5, 2, 4, 6, 7)
        .reshape(-1, window[0] * window[1] * window[2], c)
    )


def window_reverse(
    windows: torch.Tensor, window: tuple[int, int, int], dims: tuple[int, int, int]
) -> torch.Tensor:
    d, h, w = dims
    b = windows.shape[0] // (d * h * w // window[0] // window[1] // window[2])
    x = windows.view(
        b,
        d // window[0], h // window[1], w // window[2],
        window[0], window[1], window[2],
        -1,
    )
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, w, -1)


def get_window_size(x_size, window_size, shift_size):
    """Clamp window (and zero the shift) on axes no larger than the window."""
    use_window = list(window_size)
    use_shift = list(shift_size)
    for i in range(3):
        if x_size[i] <= window_size[i]:
            use_window[i] = x_size[i]
            use_shift[i] = 0
    return tuple(use_window), tuple(use_shift)


@torch.no_grad()
def compute_mask(dims, window, shift, device) -> torch.Tensor | None:
    """Attention mask separating the wrap-around zones of shifted windows."""
    if not any(shift):
        return None
    d, h, w = dims
    img_mask = torch.zeros((1, d, h, w, 1), device=device)
    cnt = 0
    for ds in (slice(-window[0]), slice(-window[0], -shift[0]), slice(-shift[0], None)):
        for hs in (slice(-window[1]), slice(-window[1], -shift[1]), slice(-shift[1], None)):
            for ws in (slice(-window[2]), slice(-window[2], -shift[2]), slice(-shift[2], None)):
                img_mask[:, ds, hs, ws, :] = cnt
                cnt += 1
    mask_windows = window_partition(img_mask, window).squeeze(-1)
    attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return attn_mask.masked_fill(attn_mask != 0, -100.0).masked_fill(attn_mask == 0, 0.0)


class WindowAttention3D(nn.Module):
    """Multi-head self-attention within 3D windows, with relative position bias."""

    def __init__(self, dim: int, window: tuple[int, int, int], num_heads: int):
        super().__init__()
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        self.relative_position_bias_table = nn.Parameter(
            torch.zeros(
                (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1),
                num_heads,
            )
        )
        coords = torch.stack(
            torch.meshgrid(*(torch.arange(wi) for wi in window), indexing="ij")
        ).flatten(1)
        relative = coords[:, :, None] - coords[:, None, :]
        relative = relative.permute(1, 2, 0).contiguous()
        relative[:, :, 0] += window[0] - 1
        relative[:, :, 1] += window[1] - 1
        relative[:, :, 2] += window[2] - 1
        relative[:, :, 0] *= (2 * window[1] - 1) * (2 * window[2] - 1)
        relative[:, :, 1] *= 2 * window[2] - 1
        self.register_buffer("relative_position_index", relative.sum(-1))

        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        b_, n, c = x.shape
        qkv = (
            self.qkv(x)
            .reshape(b_, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[
            self.relative_position_index[:n, :n].reshape(-1)
        ].reshape(n, n, -1)
        attn = attn + bias.permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b_ // nw, nw, self.num_heads, n, n) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b_, n, c)
        return self.proj(x)


class SwinBlock3D(nn.Module):
    def __init__(self, dim: int, num_heads: int, window_edge: int, shifted: bool,
                 mlp_ratio: float = 4.0):
        super().__init__()
        self.window_size = (window_edge,) * 3
        self.shift_size = tuple(w // 2 for w in self.window_size) if shifted else (0, 0, 0)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3D(dim, self.window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, D, H, W, C)
        b, d, h, w, c = x.shape
        window, shift = get_window_size((d, h, w), self.window_size, self.shift_size)

        shortcut = x
        x = self.norm1(x)
        pads = [(window[i] - dims % window[i]) % window[i] for i, dims in enumerate((d, h, w))]
        x = F.pad(x, (0, 0, 0, pads[2], 0, pads[1], 0, pads[0]))
        dp, hp, wp = d + pads[0], h + pads[1], w + pads[2]

        if any(shift):
            x = torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
        mask = compute_mask((dp, hp, wp), window, shift, x.device)
        if mask is not None:
            mask = mask.to(x.dtype)
        attn_windows = self.attn(window_partition(x, window), mask)
        x = window_reverse(attn_windows, window, (dp, hp, wp))
        if any(shift):
            x = torch.roll(x, shifts=shift, dims=(1, 2, 3))
        x = x[:, :d, :h, :w, :]

        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging3D(nn.Module):
    """2x downsample by concatenating the 8 sub-cube neighbours, then Linear."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        pads = [d % 2, h % 2, w % 2]
        if any(pads):
            x = F.pad(x, (0, 0, 0, pads[2], 0, pads[1], 0, pads[0]))
        parts = [
            x[:, i::2, j::2, k::2, :]
            for i, j, k in itertools.product((0, 1), repeat=3)
        ]
        x = torch.cat(parts, dim=-1)
        return self.reduction(self.norm(x))


class SwinEncoder3D(nn.Module):
    """Four-stage windowed-attention encoder producing a FeaturePyramid."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.base_channels
        self.patch_embed = nn.Conv3d(
            cfg.in_channels, c0, kernel_size=cfg.patch_stride, stride=cfg.patch_stride
        )
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for k in range(4):
            dim = c0 * 2**k
            blocks = nn.ModuleList(
                SwinBlock3D(
                    dim,
                    cfg.heads_per_stage[k],
                    cfg.stage_window(k),
                    shifted=(i % 2 == 1),
                    mlp_ratio=cfg.mlp_ratio,
                )
                for i in range(cfg.stage_depths[k])
            )
            self.stages.append(blocks)
            self.merges.append(PatchMerging3D(dim))
        self.bottleneck_norm = nn.LayerNorm(cfg.bottleneck_channels)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        if x.ndim != 5:
            raise ShapeError(f"expected (B, C, D, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"expected {self.cfg.in_channels} input channel(s), got {x.shape[1]}"
            )
        factor = self.cfg.total_downsample
        for axis, edge in enumerate(x.shape[2:], start=2):
            if edge % factor != 0:
                raise ShapeError(
                    f"input axis {axis} has edge {edge}, not divisible by {factor}"
                )

        x = self.patch_embed(x).permute(0, 2, 3, 4, 1)  # (B, D, H, W, C)
        stage_features = []
        for blocks, merge in zip(self.stages, self.merges):
            for block in blocks:
                x = block(x)
            stage_features.append(x.permute(0, 4, 1, 2, 3).contiguous())
            x = merge(x)
        bottleneck = self.bottleneck_norm(x).permute(0, 4, 1, 2, 3).contiguous()
        return FeaturePyramid(stage_features=stage_features, bottleneck=bottleneck)


def encode(model: SwinEncoder3D, batch: torch.Tensor) -> FeaturePyramid:
    return model(batch)


def pool_bottleneck(pyramid: FeaturePyramid) -> torch.Tensor:
    """Global average pool of the bottleneck grid -> (B, 16*C0)."""
    return pyramid.bottleneck.mean(dim=(2, 3, 4))


class DisentangleHead(nn.Module):
    """Two independent two-layer projections of the pooled bottleneck."""

    def __init__(self, bottleneck_channels: int, projection_dim: int = 128):
        super().__init__()
        self.projection_dim = projection_dim

        def head():
            return nn.Sequential(
                nn.Linear(bottleneck_channels, bottleneck_channels),
                nn.GELU(),
                nn.Linear(bottleneck_channels, projection_dim),
            )

        self.anatomy_head = head()
        self.sequence_head = head()

    def forward(self, pyramid: FeaturePyramid) -> DisentangledFeatures:
        pooled = pool_bottleneck(pyramid)
        f_ana = F.normalize(self.anatomy_head(pooled), dim=-1)
        f_seq = F.normalize(self.sequence_head(pooled), dim=-1)
        return DisentangledFeatures(f_ana=f_ana, f_seq=f_seq)


def disentangle(head: DisentangleHead, pyramid: FeaturePyramid) -> DisentangledFeatures:
    return head(pyramid)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
