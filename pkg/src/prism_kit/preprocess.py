"""Resampling, cropping, reorientation, normalization, masking and augmentation.

All operations are pure given an explicit ``numpy.random.Generator``; workers
producing samples concurrently must each own an independent stream derived
from ``(global_seed, sample_index)``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import ShapeError
from .volume import ScanMetadata, Volume

log = logging.getLogger(__name__)

# The 48 orientation symmetries of a cube: 6 axis permutations x 8 flip
# patterns, indexed perm_index * 8 + flip_bits.
ORIENTATION_PERMS = tuple(itertools.permutations((0, 1, 2)))
N_ORIENTATIONS = 48


@dataclass
class MaskSpec:
    """Block-masking parameters: target fraction, block edge, fill value."""

    ratio: float = 0.3
    block_edge: int = 16
    fill_value: float = 0.0

    def __post_init__(self):
        if not 0 < self.ratio < 1:
            raise ValueError(f"mask ratio must lie in (0, 1), got {self.ratio}")
        if self.block_edge < 1:
            raise ValueError(f"block_edge must be >= 1, got {self.block_edge}")


@dataclass
class PretrainSample:
    """One pretraining unit: crop, masked view, mask, metadata and identity."""

    crop: Volume
    masked_crop: Volume
    mask: np.ndarray
    metadata: ScanMetadata
    region_label: int
    subject_id: str = ""
    sequence_index: int = 0

    def __post_init__(self):
        shapes = {self.crop.shape, self.masked_crop.shape, tuple(self.mask.shape)}
        if len(shapes) != 1:
            raise ShapeError(f"crop/masked_crop/mask shapes differ: {shapes}")


def resample_isotropic(volume: Volume, target_spacing: float = 1.0) -> Volume:
    """Resample to isotropic spacing by trilinear interpolation.

    Output dimension per axis is ``round(in_dim * in_spacing / target)`` with
    a floor of 1; voxel i sits at physical position ``i * spacing`` along each
    axis, and samples beyond the grid clamp to the edge value.
    """
    if target_spacing <= 0:
        raise ValueError(f"target_spacing must be positive, got {target_spacing}")
    in_shape = volume.shape
    out_shape = tuple(
        max(1, int(round(d * s / target_spacing)))
        for d, s in zip(in_shape, volume.spacing)
    )
    if out_shape == in_shape and all(
        abs(s - target_spacing) < 1e-12 for s in volume.spacing
    ):
        return volume.copy_with(spacing=(target_spacing,) * 3)

    axes = [
        np.arange(out_shape[a], dtype=np.float64) * target_spacing / volume.spacing[a]
        for a in range(3)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    resampled = map_coordinates(
        volume.voxels.astype(np.float64), coords, order=1, mode="nearest"
    ).reshape(out_shape)
    return volume.copy_with(
        voxels=resampled.astype(volume.voxels.dtype),
        spacing=(target_spacing,) * 3,
    )


def replicate_pad_to(voxels: np.ndarray, minimum: int) -> np.ndarray:
    """Edge-replicate so each axis reaches at least ``minimum`` voxels."""
    pads = []
    for d in voxels.shape:
        short = max(0, minimum - d)
        pads.append((short // 2, short - short // 2))
    if any(p != (0, 0) for p in pads):
        voxels = np.pad(voxels, pads, mode="edge")
    return voxels


def random_crop(voxels: np.ndarray, edge: int, rng: np.random.Generator) -> np.ndarray:
    starts = [int(rng.integers(0, d - edge + 1)) for d in voxels.shape]
    return voxels[
        starts[0] : starts[0] + edge,
        starts[1] : starts[1] + edge,
        starts[2] : starts[2] + edge,
    ].copy()


def orientation_from_index(index: int) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Decode 0..47 into (axis permutation, per-axis flip signs)."""
    if not 0 <= index < N_ORIENTATIONS:
        raise ValueError(f"orientation index out of range: {index}")
    perm = ORIENTATION_PERMS[index // 8]
    bits = index % 8
    flips = tuple(-1 if (bits >> a) & 1 else 1 for a in range(3))
    return perm, flips


def apply_orientation(
    voxels: np.ndarray,
    perm: tuple[int, int, int],
    flips: tuple[int, int, int],
) -> np.ndarray:
    out = np.transpose(voxels, perm)
    slicer = tuple(slice(None, None, f) for f in flips)
    return out[slicer]


def sample_orientation(rng: np.random.Generator) -> int:
    """Draw one of the 48 cube symmetries uniformly."""
    return int(rng.integers(0, N_ORIENTATIONS))


def normalize_intensity(
    voxels: np.ndarray, lower_pct: float = 0.5, upper_pct: float = 99.5
) -> np.ndarray:
    """Clip to the [lower, upper] percentile range and rescale to [0, 1].

    A degenerate range (max == min after clipping) yields a flat zero volume
    and a logged warning rather than an error.
    """
    lo, hi = np.percentile(voxels, [lower_pct, upper_pct])
    clipped = np.clip(voxels, lo, hi)
    span = hi - lo
    if span <= 0:
        log.warning("degenerate intensity range (%.6g); returning flat zeros", lo)
        return np.zeros_like(clipped, dtype=np.float32)
    return ((clipped - lo) / span).astype(np.float32)


def apply_block_mask(
    crop: Volume | np.ndarray, mask: MaskSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Mask non-overlapping random cubic blocks until the fraction reaches ratio.

    Blocks are drawn without replacement from the partition of the crop into
    axis-aligned ``block_edge``-cells; remainder voxels along axes the block
    edge does not divide are never masked. Masking stops the first time the
    masked fraction reaches or exceeds ``mask.ratio``, so the achieved
    fraction lies in [ratio, ratio + block_volume / crop_volume]. When a
    single block already exceeds the target, exactly one block is masked and
    the achieved ratio is logged.
    """
    voxels = crop.voxels if isinstance(crop, Volume) else crop
    shape = voxels.shape
    b = mask.block_edge
    if any(b > d for d in shape):
        raise ValueError(f"block_edge {b} exceeds crop dimensions {shape}")
    cells = [d // b for d in shape]
    n_cells = cells[0] * cells[1] * cells[2]
    order = rng.permutation(n_cells)

    total = voxels.size
    block_volume = b**3
    target = mask.ratio * total
    mask_grid = np.zeros(shape, dtype=np.uint8)
    masked_voxels = 0
    for cell in order:
        cx, rem = divmod(int(cell), cells[1] * cells[2])
        cy, cz = divmod(rem, cells[2])
        mask_grid[cx * b : (cx + 1) * b, cy * b : (cy + 1) * b, cz * b : (cz + 1) * b] = 1
        masked_voxels += block_volume
        if masked_voxels >= target:
            break
    if block_volume > target:
        log.info(
            "single block exceeds ratio %.3f; achieved %.4f",
            mask.ratio,
            masked_voxels / total,
        )
    masked = voxels.copy()
    masked[mask_grid == 1] = mask.fill_value
    return masked, mask_grid


def preprocess_sample(
    volume: Volume,
    metadata: ScanMetadata,
    region: int,
    mask: MaskSpec,
    rng: np.random.Generator,
    crop_edge: int = 96,
    target_spacing: float = 1.0,
    subject_id: str = "",
    sequence_index: int = 0,
) -> PretrainSample:
    """Full pretraining chain: resample, crop, reorient, normalize, mask."""
    resampled = resample_isotropic(volume, target_spacing)
    voxels = replicate_pad_to(resampled.voxels, crop_edge)
    crop = random_crop(voxels, crop_edge, rng)
    perm, flips = orientation_from_index(sample_orientation(rng))
    crop = apply_orientation(crop, perm, flips)
    crop = normalize_intensity(crop)
    masked, mask_grid = apply_block_mask(crop, mask, rng)
    crop_vol = Volume(
        voxels=crop,
        spacing=(target_spacing,) * 3,
        orientation=(perm, flips),
        provenance_id=volume.provenance_id,
    )
    return PretrainSample(
        crop=crop_vol,
        masked_crop=crop_vol.copy_with(voxels=masked),
        mask=mask_grid,
        metadata=metadata,
        region_label=region,
        subject_id=subject_id,
        sequence_index=sequence_index,
    )


@dataclass
class AugmentConfig:
    """Toggles for the downstream-training augmentation stack."""

    resize: bool = False
    flip: bool = False
    rotate90: bool = False
    normalize: bool = False
    contrast_jitter: bool = False
    resize_range: tuple[float, float] = (0.9, 1.1)
    jitter_range: tuple[float, float] = (0.8, 1.25)


def augment(
    volume: Volume,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    labels: np.ndarray | None = None,
) -> Volume | tuple[Volume, np.ndarray]:
    """Apply the enabled augmentations; geometry ops also transform ``labels``.

    With every toggle off the input is returned unchanged. Contrast jitter
    multiplies intensities by a factor drawn uniformly from ``jitter_range``.
    """
    voxels = volume.voxels
    out_labels = labels

    if cfg.resize:
        factor = float(rng.uniform(*cfg.resize_range))
        # Isotropic resize = resample the grid at 1/factor of its spacing.
        scaled = resample_isotropic(
            volume.copy_with(voxels=voxels, spacing=(1.0, 1.0, 1.0)), 1.0 / factor
        )
        voxels = scaled.voxels
        if out_labels is not None:
            out_labels = _resize_nearest(out_labels, voxels.shape)
    if cfg.flip:
        for axis in range(3):
            if rng.random() < 0.5:
                voxels = np.flip(voxels, axis=axis)
                if out_labels is not None:
                    out_labels = np.flip(out_labels, axis=axis)
    if cfg.rotate90:
        axes = tuple(sorted(rng.choice(3, size=2, replace=False).tolist()))
        k = int(rng.integers(0, 4))
        voxels = np.rot90(voxels, k=k, axes=axes)
        if out_labels is not None:
            out_labels = np.rot90(out_labels, k=k, axes=axes)
    if cfg.contrast_jitter:
        factor = float(rng.uniform(*cfg.jitter_range))
        voxels = voxels * factor
    if cfg.normalize:
        voxels = normalize_intensity(voxels)

    out = volume.copy_with(voxels=np.ascontiguousarray(voxels))
    if labels is not None:
        return out, np.ascontiguousarray(out_labels)
    return out


def _resize_nearest(labels: np.ndarray, out_shape: tuple[int, ...]) -> np.ndarray:
    idx = [
        np.clip(
            np.round(np.arange(o) * (i / o)).astype(int), 0, i - 1
        )
        for o, i in zip(out_shape, labels.shape)
    ]
    return labels[np.ix_(*idx)]
