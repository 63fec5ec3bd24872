"""Physics-grounded synthetic phantoms for training and verification.

Tissue contrast follows the spoiled gradient echo signal equation

    S = PD * sin(a) * (1 - exp(-TR/T1)) / (1 - cos(a) * exp(-TR/T1)) * exp(-TE/T2)

so the acquisition triple (TR, TE, flip angle) is physically predictive of
voxel intensity, which is what makes metadata prediction learnable on this
corpus.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import ScanMetadata, Volume, save_volume


@dataclass
class PhantomSpec:
    """Geometry and tissue parameters for one synthetic case."""

    grid_edge: int = 32
    n_structures: int = 3
    tissue_params: tuple[tuple[float, float, float], ...] = (
        (1000.0, 80.0, 0.9),  # (T1_ms, T2_ms, PD) per class
        (400.0, 40.0, 0.8),
        (2500.0, 250.0, 1.0),
    )
    noise_sigma: float = 0.01
    region_label: int = 0

    def __post_init__(self):
        if self.grid_edge < 8:
            raise ValueError(f"grid_edge must be >= 8, got {self.grid_edge}")
        if self.n_structures < 1:
            raise ValueError(f"n_structures must be >= 1, got {self.n_structures}")
        if len(self.tissue_params) != self.n_structures:
            raise ValueError(
                f"expected {self.n_structures} tissue parameter triples, "
                f"got {len(self.tissue_params)}"
            )
        for t1, t2, pd in self.tissue_params:
            if t1 <= 0 or t2 <= 0 or pd <= 0:
                raise ValueError(f"T1/T2/PD must be positive, got {(t1, t2, pd)}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class PhantomCase:
    """A rendered phantom: intensity volume, acquisition metadata, label grid."""

    volume: Volume
    metadata: ScanMetadata
    labels: np.ndarray

    def __post_init__(self):
        if tuple(self.labels.shape) != self.volume.shape:
            raise ValueError(
                f"labels shape {self.labels.shape} != volume shape {self.volume.shape}"
            )


def spoiled_gre_signal(
    t1_ms: float, t2_ms: float, pd: float, tr_ms: float, te_ms: float, flip_deg: float
) -> float:
    """Evaluate the spoiled gradient echo equation for one tissue."""
    a = math.radians(flip_deg)
    e1 = math.exp(-tr_ms / t1_ms)
    return pd * math.sin(a) * (1.0 - e1) / (1.0 - math.cos(a) * e1) * math.exp(-te_ms / t2_ms)


def sequence_label_from_params(tr_ms: float, te_ms: float) -> str:
    """Rough weighting class implied by TR/TE (short/short=T1W, long/long=T2W)."""
    if tr_ms < 800 and te_ms < 40:
        return "T1W"
    if tr_ms >= 1500 and te_ms >= 60:
        return "T2W"
    if tr_ms >= 1500 and te_ms < 40:
        return "PDW"
    return "OTHER"


def sample_ellipsoid_labels(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Composite random non-degenerate ellipsoids back-to-front onto background 0.

    Class c occupies label value c+1; later classes overwrite earlier ones.
    """
    edge = spec.grid_edge
    coords = np.stack(
        np.meshgrid(*(np.arange(edge, dtype=np.float64),) * 3, indexing="ij")
    )
    labels = np.zeros((edge,) * 3, dtype=np.int16)
    for c in range(spec.n_structures):
        center = rng.uniform(0.25 * edge, 0.75 * edge, size=3)
        semi_axes = rng.uniform(edge / 10.0, edge / 4.0, size=3)
        rotation = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        rel = coords - center[:, None, None, None]
        local = np.einsum("ij,jxyz->ixyz", rotation, rel)
        inside = np.sum((local / semi_axes[:, None, None, None]) ** 2, axis=0) <= 1.0
        labels[inside] = c + 1
    return labels


def render_signal(
    labels: np.ndarray,
    spec: PhantomSpec,
    tr_ms: float,
    te_ms: float,
    flip_deg: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Map labels to signal intensity; background stays 0 before noise."""
    lut = np.zeros(spec.n_structures + 1, dtype=np.float64)
    for c, (t1, t2, pd) in enumerate(spec.tissue_params):
        lut[c + 1] = spoiled_gre_signal(t1, t2, pd, tr_ms, te_ms, flip_deg)
    intensity = lut[labels]
    if rng is not None and spec.noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, spec.noise_sigma, size=labels.shape)
    return intensity.astype(np.float32)


def generate_phantom(
    spec: PhantomSpec,
    acquisition: tuple[float, float, float],
    rng: np.random.Generator,
) -> PhantomCase:
    """Deterministically generate one phantom for the given (TR, TE, FA)."""
    tr_ms, te_ms, flip_deg = acquisition
    labels = sample_ellipsoid_labels(spec, rng)
    intensity = render_signal(labels, spec, tr_ms, te_ms, flip_deg, rng=rng)
    metadata = ScanMetadata(
        tr_ms=tr_ms,
        te_ms=te_ms,
        flip_angle_deg=flip_deg,
        sequence_label=sequence_label_from_params(tr_ms, te_ms),
        body_region=spec.region_label,
    )
    volume = Volume(voxels=intensity, spacing=(1.0, 1.0, 1.0))
    return PhantomCase(volume=volume, metadata=metadata, labels=labels)


# Plausible acquisition ranges the corpus writer samples from.
ACQUISITION_RANGES = {
    "T1W": ((350.0, 700.0), (8.0, 25.0), (60.0, 90.0)),
    "T2W": ((2000.0, 5000.0), (80.0, 120.0), (90.0, 90.0)),
    "PDW": ((2000.0, 4000.0), (10.0, 30.0), (90.0, 90.0)),
}


def _sample_acquisition(rng: np.random.Generator) -> tuple[float, float, float]:
    kind = ("T1W", "T2W", "PDW")[int(rng.integers(0, 3))]
    (tr_lo, tr_hi), (te_lo, te_hi), (fa_lo, fa_hi) = ACQUISITION_RANGES[kind]
    return (
        float(rng.uniform(tr_lo, tr_hi)),
        float(rng.uniform(te_lo, te_hi)),
        float(rng.uniform(fa_lo, fa_hi)),
    )


def _sample_tissue_params(n: int, rng: np.random.Generator):
    return tuple(
        (
            float(rng.uniform(300.0, 3000.0)),
            float(rng.uniform(30.0, 300.0)),
            float(rng.uniform(0.6, 1.0)),
        )
        for _ in range(n)
    )


def write_phantom_corpus(
    out_dir,
    n_cases: int,
    seed: int,
    grid_edge: int = 32,
    n_structures: int = 3,
    sequences_per_case: int = 2,
    noise_sigma: float = 0.01,
    n_regions: int = 4,
) -> Path:
    """Emit a corpus of multi-sequence phantom cases plus a manifest.

    Each case shares one anatomy (label grid) across its sequences, rendered
    under independently sampled acquisitions. Cases are assigned to
    train/val/test splits at a 7:1:2 ratio. Returns the manifest path; the
    manifest is byte-identical across runs with the same arguments.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    split_rng = np.random.default_rng([seed, 0])
    order = split_rng.permutation(n_cases)
    n_train = int(round(0.7 * n_cases))
    n_val = int(round(0.1 * n_cases))
    splits = {}
    for rank, case_index in enumerate(order):
        if rank < n_train:
            splits[int(case_index)] = "train"
        elif rank < n_train + n_val:
            splits[int(case_index)] = "val"
        else:
            splits[int(case_index)] = "test"

    cases = []
    for i in range(n_cases):
        case_id = f"case_{i:04d}"
        case_dir = out_dir / case_id
        case_dir.mkdir(exist_ok=True)
        case_rng = np.random.default_rng([seed, 1, i])
        spec = PhantomSpec(
            grid_edge=grid_edge,
            n_structures=n_structures,
            tissue_params=_sample_tissue_params(n_structures, case_rng),
            noise_sigma=noise_sigma,
            region_label=int(case_rng.integers(0, n_regions)),
        )
        labels = sample_ellipsoid_labels(spec, case_rng)
        labels_path = save_volume(
            Volume(voxels=labels.astype(np.float32)), case_dir / "labels.vol"
        )

        sequences = []
        for j in range(sequences_per_case):
            tr_ms, te_ms, flip_deg = _sample_acquisition(case_rng)
            intensity = render_signal(labels, spec, tr_ms, te_ms, flip_deg, rng=case_rng)
            metadata = ScanMetadata(
                tr_ms=tr_ms,
                te_ms=te_ms,
                flip_angle_deg=flip_deg,
                sequence_label=sequence_label_from_params(tr_ms, te_ms),
                body_region=spec.region_label,
            )
            vol_path = save_volume(
                Volume(voxels=intensity), case_dir / f"seq{j}.vol", metadata=metadata
            )
            sequences.append(
                {
                    "path": str(vol_path.relative_to(out_dir)),
                    "tr_ms": tr_ms,
                    "te_ms": te_ms,
                    "flip_angle_deg": flip_deg,
                    "sequence_label": metadata.sequence_label,
                }
            )
        cases.append(
            {
                "case_id": case_id,
                "split": splits[i],
                "region_label": spec.region_label,
                "labels": str(labels_path.relative_to(out_dir)),
                "n_structures": n_structures,
                "sequences": sequences,
            }
        )

    manifest = {
        "format_version": 1,
        "seed": seed,
        "grid_edge": grid_edge,
        "n_regions": n_regions,
        "cases": cases,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(manifest_path) -> dict:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise IOError(f"manifest not readable: {manifest_path}")
    with open(manifest_path) as fh:
        return json.load(fh)
