"""Volumetric image container and file I/O.

Two on-disk formats are supported:

* the native pair ``<name>.vol`` + ``<name>.meta`` — a raw little-endian
  float32 voxel block (x varies fastest) plus a key/value sidecar carrying
  dimensions, spacing, orientation and scan metadata;
* NIfTI-1 (``.nii`` / ``.nii.gz``), read-only, spacing taken from the header.
  A ``.meta`` sidecar next to the file is honoured when present.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, FormatError

SEQUENCE_LABELS = ("T1W", "T2W", "PDW", "OTHER")


@dataclass
class ScanMetadata:
    """Acquisition parameters attached to a scan."""

    tr_ms: float
    te_ms: float
    flip_angle_deg: float
    sequence_label: str = "OTHER"
    body_region: int = 0

    def __post_init__(self):
        if self.tr_ms <= 0:
            raise ValueError(f"tr_ms must be positive, got {self.tr_ms}")
        if self.te_ms <= 0:
            raise ValueError(f"te_ms must be positive, got {self.te_ms}")
        if not 0 < self.flip_angle_deg <= 180:
            raise ValueError(
                f"flip_angle_deg must lie in (0, 180], got {self.flip_angle_deg}"
            )
        if self.sequence_label not in SEQUENCE_LABELS:
            raise ValueError(f"unknown sequence_label {self.sequence_label!r}")


@dataclass
class Volume:
    """A 3D scalar grid with per-axis spacing (mm) and an orientation tag.

    ``voxels`` is indexed ``[x, y, z]``; ``orientation`` records the axis
    permutation and per-axis flip signs applied relative to the stored
    original (identity for freshly loaded data).
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: tuple[tuple[int, int, int], tuple[int, int, int]] = (
        (0, 1, 2),
        (1, 1, 1),
    )
    provenance_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3D, got ndim={self.voxels.ndim}")
        if min(self.voxels.shape) < 1:
            raise ValueError(f"all grid dimensions must be >= 1, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be positive, got {self.spacing}")
        perm, flips = self.orientation
        if sorted(perm) != [0, 1, 2]:
            raise ValueError(f"orientation permutation must be a bijection, got {perm}")
        if any(f not in (-1, 1) for f in flips):
            raise ValueError(f"flip signs must be +/-1, got {flips}")
        self.orientation = (tuple(perm), tuple(flips))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def copy_with(self, **changes) -> "Volume":
        return replace(self, **changes)


def _format_float(x: float) -> str:
    return repr(float(x))


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta")


def save_volume(volume: Volume, path, metadata: ScanMetadata | None = None) -> Path:
    """Write a volume in the native format; returns the ``.vol`` path."""
    path = Path(path)
    if path.suffix != ".vol":
        path = path.with_suffix(".vol")
    path.parent.mkdir(parents=True, exist_ok=True)
    vox = np.ascontiguousarray(volume.voxels, dtype="<f4")
    # x-fastest order on disk: column-major raveling of the [x, y, z] grid.
    path.write_bytes(vox.ravel(order="F").tobytes())

    perm, flips = volume.orientation
    lines = [
        f"dims = {volume.shape[0]} {volume.shape[1]} {volume.shape[2]}",
        "spacing_mm = " + " ".join(_format_float(s) for s in volume.spacing),
        "orientation_perm = " + " ".join(str(p) for p in perm),
        "orientation_flip = " + " ".join(str(f) for f in flips),
    ]
    if metadata is not None:
        lines += [
            f"tr_ms = {_format_float(metadata.tr_ms)}",
            f"te_ms = {_format_float(metadata.te_ms)}",
            f"flip_angle_deg = {_format_float(metadata.flip_angle_deg)}",
            f"sequence_label = {metadata.sequence_label}",
            f"body_region = {metadata.body_region}",
        ]
    _meta_path(path).write_text("\n".join(lines) + "\n")
    return path


def _parse_sidecar(path: Path) -> dict[str, str]:
    entries = {}
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"malformed sidecar line in {path}: {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def read_sidecar_metadata(path) -> ScanMetadata | None:
    """Read the ScanMetadata block of a sidecar, if one exists and is complete."""
    meta_path = _meta_path(Path(path))
    if not meta_path.exists():
        return None
    entries = _parse_sidecar(meta_path)
    if "tr_ms" not in entries:
        return None
    return ScanMetadata(
        tr_ms=float(entries["tr_ms"]),
        te_ms=float(entries["te_ms"]),
        flip_angle_deg=float(entries["flip_angle_deg"]),
        sequence_label=entries.get("sequence_label", "OTHER"),
        body_region=int(entries.get("body_region", 0)),
    )


def load_volume(path) -> Volume:
    """Load a volume from the native format or from a NIfTI-1 file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix in (".nii", ".gz"):
        return _load_nifti(path)
    return _load_native(path)


def _load_native(path: Path) -> Volume:
    meta_path = _meta_path(path)
    if not meta_path.exists():
        raise FormatError(f"missing sidecar {meta_path} for native volume {path}")
    entries = _parse_sidecar(meta_path)
    for required in ("dims", "spacing_mm"):
        if required not in entries:
            raise FormatError(f"sidecar {meta_path} lacks required key {required!r}")
    dims = tuple(int(t) for t in entries["dims"].split())
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"sidecar {meta_path} declares invalid dims {dims}")
    spacing = tuple(float(t) for t in entries["spacing_mm"].split())
    perm = tuple(int(t) for t in entries.get("orientation_perm", "0 1 2").split())
    flips = tuple(int(t) for t in entries.get("orientation_flip", "1 1 1").split())

    raw = path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(raw) != expected:
        raise CorruptFileError(
            f"{path}: payload is {len(raw)} bytes but dims {dims} require {expected}"
        )
    voxels = np.frombuffer(raw, dtype="<f4").reshape(dims, order="F").copy()
    return Volume(
        voxels=voxels,
        spacing=spacing,
        orientation=(perm, flips),
        provenance_id=str(path),
    )


# NIfTI-1 datatype codes -> numpy dtypes (little-endian assumed after check).
_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


def _load_nifti(path: Path) -> Volume:
    opener = gzip.open if path.name.endswith(".nii.gz") or path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        header = fh.read(348)
        if len(header) < 348:
            raise CorruptFileError(f"{path}: NIfTI header truncated")
        sizeof_hdr = struct.unpack("<i", header[0:4])[0]
        byte_order = "<"
        if sizeof_hdr != 348:
            if struct.unpack(">i", header[0:4])[0] == 348:
                byte_order = ">"
            else:
                raise FormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")
        magic = header[344:348]
        if magic[:2] not in (b"n+", b"ni"):
            raise FormatError(f"{path}: bad NIfTI magic {magic!r}")
        dim = struct.unpack(byte_order + "8h", header[40:56])
        ndim = dim[0]
        if ndim < 3:
            raise FormatError(f"{path}: expected a 3D NIfTI volume, got dim[0]={ndim}")
        dims = tuple(int(d) for d in dim[1:4])
        if any(d > 1 for d in dim[4 : 1 + ndim]):
            raise FormatError(f"{path}: higher-dimensional NIfTI volumes unsupported")
        datatype = struct.unpack(byte_order + "h", header[70:72])[0]
        if datatype not in _NIFTI_DTYPES:
            raise FormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
        pixdim = struct.unpack(byte_order + "8f", header[76:108])
        spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
        vox_offset = struct.unpack(byte_order + "f", header[108:112])[0]
        scl_slope = struct.unpack(byte_order + "f", header[112:116])[0]
        scl_inter = struct.unpack(byte_order + "f", header[116:120])[0]

        fh.seek(int(vox_offset))
        dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(byte_order)
        count = dims[0] * dims[1] * dims[2]
        raw = fh.read(count * dtype.itemsize)
        if len(raw) != count * dtype.itemsize:
            raise CorruptFileError(f"{path}: NIfTI payload shorter than dims {dims} require")

    voxels = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F").astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        voxels = voxels * slope + scl_inter
    return Volume(voxels=voxels, spacing=spacing, provenance_id=str(path))
