import gzip
import struct

import numpy as np
import pytest

from prism_kit.errors import CorruptFileError, FormatError
from prism_kit.volume import (
    ScanMetadata,
    Volume,
    load_volume,
    read_sidecar_metadata,
    save_volume,
)


def write_nifti1(path, voxels, spacing, gzipped=False):
    """Independent NIfTI-1 writer assembled from the public header layout."""
    voxels = np.asarray(voxels, dtype="<f4")
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)                       # sizeof_hdr
    dim = (3,) + voxels.shape + (1, 1, 1, 1)
    struct.pack_into("<8h", header, 40, *dim)                    # dim
    struct.pack_into("<h", header, 70, 16)                       # datatype float32
    struct.pack_into("<h", header, 72, 32)                       # bitpix
    pixdim = (1.0,) + tuple(spacing) + (1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<8f", header, 76, *pixdim)                 # pixdim
    struct.pack_into("<f", header, 108, 352.0)                   # vox_offset
    struct.pack_into("<f", header, 112, 1.0)                     # scl_slope
    struct.pack_into("<f", header, 116, 0.0)                     # scl_inter
    header[344:348] = b"n+1\x00"                                 # magic
    payload = bytes(header) + b"\x00" * 4 + voxels.ravel(order="F").tobytes()
    opener = gzip.open if gzipped else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def read_nifti1_reference(path):
    """Independent minimal reader used to cross-check the package loader."""
    raw = path.read_bytes()
    dim = struct.unpack_from("<8h", raw, 40)
    shape = dim[1:4]
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = int(struct.unpack_from("<f", raw, 108)[0])
    count = shape[0] * shape[1] * shape[2]
    voxels = np.frombuffer(raw, dtype="<f4", count=count, offset=vox_offset)
    return voxels.reshape(shape, order="F"), pixdim[1:4]


class TestNativeFormat:
    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        vox = rng.normal(size=(4, 4, 4)).astype(np.float32)
        vol = Volume(voxels=vox, spacing=(1.5, 1.5, 1.5))
        meta = ScanMetadata(tr_ms=500.0, te_ms=20.0, flip_angle_deg=90.0,
                            sequence_label="T1W", body_region=2)
        path = save_volume(vol, tmp_path / "case", metadata=meta)

        loaded = load_volume(path)
        np.testing.assert_array_equal(loaded.voxels, vox)
        assert loaded.spacing == pytest.approx((1.5, 1.5, 1.5), abs=1e-6)

        loaded_meta = read_sidecar_metadata(path)
        assert loaded_meta == meta

    def test_byte_count_mismatch(self, tmp_path):
        vol = Volume(voxels=np.zeros((4, 4, 4), dtype=np.float32))
        path = save_volume(vol, tmp_path / "bad")
        # 63 floats declared as 4x4x4
        path.write_bytes(np.zeros(63, dtype="<f4").tobytes())
        with pytest.raises(CorruptFileError):
            load_volume(path)

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "orphan.vol"
        path.write_bytes(np.zeros(8, dtype="<f4").tobytes())
        with pytest.raises(FormatError):
            load_volume(path)

    def test_x_fastest_on_disk(self, tmp_path):
        vox = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        path = save_volume(Volume(voxels=vox), tmp_path / "order")
        flat = np.frombuffer(path.read_bytes(), dtype="<f4")
        # first two stream elements step along x
        assert flat[0] == vox[0, 0, 0]
        assert flat[1] == vox[1, 0, 0]

    def test_spacing_survives_round_trip_exactly(self, tmp_path):
        spacing = (0.9765625, 1.1200000000000001, 3.3)
        vol = Volume(voxels=np.zeros((2, 2, 2), dtype=np.float32), spacing=spacing)
        path = save_volume(vol, tmp_path / "sp")
        assert load_volume(path).spacing == spacing


class TestNifti:
    def test_spacing_from_independent_writer(self, tmp_path):
        rng = np.random.default_rng(1)
        vox = rng.normal(size=(5, 6, 7)).astype(np.float32)
        path = tmp_path / "scan.nii"
        write_nifti1(path, vox, spacing=(2.0, 2.0, 2.0))

        vol = load_volume(path)
        assert vol.spacing == pytest.approx((2.0, 2.0, 2.0))
        np.testing.assert_array_equal(vol.voxels, vox)

        ref_vox, ref_spacing = read_nifti1_reference(path)
        np.testing.assert_array_equal(vol.voxels, ref_vox)
        assert vol.spacing == pytest.approx(ref_spacing)

    def test_gzipped(self, tmp_path):
        vox = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        path = tmp_path / "scan.nii.gz"
        write_nifti1(path, vox, spacing=(1.0, 2.0, 3.0), gzipped=True)
        vol = load_volume(path)
        assert vol.spacing == pytest.approx((1.0, 2.0, 3.0))
        np.testing.assert_array_equal(vol.voxels, vox)

    def test_truncated_payload(self, tmp_path):
        vox = np.zeros((4, 4, 4), dtype=np.float32)
        path = tmp_path / "trunc.nii"
        write_nifti1(path, vox, spacing=(1.0, 1.0, 1.0))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 40])
        with pytest.raises(CorruptFileError):
            load_volume(path)


class TestInvariants:
    def test_spacing_must_be_positive(self):
        with pytest.raises(ValueError):
            Volume(voxels=np.zeros((2, 2, 2)), spacing=(0.0, 1.0, 1.0))

    def test_orientation_must_be_bijection(self):
        with pytest.raises(ValueError):
            Volume(voxels=np.zeros((2, 2, 2)), orientation=((0, 0, 2), (1, 1, 1)))

    def test_metadata_ranges(self):
        with pytest.raises(ValueError):
            ScanMetadata(tr_ms=-1.0, te_ms=10.0, flip_angle_deg=90.0)
        with pytest.raises(ValueError):
            ScanMetadata(tr_ms=100.0, te_ms=10.0, flip_angle_deg=181.0)
