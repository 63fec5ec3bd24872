import json
import math

import numpy as np
import pytest

from prism_kit.phantom import (
    PhantomSpec,
    generate_phantom,
    load_manifest,
    render_signal,
    sample_ellipsoid_labels,
    spoiled_gre_signal,
    write_phantom_corpus,
)


def reference_signal(t1, t2, pd, tr, te, fa_deg):
    """Direct transcription of the spoiled gradient echo equation."""
    a = fa_deg * math.pi / 180.0
    e1 = math.exp(-tr / t1)
    return pd * math.sin(a) * (1 - e1) / (1 - math.cos(a) * e1) * math.exp(-te / t2)


class TestSignalEquation:
    def test_reference_value(self):
        # PD=1, alpha=90deg, TR=500, T1=1000, TE=10, T2=100
        s = spoiled_gre_signal(1000.0, 100.0, 1.0, 500.0, 10.0, 90.0)
        expected = (1 - math.exp(-0.5)) * math.exp(-0.1)
        assert s == pytest.approx(expected, abs=1e-9)
        assert s == pytest.approx(0.35602, abs=1e-5)

    def test_te_zero_removes_decay(self):
        s = spoiled_gre_signal(1000.0, 100.0, 1.0, 500.0, 1e-12, 90.0)
        assert s == pytest.approx(1 - math.exp(-0.5), abs=1e-9)

    def test_alpha_to_zero_kills_signal(self):
        s = spoiled_gre_signal(1000.0, 100.0, 1.0, 500.0, 10.0, 1e-6)
        assert abs(s) < 1e-6

    def test_matches_reference_on_random_params(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            t1 = rng.uniform(200, 4000)
            t2 = rng.uniform(20, 400)
            pd = rng.uniform(0.5, 1.0)
            tr = rng.uniform(100, 6000)
            te = rng.uniform(5, 150)
            fa = rng.uniform(5, 179)
            assert spoiled_gre_signal(t1, t2, pd, tr, te, fa) == pytest.approx(
                reference_signal(t1, t2, pd, tr, te, fa), rel=1e-12
            )


class TestGeneratePhantom:
    def test_noise_free_voxels_match_equation(self):
        spec = PhantomSpec(grid_edge=24, n_structures=2,
                           tissue_params=((900.0, 90.0, 0.95), (300.0, 50.0, 0.7)),
                           noise_sigma=0.0)
        acq = (600.0, 15.0, 75.0)
        case = generate_phantom(spec, acq, np.random.default_rng(5))
        # brute-force per-voxel oracle
        for label in np.unique(case.labels):
            if label == 0:
                expected = 0.0
            else:
                t1, t2, pd = spec.tissue_params[label - 1]
                expected = reference_signal(t1, t2, pd, *acq)
            got = case.volume.voxels[case.labels == label]
            np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_deterministic_given_seed(self):
        spec = PhantomSpec(grid_edge=16, n_structures=1,
                           tissue_params=((800.0, 70.0, 1.0),), noise_sigma=0.05)
        a = generate_phantom(spec, (500.0, 20.0, 90.0), np.random.default_rng(3))
        b = generate_phantom(spec, (500.0, 20.0, 90.0), np.random.default_rng(3))
        np.testing.assert_array_equal(a.volume.voxels, b.volume.voxels)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_labels_within_range(self):
        spec = PhantomSpec(grid_edge=16, n_structures=3,
                           tissue_params=((1000, 80, 1),) * 3)
        case = generate_phantom(spec, (500.0, 20.0, 90.0), np.random.default_rng(1))
        assert case.labels.max() <= spec.n_structures
        assert case.labels.min() == 0
        assert case.metadata.tr_ms == 500.0

    def test_every_structure_appears(self):
        spec = PhantomSpec(grid_edge=32, n_structures=3,
                           tissue_params=((1000, 80, 1),) * 3)
        labels = sample_ellipsoid_labels(spec, np.random.default_rng(2))
        # later ellipsoids may overwrite earlier ones, but the front-most
        # class always survives
        assert spec.n_structures in np.unique(labels)


class TestCorpusWriter:
    def test_manifest_byte_identical_across_runs(self, tmp_path):
        m1 = write_phantom_corpus(tmp_path / "a", n_cases=6, seed=9, grid_edge=16,
                                  sequences_per_case=2)
        m2 = write_phantom_corpus(tmp_path / "b", n_cases=6, seed=9, grid_edge=16,
                                  sequences_per_case=2)
        assert m1.read_bytes() == m2.read_bytes()

    def test_split_ratio(self, tmp_path):
        manifest_path = write_phantom_corpus(tmp_path, n_cases=20, seed=1,
                                             grid_edge=16)
        manifest = load_manifest(manifest_path)
        counts = {"train": 0, "val": 0, "test": 0}
        for case in manifest["cases"]:
            counts[case["split"]] += 1
        assert counts == {"train": 14, "val": 2, "test": 4}

    def test_sequences_share_anatomy(self, tmp_path):
        from prism_kit.volume import load_volume

        manifest_path = write_phantom_corpus(tmp_path, n_cases=2, seed=4,
                                             grid_edge=16, sequences_per_case=3)
        manifest = load_manifest(manifest_path)
        case = manifest["cases"][0]
        assert len(case["sequences"]) == 3
        labels = load_volume(tmp_path / case["labels"])
        for seq in case["sequences"]:
            vol = load_volume(tmp_path / seq["path"])
            assert vol.shape == labels.shape

    def test_missing_manifest_raises_ioerror(self, tmp_path):
        with pytest.raises(IOError):
            load_manifest(tmp_path / "nope.json")

    def test_metadata_in_sidecars(self, tmp_path):
        from prism_kit.volume import read_sidecar_metadata

        manifest_path = write_phantom_corpus(tmp_path, n_cases=1, seed=2,
                                             grid_edge=16)
        manifest = load_manifest(manifest_path)
        seq = manifest["cases"][0]["sequences"][0]
        meta = read_sidecar_metadata(tmp_path / seq["path"])
        assert meta is not None
        assert meta.tr_ms == pytest.approx(seq["tr_ms"])
