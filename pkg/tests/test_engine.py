import json

import numpy as np
import pytest
import torch

from prism_kit.engine import (
    MetadataNormalizer,
    PretextToggles,
    PretrainConfig,
    PretrainCorpus,
    build_state,
    load_checkpoint,
    make_batch,
    run_pretraining,
    save_checkpoint,
    train_step,
)
from prism_kit.errors import (
    CheckpointMismatchError,
    ConfigError,
    CorruptCheckpointError,
    NonFiniteLossError,
)
from prism_kit.phantom import write_phantom_corpus
from prism_kit.preprocess import MaskSpec
from prism_kit.pretext import PSpaceConfig


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_phantom_corpus(root, n_cases=12, seed=7, grid_edge=32,
                         sequences_per_case=2)
    return root


def small_config(corpus_dir, **overrides) -> PretrainConfig:
    defaults = dict(
        manifest=str(corpus_dir / "manifest.json"),
        variant="tiny",
        crop_edge=32,
        batch_size=4,
        steps=2,
        seed=11,
        mask=MaskSpec(ratio=0.3, block_edge=8),
        pspace=PSpaceConfig(z_dim=16, mapper_widths=(32,), p_dim=32),
        projection_dim=32,
        checkpoint_interval=100,
    )
    defaults.update(overrides)
    return PretrainConfig(**defaults)


class TestNormalizer:
    def test_zscores_train_stats(self):
        triples = [(500.0, 20.0, 90.0), (3000.0, 100.0, 45.0), (800.0, 30.0, 70.0)]
        norm = MetadataNormalizer.fit(triples)
        feats = np.stack([norm.normalize(*t) for t in triples])
        np.testing.assert_allclose(feats.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(feats.std(axis=0), 1.0, atol=1e-9)

    def test_constant_component_guard(self):
        triples = [(500.0, 20.0, 90.0), (600.0, 25.0, 90.0)]
        norm = MetadataNormalizer.fit(triples)
        out = norm.normalize(550.0, 22.0, 90.0)
        assert np.isfinite(out).all()


class TestTrainStep:
    def test_step_increments_and_losses_finite(self, corpus_dir):
        cfg = small_config(corpus_dir)
        corpus = PretrainCorpus(cfg.manifest)
        state = build_state(cfg, corpus)
        batch = make_batch(corpus, cfg, 0)
        state, report = train_step(batch, state, cfg)
        assert state.step == 1
        assert report.step == 1
        for name, value in report.as_dict().items():
            assert np.isfinite(value), name
        assert report.recon > 0

    def test_mir_only_toggles_zero_other_terms(self, corpus_dir):
        cfg = small_config(
            corpus_dir,
            toggles=PretextToggles(mir=True, meta=False, tran=False, con=False),
        )
        corpus = PretrainCorpus(cfg.manifest)
        state = build_state(cfg, corpus)
        state, report = train_step(make_batch(corpus, cfg, 0), state, cfg)
        assert report.contrastive == 0.0
        assert report.metadata_mae == 0.0
        assert report.g_adv == 0.0
        assert report.d_adv == 0.0
        assert report.region_ce == 0.0
        assert report.total == pytest.approx(report.recon)

    @pytest.mark.parametrize("disabled", ["mir", "meta", "tran", "con"])
    def test_disabled_toggle_heads_get_no_gradient(self, corpus_dir, disabled):
        toggles = PretextToggles(**{disabled: False})
        cfg = small_config(corpus_dir, toggles=toggles)
        corpus = PretrainCorpus(cfg.manifest)
        state = build_state(cfg, corpus)
        state, _ = train_step(make_batch(corpus, cfg, 0), state, cfg)
        owners = {
            "mir": state.modules.recon_head,
            "meta": state.modules.metadata_head,
            "tran": state.modules.discriminator,
            "con": None,  # contrastive owns no exclusive parameters
        }
        owner = owners[disabled]
        if owner is not None:
            for param in owner.parameters():
                assert param.grad is None or torch.all(param.grad == 0)
        if disabled == "meta":
            for param in state.modules.region_head.parameters():
                assert param.grad is None or torch.all(param.grad == 0)

    def test_disabled_toggle_heads_unchanged_by_step(self, corpus_dir):
        cfg = small_config(
            corpus_dir, toggles=PretextToggles(mir=True, meta=False, tran=True, con=True)
        )
        corpus = PretrainCorpus(cfg.manifest)
        state = build_state(cfg, corpus)
        before = [p.detach().clone() for p in state.modules.metadata_head.parameters()]
        state, _ = train_step(make_batch(corpus, cfg, 0), state, cfg)
        after = list(state.modules.metadata_head.parameters())
        for b, a in zip(before, after):
            assert torch.equal(b, a)

    def test_run_twice_determinism(self, corpus_dir):
        cfg = small_config(corpus_dir, steps=5)
        corpus = PretrainCorpus(cfg.manifest)
        trajectories = []
        for _ in range(2):
            state = build_state(cfg, corpus)
            reports = []
            for step in range(5):
                state, report = train_step(make_batch(corpus, cfg, step), state, cfg)
                reports.append(report.total)
            trajectories.append(reports)
        np.testing.assert_allclose(trajectories[0], trajectories[1], atol=1e-6)

    def test_nonfinite_loss_aborts_without_mutation(self, corpus_dir):
        cfg = small_config(corpus_dir)
        corpus = PretrainCorpus(cfg.manifest)
        state = build_state(cfg, corpus)
        # poison a reconstruction weight so the loss goes non-finite
        with torch.no_grad():
            list(state.modules.recon_head.parameters())[0][:] = float("nan")
        params_before = [
            p.detach().clone() for p in state.modules.encoder.parameters()
        ]
        step_before = state.step
        with pytest.raises(NonFiniteLossError) as err:
            train_step(make_batch(corpus, cfg, 0), state, cfg)
        assert err.value.term == "recon"
        assert state.step == step_before
        for before, after in zip(params_before, state.modules.encoder.parameters()):
            assert torch.equal(before, after)

    def test_batch_has_two_subjects_for_contrastive(self, corpus_dir):
        cfg = small_config(corpus_dir, batch_size=2)
        corpus = PretrainCorpus(cfg.manifest)
        for step in range(25):
            batch = make_batch(corpus, cfg, step)
            assert len({s.subject_id for s in batch}) >= 2

    def test_contrastive_requires_batch_of_two(self, corpus_dir):
        with pytest.raises(ConfigError):
            small_config(corpus_dir, batch_size=1)


class TestCheckpoint:
    def test_round_trip_preserves_probe_outputs(self, corpus_dir, tmp_path):
        cfg = small_config(corpus_dir)
        corpus = PretrainCorpus(cfg.manifest)
        state = build_state(cfg, corpus)
        state, _ = train_step(make_batch(corpus, cfg, 0), state, cfg)

        probe = torch.randn(2, 1, 32, 32, 32, generator=torch.Generator().manual_seed(3))
        state.modules.eval()
        with torch.no_grad():
            before = state.modules.encoder(probe).bottleneck

        path = save_checkpoint(state, tmp_path / "ck.ckpt", cfg)
        restored = load_checkpoint(path, cfg)
        restored.modules.eval()
        with torch.no_grad():
            after = restored.modules.encoder(probe).bottleneck
        assert torch.allclose(before, after, atol=1e-6)
        assert restored.step == state.step

    def test_variant_mismatch_raises(self, corpus_dir, tmp_path):
        cfg = small_config(corpus_dir)
        corpus = PretrainCorpus(cfg.manifest)
        state = build_state(cfg, corpus)
        path = save_checkpoint(state, tmp_path / "ck.ckpt", cfg)
        other = small_config(corpus_dir, variant="B-scaled")
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path, other)

    def test_truncated_file_raises(self, corpus_dir, tmp_path):
        cfg = small_config(corpus_dir)
        state = build_state(cfg, PretrainCorpus(cfg.manifest))
        path = save_checkpoint(state, tmp_path / "ck.ckpt", cfg)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_save_load_save_is_byte_identical(self, corpus_dir, tmp_path):
        cfg = small_config(corpus_dir)
        corpus = PretrainCorpus(cfg.manifest)
        state = build_state(cfg, corpus)
        state, _ = train_step(make_batch(corpus, cfg, 0), state, cfg)
        p1 = save_checkpoint(state, tmp_path / "a.ckpt", cfg)
        restored = load_checkpoint(p1, cfg)
        p2 = save_checkpoint(restored, tmp_path / "b.ckpt", cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_continues_deterministically(self, corpus_dir, tmp_path):
        cfg = small_config(corpus_dir, steps=4)
        corpus = PretrainCorpus(cfg.manifest)

        # straight run
        state = build_state(cfg, corpus)
        reports = []
        for step in range(4):
            state, report = train_step(make_batch(corpus, cfg, step), state, cfg)
            reports.append(report.total)

        # run 2 steps, checkpoint, resume
        state2 = build_state(cfg, corpus)
        for step in range(2):
            state2, _ = train_step(make_batch(corpus, cfg, step), state2, cfg)
        path = save_checkpoint(state2, tmp_path / "mid.ckpt", cfg)
        resumed = load_checkpoint(path, cfg)
        resumed_reports = []
        for step in range(2, 4):
            resumed, report = train_step(make_batch(corpus, cfg, step), resumed, cfg)
            resumed_reports.append(report.total)
        np.testing.assert_allclose(reports[2:], resumed_reports, atol=1e-6)


class TestRunPretraining:
    def test_artifacts_and_metrics(self, corpus_dir, tmp_path):
        cfg = small_config(
            corpus_dir, steps=4, checkpoint_interval=2,
            out_dir=str(tmp_path / "run"),
        )
        ckpt_path, metrics_path = run_pretraining(cfg)
        assert ckpt_path.exists()
        assert (tmp_path / "run" / "step000002.ckpt").exists()
        records = [json.loads(line) for line in metrics_path.read_text().splitlines()]
        assert len(records) == 4
        assert [r["step"] for r in records] == [1, 2, 3, 4]
        for record in records:
            assert "wall_clock_s" in record and "recon" in record

    def test_unreadable_manifest_raises_before_steps(self, tmp_path):
        cfg = PretrainConfig(
            manifest=str(tmp_path / "missing.json"), steps=1, batch_size=2,
            pspace=PSpaceConfig(p_dim=32), projection_dim=32,
        )
        with pytest.raises(IOError):
            run_pretraining(cfg)
