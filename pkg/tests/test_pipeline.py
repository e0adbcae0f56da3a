import time

import numpy as np
import pytest

from texsplat.config import ExperimentConfig, config_hash
from texsplat.errors import ConfigError, MissingArtifactError
from texsplat.imageio import read_ppm, write_ppm
from texsplat.pipeline import (Manifest, evaluate_existing, run_experiment,
                               run_stage)


def small_cfg(tmp_path, weights, **kw):
    cfg = ExperimentConfig(
        render_size=32, views=4, num_splats=32, seed=0,
        denoiser_weights=weights, prompt="solid-green", patch="checker-green",
        tune_steps=10, outer_iterations=1, finetune_iterations=10,
        kappa_ref=2, kappa_other=5, output_dir=str(tmp_path / "run"))
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


class TestRunExperiment:
    def test_zero_iterations_reports_baseline(self, tmp_path, tiny_weights_path):
        cfg = small_cfg(tmp_path, tiny_weights_path, outer_iterations=0)
        root, report = run_experiment(cfg)
        assert report.consistency == report.baseline_consistency
        assert report.similarity == report.baseline_similarity
        assert (root / "eval_report.txt").exists()
        # the scene was not touched: no fine-tuned scene artifacts
        assert not (root / "scene_iter_1.txt").exists()

    def test_full_artifacts_written(self, tmp_path, tiny_weights_path):
        cfg = small_cfg(tmp_path, tiny_weights_path)
        root, report = run_experiment(cfg)
        for rel in ("scene_initial.txt", "config.cfg", "manifest.txt",
                    "ref/reference.ppm", "token/token.bin",
                    "edits/iter_1/view_0.ppm", "edits/iter_1/edit_manifest.txt",
                    "edits/iter_1/trace_view_1.txt",
                    "scene_iter_1.txt", "renders_iter_1/view_0.ppm",
                    "eval_report.txt"):
            assert (root / rel).exists(), rel

    def test_resume_is_noop_and_deterministic(self, tmp_path, tiny_weights_path):
        cfg = small_cfg(tmp_path, tiny_weights_path)
        root, report1 = run_experiment(cfg)
        stamp = {p: p.stat().st_mtime_ns for p in root.rglob("*.ppm")}
        time.sleep(0.01)
        root2, report2 = run_experiment(cfg)
        assert root2 == root
        assert report1.to_text() == report2.to_text()
        for p, t in stamp.items():
            assert p.stat().st_mtime_ns == t, f"{p} was rewritten"

    def test_fresh_rerun_bit_identical(self, tmp_path, tiny_weights_path):
        cfg_a = small_cfg(tmp_path, tiny_weights_path,
                          output_dir=str(tmp_path / "a"))
        cfg_b = small_cfg(tmp_path, tiny_weights_path,
                          output_dir=str(tmp_path / "b"))
        root_a, rep_a = run_experiment(cfg_a)
        root_b, rep_b = run_experiment(cfg_b)
        assert rep_a.to_text() == rep_b.to_text()
        assert (root_a / "scene_iter_1.txt").read_text() == \
            (root_b / "scene_iter_1.txt").read_text()
        for rel in ("ref/reference.ppm", "edits/iter_1/view_1.ppm",
                    "renders_iter_1/view_2.ppm"):
            assert (root_a / rel).read_bytes() == (root_b / rel).read_bytes(), rel

    def test_config_hash_mismatch_rejected(self, tmp_path, tiny_weights_path):
        cfg = small_cfg(tmp_path, tiny_weights_path)
        run_experiment(cfg)
        other = small_cfg(tmp_path, tiny_weights_path, seed=1)
        with pytest.raises(ConfigError):
            run_experiment(other)

    def test_trace_line_count_matches_kappa_sum(self, tmp_path, tiny_weights_path):
        cfg = small_cfg(tmp_path, tiny_weights_path)
        root, _ = run_experiment(cfg)
        total = 0
        for tf in (root / "edits" / "iter_1").glob("trace_view_*.txt"):
            total += len([ln for ln in tf.read_text().splitlines() if ln])
        expected = cfg.kappa_ref + (cfg.views - 1) * cfg.kappa_other
        assert total == expected

    def test_eval_detects_tampering(self, tmp_path, tiny_weights_path):
        cfg = small_cfg(tmp_path, tiny_weights_path)
        root, report = run_experiment(cfg)
        target = root / "renders_iter_1" / "view_1.ppm"
        img = read_ppm(target)
        write_ppm(target, np.clip(img + 0.3, 0, 1))
        report2 = evaluate_existing(cfg)
        assert report2.to_text() != report.to_text()
        assert any("drift" in note for note in report2.notes)

    def test_token_stage_skipped_when_unweighted(self, tmp_path, tiny_weights_path):
        cfg = small_cfg(tmp_path, tiny_weights_path, w_token=0.0)
        root, _ = run_experiment(cfg)
        assert not (root / "token" / "token.bin").exists()
        manifest = (root / "manifest.txt").read_text()
        assert "stage token skipped" in manifest


class TestRunStage:
    def test_scene_stage(self, tmp_path, tiny_weights_path):
        cfg = small_cfg(tmp_path, tiny_weights_path)
        state = run_stage(cfg, "scene")
        assert (state.root / "scene_initial.txt").exists()
        assert (state.root / "renders" / "view_0.ppm").exists()

    def test_edit_requires_prerequisites(self, tmp_path):
        cfg = small_cfg(tmp_path, "")
        with pytest.raises(MissingArtifactError):
            run_stage(cfg, "edit")

    def test_acquire_without_denoiser_crop_paste(self, tmp_path):
        cfg = small_cfg(tmp_path, "")
        state = run_stage(cfg, "acquire")
        assert (state.root / "ref" / "reference.ppm").exists()

    def test_stagewise_matches_run(self, tmp_path, tiny_weights_path):
        cfg_stage = small_cfg(tmp_path, tiny_weights_path,
                              output_dir=str(tmp_path / "staged"))
        run_stage(cfg_stage, "acquire")
        run_stage(cfg_stage, "token")
        run_stage(cfg_stage, "edit", iteration=1)
        run_stage(cfg_stage, "finetune", iteration=1)
        cfg_once = small_cfg(tmp_path, tiny_weights_path,
                             output_dir=str(tmp_path / "oneshot"))
        root, _ = run_experiment(cfg_once)
        staged = tmp_path / "staged"
        assert (staged / "edits/iter_1/view_1.ppm").read_bytes() == \
            (root / "edits/iter_1/view_1.ppm").read_bytes()
        assert (staged / "scene_iter_1.txt").read_text() == \
            (root / "scene_iter_1.txt").read_text()


class TestManifest:
    def test_drift_detection(self, tmp_path):
        root = tmp_path
        f = root / "artifact.bin"
        f.write_bytes(b"hello")
        m = Manifest(root, "cafe")
        m.record(f)
        m.save()
        assert m.drifted_artifacts() == []
        f.write_bytes(b"tampered")
        assert m.drifted_artifacts() == ["artifact.bin"]

    def test_rejects_other_config(self, tmp_path):
        m = Manifest(tmp_path, "aaaa")
        m.save()
        with pytest.raises(ConfigError):
            Manifest(tmp_path, "bbbb")
