import numpy as np

from texsplat.cli import main
from texsplat.config import ExperimentConfig, config_to_text
from texsplat.imageio import read_ppm
from texsplat.scene import save_scene, synth_scene


def write_cfg(tmp_path, weights="", **kw):
    cfg = ExperimentConfig(
        render_size=32, views=4, num_splats=32, seed=0,
        denoiser_weights=weights, prompt="solid-green", patch="checker-green",
        tune_steps=8, outer_iterations=1, finetune_iterations=8,
        kappa_ref=2, kappa_other=4, output_dir=str(tmp_path / "run"))
    for k, v in kw.items():
        setattr(cfg, k, v)
    path = tmp_path / "exp.cfg"
    path.write_text(config_to_text(cfg))
    return path, cfg


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("texsplat-config 1\nnot_a_key = 1\n")
        assert main(["run", "--config", str(bad)]) == 2

    def test_missing_artifact_is_4(self, tmp_path):
        path, _ = write_cfg(tmp_path)
        assert main(["edit", "--config", str(path)]) == 4

    def test_missing_config_file_is_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.cfg")]) == 2


class TestCommands:
    def test_synth_scene(self, tmp_path, capsys):
        path, cfg = write_cfg(tmp_path)
        assert main(["synth-scene", "--config", str(path)]) == 0
        assert (tmp_path / "run" / "scene_initial.txt").exists()
        assert (tmp_path / "run" / "renders" / "view_3.ppm").exists()

    def test_acquire_ref_crop_paste(self, tmp_path):
        path, _ = write_cfg(tmp_path)
        assert main(["acquire-ref", "--config", str(path),
                     "--mode", "crop-paste"]) == 0
        assert (tmp_path / "run" / "ref" / "reference.ppm").exists()

    def test_full_run_and_trace_and_eval(self, tmp_path, capsys,
                                         tiny_weights_path):
        path, cfg = write_cfg(tmp_path, weights=tiny_weights_path)
        assert main(["run", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        assert "similarity" in out
        assert (tmp_path / "run" / "eval_report.txt").exists()

        assert main(["trace", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        expected = cfg.kappa_ref + (cfg.views - 1) * cfg.kappa_other
        assert f"total denoising steps: {expected}" in out

        assert main(["eval", "--config", str(path)]) == 0
        assert "consistency_error" in capsys.readouterr().out

    def test_run_is_idempotent(self, tmp_path, tiny_weights_path, capsys):
        path, _ = write_cfg(tmp_path, weights=tiny_weights_path)
        assert main(["run", "--config", str(path)]) == 0
        first = capsys.readouterr().out
        assert main(["run", "--config", str(path)]) == 0
        second = capsys.readouterr().out
        assert first == second

    def test_seed_override_changes_outputs(self, tmp_path, capsys):
        path, _ = write_cfg(tmp_path)
        assert main(["synth-scene", "--config", str(path), "--seed", "5",
                     "--output-dir", str(tmp_path / "s5")]) == 0
        assert main(["synth-scene", "--config", str(path), "--seed", "6",
                     "--output-dir", str(tmp_path / "s6")]) == 0
        a = (tmp_path / "s5" / "scene_initial.txt").read_text()
        b = (tmp_path / "s6" / "scene_initial.txt").read_text()
        assert a != b

    def test_render_command(self, tmp_path, capsys):
        scene, _ = synth_scene("sphere-blob", 0, width=32, height=32)
        scene_path = tmp_path / "scene.txt"
        save_scene(scene_path, scene)
        out_path = tmp_path / "r.ppm"
        assert main(["render", "--scene", str(scene_path), "--azimuth", "45",
                     "--size", "32", "--out", str(out_path)]) == 0
        img = read_ppm(out_path)
        assert img.shape == (32, 32, 3)
        assert img.max() > 0.1
