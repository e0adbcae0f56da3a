import numpy as np
import pytest

from texsplat.config import (ExperimentConfig, config_hash, config_to_text,
                             load_config, parse_config)
from texsplat.errors import ConfigError
from texsplat.imageio import (read_depth, read_mask_ppm, read_ppm, write_depth,
                              write_mask_ppm, write_ppm)


class TestImageIO:
    def test_ppm_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((12, 9, 3))
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-12

    def test_ppm_exact_for_quantized_values(self, tmp_path):
        img = np.round(np.linspace(0, 1, 12 * 9 * 3) * 255).reshape(12, 9, 3) / 255.0
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        assert np.array_equal(read_ppm(path), img)

    def test_mask_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        mask = rng.random((16, 16)) > 0.5
        path = tmp_path / "mask.ppm"
        write_mask_ppm(path, mask)
        assert np.array_equal(read_mask_ppm(path), mask)

    def test_depth_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        depth = rng.random((8, 10)) * 7.5
        path = tmp_path / "d.bin"
        write_depth(path, depth)
        back = read_depth(path)
        np.testing.assert_allclose(back, depth, atol=1e-6)

    def test_bad_headers(self, tmp_path):
        p = tmp_path / "x"
        p.write_bytes(b"nonsense")
        with pytest.raises(ValueError):
            read_ppm(p)
        with pytest.raises(ValueError):
            read_depth(p)


class TestConfig:
    def test_defaults_valid(self):
        ExperimentConfig().validate()

    def test_text_roundtrip(self):
        cfg = ExperimentConfig(seed=7, lam=0.4, prompt="stripes-red")
        back = parse_config(config_to_text(cfg))
        assert back == cfg

    def test_hash_stable_under_reordering(self):
        text = config_to_text(ExperimentConfig())
        lines = text.splitlines()
        header, body = lines[0], lines[1:]
        shuffled = "\n".join([header] + body[::-1]) + "\n"
        a = parse_config(text)
        b = parse_config(shuffled)
        assert config_hash(a) == config_hash(b)

    def test_unknown_key_is_error(self):
        with pytest.raises(ConfigError):
            parse_config("texsplat-config 1\nw_textt = 1.0\n")

    def test_duplicate_key_is_error(self):
        with pytest.raises(ConfigError):
            parse_config("texsplat-config 1\nseed = 1\nseed = 2\n")

    def test_version_check(self):
        with pytest.raises(ConfigError):
            parse_config("texsplat-config 99\n")

    def test_bad_values(self):
        with pytest.raises(ConfigError):
            parse_config("texsplat-config 1\nseed = banana\n")
        with pytest.raises(ConfigError):
            parse_config("texsplat-config 1\nsymmetric = maybe\n")

    def test_validation_rules(self):
        cfg = ExperimentConfig(kappa_ref=30, kappa_other=20)
        with pytest.raises(ConfigError):
            cfg.validate()
        cfg = ExperimentConfig(tau=9, views=8)
        with pytest.raises(ConfigError):
            cfg.validate()
        cfg = ExperimentConfig(acquire_mode="imagine")
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_missing_referenced_file(self):
        cfg = ExperimentConfig(denoiser_weights="/nonexistent/weights.bin")
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_comments_and_lambda_alias(self):
        cfg = parse_config(
            "texsplat-config 1\n# a comment\nlambda = 0.25  # inline\n")
        assert cfg.lam == 0.25

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")
