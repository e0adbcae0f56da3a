import numpy as np
import pytest

from texsplat.latent import (decode_latent, downsample_to_latent_grid,
                             encode_latent, masked_encode)
from texsplat.textures import texture_image


class TestCodec:
    def test_shapes(self):
        z = encode_latent(np.zeros((16, 24, 3)))
        assert z.shape == (8, 12, 4)
        assert decode_latent(z).shape == (16, 24, 3)

    def test_constant_gray_roundtrips_exactly(self):
        img = np.full((16, 16, 3), 0.5)
        assert np.array_equal(decode_latent(encode_latent(img)), img)

    def test_encode_is_linear(self):
        rng = np.random.default_rng(0)
        x = rng.random((8, 8, 3))
        y = rng.random((8, 8, 3))
        lhs = encode_latent(0.3 * x + 0.7 * y)
        rhs = 0.3 * encode_latent(x) + 0.7 * encode_latent(y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_decode_is_right_inverse(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(8, 8, 4))
        z2 = encode_latent(decode_latent(z, clamp=False))
        np.testing.assert_allclose(z2, z, atol=1e-12)

    def test_block_constant_images_roundtrip(self):
        # block-aligned checkerboard is band-limited for this code
        rng = np.random.default_rng(2)
        cells = rng.random((8, 8, 3))
        img = np.repeat(np.repeat(cells, 2, axis=0), 2, axis=1)
        np.testing.assert_allclose(decode_latent(encode_latent(img)), img, atol=1e-12)

    def test_aligned_corpus_roundtrips_exactly(self):
        # textures built from 2x2-constant cells are band-limited for this code
        rng = np.random.default_rng(4)
        for _ in range(10):
            cells = rng.choice([0.1, 0.8], size=(16, 16, 1)) * rng.random(3)
            img = np.repeat(np.repeat(cells, 2, axis=0), 2, axis=1)
            np.testing.assert_allclose(decode_latent(encode_latent(img)), img,
                                       atol=1e-12)

    def test_corpus_roundtrip_boundary_bound(self):
        # canonical textures have cells >= 4 px; only blocks cut by a cell
        # boundary lose detail, so the mean error stays small and the exact
        # error is confined to those blocks
        for pattern in ("stripes", "checker", "solid"):
            img = texture_image(pattern, "green", size=32)
            back = decode_latent(encode_latent(img))
            err = np.abs(back - img)
            assert np.mean(err) < 0.1, pattern
            blocks = err.reshape(16, 2, 16, 2, 3).max(axis=(1, 3, 4))
            flat = img.reshape(16, 2, 16, 2, 3)
            uncut = np.all(flat == flat[:, :1, :, :1], axis=(1, 3)).all(axis=2)
            assert np.all(blocks[uncut] < 1e-12), pattern

    def test_dimension_errors(self):
        with pytest.raises(ValueError):
            encode_latent(np.zeros((15, 16, 3)))
        with pytest.raises(ValueError):
            decode_latent(np.zeros((8, 8, 3)))

    def test_masked_encode_zeroes_background(self):
        rng = np.random.default_rng(3)
        img = rng.random((8, 8, 3))
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:6, 2:6] = True
        z = masked_encode(img, mask)
        img2 = img.copy()
        img2[~mask] = rng.random((img2[~mask].shape[0], 3))  # perturb background
        assert np.array_equal(masked_encode(img2, mask), z)

    def test_downsample_grid(self):
        field = np.arange(16.0).reshape(4, 4)
        ds = downsample_to_latent_grid(field)
        assert ds.shape == (2, 2)
        assert ds[0, 0] == (0 + 1 + 4 + 5) / 4.0
