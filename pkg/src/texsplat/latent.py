"""Fixed linear latent codec between RGB images and H/2 x W/2 x 4 grids.

The code is a hand-picked linear basis rather than a learned autoencoder so
that invert/denoise round trips stay interpretable in image space. Channels
0..2 hold the 2x2 block means of R, G, B; channel 3 holds the vertical
luminance step inside the block. encode(decode(z)) == z exactly, and
decode(encode(img)) reproduces any image that is constant within 2x2 blocks
(band-limited in the block sense) up to the [0,1] clamp.
"""

from __future__ import annotations

import numpy as np

DOWNSAMPLE = 2
LATENT_CHANNELS = 4


def encode_latent(image: np.ndarray) -> np.ndarray:
    """Encode an (H,W,3) image into an (H/2, W/2, 4) latent grid."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H,W,3) image, got {image.shape}")
    h, w = image.shape[:2]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError(f"image dimensions must be divisible by {DOWNSAMPLE}")
    blocks = image.reshape(h // 2, 2, w // 2, 2, 3)
    means = blocks.mean(axis=(1, 3))
    gray = blocks.mean(axis=4)                      # (h/2, 2, w/2, 2)
    vstep = 0.5 * (gray[:, 0].mean(axis=2) - gray[:, 1].mean(axis=2))
    return np.concatenate([means, vstep[..., None]], axis=2)


def decode_latent(z: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Decode a latent grid back to an (H,W,3) image (right-inverse of encode)."""
    if z.ndim != 3 or z.shape[2] != LATENT_CHANNELS:
        raise ValueError(f"expected (h,w,{LATENT_CHANNELS}) latent, got {z.shape}")
    hh, ww = z.shape[:2]
    means = z[..., :3]
    vstep = z[..., 3:4]
    top = means + vstep
    bottom = means - vstep
    image = np.empty((hh, 2, ww, 2, 3))
    image[:, 0, :, 0] = top
    image[:, 0, :, 1] = top
    image[:, 1, :, 0] = bottom
    image[:, 1, :, 1] = bottom
    image = image.reshape(hh * 2, ww * 2, 3)
    if clamp:
        image = np.clip(image, 0.0, 1.0)
    return image


def masked_encode(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Encode with background pixels zeroed out first."""
    return encode_latent(image * mask[..., None])


def downsample_to_latent_grid(field: np.ndarray) -> np.ndarray:
    """2x2 block-mean a per-pixel scalar field down to latent resolution."""
    h, w = field.shape
    return field.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
