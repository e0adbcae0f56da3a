"""Deterministic image feature embedder, the stand-in for a big image-text model.

Masked image statistics (color moments, color-normalized pattern layout,
gradient energy) go through a fixed seeded random projection, a mild tanh,
and L2 normalization. Background pixels never influence the result. Pattern
features are computed on mean/std-normalized grayscale, so recoloring a
texture moves only the color coordinates; that is what makes texture-change
directions comparable across patterns.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyMaskError

FEATURE_DIM = 64
_EMBED_SEED = 7
_PROJ_SEED = 13
_GRID = 8
_TANH_GAIN = 0.6


def _raw_features(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H,W,3) image, got {image.shape}")
    if mask.shape != image.shape[:2]:
        raise ValueError("mask shape must match image")
    m = mask.astype(bool)
    count = int(m.sum())
    if count == 0:
        raise EmptyMaskError("cannot embed an image with an empty mask")

    pix = image[m]                                  # (count, 3)
    mean_rgb = pix.mean(axis=0)
    std_rgb = pix.std(axis=0)

    gray = image.mean(axis=2)
    gvals = gray[m]
    gmean, gstd = gvals.mean(), gvals.std()
    gnorm = np.where(m, (gray - gmean) / max(gstd, 1e-6), 0.0)

    # gradient energy of the normalized pattern, masked on both sides
    mx = m[:, 1:] & m[:, :-1]
    my = m[1:, :] & m[:-1, :]
    gx = np.abs(np.diff(gnorm, axis=1))[mx].mean() if mx.any() else 0.0
    gy = np.abs(np.diff(gnorm, axis=0))[my].mean() if my.any() else 0.0

    # masked average pooling of the normalized pattern onto a coarse grid
    h, w = gray.shape
    grid = np.zeros((_GRID, _GRID))
    ys = (np.linspace(0, h, _GRID + 1)).astype(int)
    xs = (np.linspace(0, w, _GRID + 1)).astype(int)
    for i in range(_GRID):
        for j in range(_GRID):
            cell_m = m[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            if cell_m.any():
                grid[i, j] = gnorm[ys[i]:ys[i + 1], xs[j]:xs[j + 1]][cell_m].mean()

    return np.concatenate([
        [1.0],                      # bias: the embedding is never the zero vector
        2.0 * mean_rgb,
        std_rgb,
        [gx, gy],
        grid.ravel(),
    ])


def _projection(n_features: int) -> np.ndarray:
    rng = np.random.default_rng(_EMBED_SEED)
    return rng.normal(size=(FEATURE_DIM, n_features)) / np.sqrt(n_features)


_PROJ_CACHE: dict[int, np.ndarray] = {}


def embed_image(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Unit feature vector of the masked object region. Deterministic."""
    phi = _raw_features(image, mask)
    proj = _PROJ_CACHE.get(len(phi))
    if proj is None:
        proj = _projection(len(phi))
        _PROJ_CACHE[len(phi)] = proj
    u = np.tanh(_TANH_GAIN * (proj @ phi))
    return u / np.linalg.norm(u)


def texture_delta(unedited: np.ndarray, reference: np.ndarray,
                  mask: np.ndarray) -> np.ndarray:
    """Feature-space texture difference, unedited minus reference.

    The shared mask applies to both images (same pose). The edit direction,
    i.e. where the unedited object should move, is the negation of this.
    """
    return embed_image(unedited, mask) - embed_image(reference, mask)


def make_projector(token_dim: int, feat_dim: int = FEATURE_DIM,
                   seed: int = _PROJ_SEED) -> np.ndarray:
    """Fixed seeded linear bridge from prompt-embedding to feature space."""
    rng = np.random.default_rng(seed)
    return rng.normal(size=(feat_dim, token_dim)) / np.sqrt(token_dim)
