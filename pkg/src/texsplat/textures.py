"""Synthetic texture corpus and the fixed prompt-token vocabulary.

32 texture classes (4 patterns x 8 colors) stand in for natural textures.
Each class name maps to a fixed seeded embedding vector; prompts are short
sequences of these vectors.
"""

from __future__ import annotations

import numpy as np

PATTERNS = ("stripes", "checker", "blobs", "solid")
COLOR_TABLE = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.12, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "gray": (0.55, 0.55, 0.55),
}
VOCAB_NAMES = tuple(f"{p}-{c}" for p in PATTERNS for c in COLOR_TABLE)
TOKEN_DIM = 16
_VOCAB_SEED = 11


def token_vocabulary(dim: int = TOKEN_DIM, seed: int = _VOCAB_SEED) -> dict[str, np.ndarray]:
    """Fixed seeded unit embedding per texture name."""
    rng = np.random.default_rng(seed)
    vocab = {}
    for name in VOCAB_NAMES:
        v = rng.normal(size=dim)
        vocab[name] = v / np.linalg.norm(v)
    return vocab


def texture_image(pattern: str, color: str, size: int = 64,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """One texture sample. rng jitters phase/scale; None gives the canonical one."""
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}")
    if color not in COLOR_TABLE:
        raise ValueError(f"unknown color {color!r}")
    fg = np.array(COLOR_TABLE[color])
    bg = 0.22 * fg + 0.04
    rng = rng or np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size]

    if pattern == "stripes":
        width = int(rng.integers(4, 9))
        phase = int(rng.integers(0, width))
        horizontal = bool(rng.integers(0, 2))
        coord = yy if horizontal else xx
        on = ((coord + phase) // width) % 2 == 0
    elif pattern == "checker":
        cell = int(rng.integers(4, 9))
        ox, oy = int(rng.integers(0, cell)), int(rng.integers(0, cell))
        on = (((xx + ox) // cell) + ((yy + oy) // cell)) % 2 == 0
    elif pattern == "blobs":
        on = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(5, 9))):
            cx, cy = rng.integers(0, size, size=2)
            r = rng.integers(size // 10, size // 5)
            on |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
    else:  # solid
        on = np.ones((size, size), dtype=bool)

    img = np.where(on[..., None], fg, bg)
    return img


def class_for_name(name: str) -> tuple[str, str]:
    pattern, color = name.split("-")
    return pattern, color


def training_corpus(seed: int, size: int = 32, variants: int = 3) -> list[tuple[np.ndarray, str]]:
    """Deterministic (image, class-name) pairs covering every vocabulary class.

    Half the variants are masked to an elliptical footprint so the denoiser
    also sees object-silhouette latents with black backgrounds.
    """
    rng = np.random.default_rng(seed)
    items = []
    for name in VOCAB_NAMES:
        pattern, color = class_for_name(name)
        for v in range(variants):
            img = texture_image(pattern, color, size=size, rng=rng)
            if v % 2 == 1:
                yy, xx = np.mgrid[0:size, 0:size]
                cx = size / 2 + rng.uniform(-size / 8, size / 8)
                cy = size / 2 + rng.uniform(-size / 8, size / 8)
                ax = size * rng.uniform(0.28, 0.42)
                ay = size * rng.uniform(0.28, 0.42)
                ellipse = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
                img = img * ellipse[..., None]
            items.append((img, name))
    return items


def texture_patch(name: str, size: int = 64, seed: int = 0) -> np.ndarray:
    """Canonical patch for crop-paste reference acquisition."""
    pattern, color = class_for_name(name)
    return texture_image(pattern, color, size=size, rng=np.random.default_rng(seed))
