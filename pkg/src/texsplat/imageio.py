"""Binary PPM images and raw 32-bit depth maps for interchange."""

from __future__ import annotations

import struct

import numpy as np

DEPTH_MAGIC = b"TXSPDPT1"


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H,W,3) float image in [0,1] as 8-bit binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H,W,3) image, got {image.shape}")
    h, w = image.shape[:2]
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(quantized.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM back to float64 in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    raster = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=pos)
    return raster.reshape(h, w, 3).astype(np.float64) / float(maxval)


def write_mask_ppm(path, mask: np.ndarray) -> None:
    write_ppm(path, np.repeat(mask[..., None].astype(np.float64), 3, axis=2))


def read_mask_ppm(path) -> np.ndarray:
    return read_ppm(path)[..., 0] > 0.5


def write_depth(path, depth: np.ndarray) -> None:
    """Raw little-endian float32 raster with a small header."""
    if depth.ndim != 2:
        raise ValueError(f"expected (H,W) depth, got {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(DEPTH_MAGIC))
        if magic != DEPTH_MAGIC:
            raise ValueError(f"{path}: bad depth header")
        h, w = struct.unpack("<II", f.read(8))
        raster = np.frombuffer(f.read(h * w * 4), dtype="<f4")
    return raster.reshape(h, w).astype(np.float64)
