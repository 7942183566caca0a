"""Binary PPM (P6, 8-bit) image I/O and float/byte conversions.

Model-side images are (C, H, W) float in [-1, 1]; file-side images are
(H, W, 3) uint8. The float-to-byte map is affine with round-half-up.
"""

from __future__ import annotations

import numpy as np


def write_ppm(path, img: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval, then a single whitespace byte
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # the single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported, maxval {maxval}")
    data = raw[pos : pos + w * h * 3]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def float_to_bytes(img: np.ndarray) -> np.ndarray:
    """(C, H, W) float in [-1, 1] -> (H, W, 3) uint8, round-half-up."""
    img = np.asarray(img, dtype=np.float64)
    scaled = (np.clip(img, -1.0, 1.0) + 1.0) * 127.5
    out = np.floor(scaled + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def bytes_to_float(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) uint8 -> (C, H, W) float in [-1, 1]."""
    img = np.asarray(img)
    return (img.astype(np.float64) / 127.5 - 1.0).astype(dtype).transpose(2, 0, 1)
