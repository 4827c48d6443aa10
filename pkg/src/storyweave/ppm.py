"""Binary PPM (P6) images, 8 bits per channel."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(image) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, image) -> None:
    pix = to_bytes(image)
    h, w, _ = pix.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pix.tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns (3, H, W) float64 in [0, 1]."""
    buf = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(buf) and not buf[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    data = buf[pos + 1 :]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {len(data)}")
    pix = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    return pix.transpose(2, 0, 1).astype(np.float64) / 255.0


def grid(frames) -> np.ndarray:
    """Place (n, 3, H, W) frames side by side as one (3, H, n*W) image."""
    frames = np.asarray(frames)
    return np.concatenate(list(frames), axis=-1)
