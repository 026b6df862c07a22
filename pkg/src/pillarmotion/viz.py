"""Motion field rendering: direction as hue, magnitude as saturation.

One image pixel per pillar, written as binary portable pixmap (P6). Empty
pillars are black; nonempty pillars below the static threshold are gray.
Row 0 of the image is the grid row at y_min.
"""

from __future__ import annotations

import numpy as np

from .pillar_grid import PillarMotionField

STATIC_THRESHOLD = 0.05
DEFAULT_SCALE = 2.0

_GRAY = 128


def flow_hue(motion) -> np.ndarray:
    """Hue in [0, 1) encoding the direction of each 2D motion vector."""
    m = np.asarray(motion, dtype=float)
    return np.mod(np.arctan2(m[..., 1], m[..., 0]) / (2.0 * np.pi), 1.0)


def _hsv_to_rgb(h, s, v):
    h6 = h * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def render_field(field: PillarMotionField, scale: float = DEFAULT_SCALE,
                 static_threshold: float = STATIC_THRESHOLD) -> np.ndarray:
    """(H, W, 3) uint8 image of a motion field."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    norm = np.linalg.norm(field.motion, axis=-1)
    hue = flow_hue(field.motion)
    sat = np.minimum(norm / scale, 1.0)
    rgb = (_hsv_to_rgb(hue, sat, np.ones_like(hue)) * 255.0).round().astype(np.uint8)
    rgb[field.nonempty & (norm < static_threshold)] = _GRAY
    rgb[~field.nonempty] = 0
    return rgb


def write_ppm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("expected an (H, W, 3) uint8 image")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a binary portable pixmap")
        dims = fh.readline().split()
        maxval = fh.readline().strip()
        w, h = int(dims[0]), int(dims[1])
        if maxval != b"255":
            raise ValueError(f"{path}: unsupported max value {maxval!r}")
        data = fh.read(h * w * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
