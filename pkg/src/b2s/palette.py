"""Class color palette and HSV helpers.

The palette is the contract that makes condition adherence measurable with a
rule-based segmenter: sky lives in hue band [200, 230] degrees, road is
achromatic with value in [0.25, 0.55], vehicles live in the red hue band
[0, 20] + [340, 360]. Weather styling may move value/saturation but never a
pixel out of its class band.
"""

from __future__ import annotations

import numpy as np

PALETTE_VERSION = "v1"

CLASSES = ["road", "vehicle"]
# Segmentation label codes (background is the implicit all-zero class).
BACKGROUND, ROAD, VEHICLE = 0, 1, 2

SKY_HUE = (200.0, 230.0)
ROAD_VALUE = (0.25, 0.55)
VEHICLE_HUE_MAX = 20.0  # band is [0, VEHICLE_HUE_MAX] plus [360 - VEHICLE_HUE_MAX, 360]
ACHROMATIC_SAT = 0.15  # below this saturation hue is meaningless


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV (h in degrees) to RGB in [0, 1]. Output shape (..., 3)."""
    h = (np.asarray(h, dtype=np.float64) % 360.0) / 60.0
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    channels = np.stack(
        [
            np.choose(i, [v, q, p, p, t, v]),
            np.choose(i, [t, v, v, q, p, p]),
            np.choose(i, [p, p, t, v, v, q]),
        ],
        axis=-1,
    )
    return channels


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of hsv_to_rgb; returns (hue degrees, saturation, value)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
        hr = np.where(c > 0, ((g - b) / np.where(c > 0, c, 1.0)) % 6.0, 0.0)
        hg = np.where(c > 0, (b - r) / np.where(c > 0, c, 1.0) + 2.0, 0.0)
        hb = np.where(c > 0, (r - g) / np.where(c > 0, c, 1.0) + 4.0, 0.0)
    h = np.where(v == r, hr, np.where(v == g, hg, hb)) * 60.0
    h = np.where(c > 0, h % 360.0, 0.0)
    return h, s, v


def classify_hsv(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-pixel class code from the palette bands.

    Achromatic pixels are road iff their value sits in the road band;
    chromatic pixels are classified by hue band. Anything else (including the
    sky band) is background.
    """
    achromatic = s < ACHROMATIC_SAT
    road = achromatic & (v >= ROAD_VALUE[0]) & (v <= ROAD_VALUE[1])
    vehicle = ~achromatic & ((h <= VEHICLE_HUE_MAX) | (h >= 360.0 - VEHICLE_HUE_MAX))
    out = np.zeros(np.shape(h), dtype=np.uint8)
    out[road] = ROAD
    out[vehicle] = VEHICLE
    return out


def class_color(label: int) -> tuple[float, float, float]:
    """Reference display color per class (used for semantic-map previews)."""
    if label == ROAD:
        return (0.40, 0.40, 0.40)
    if label == VEHICLE:
        return (0.80, 0.10, 0.10)
    return (0.55, 0.70, 0.90)
