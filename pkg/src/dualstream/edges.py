"""Sobel boundary maps for the edge stream."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import Image
from .errors import DimensionError
from .tensor import Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])
EPS_MAX = 1e-8


@dataclass(frozen=True, eq=False)
class EdgeMap:
    magnitudes: np.ndarray

    @property
    def height(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def width(self) -> int:
        return self.magnitudes.shape[1]


def _correlate3(p: np.ndarray, k: np.ndarray) -> np.ndarray:
    h, w = p.shape
    padded = np.pad(p, 1, mode="edge")
    out = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            if k[i, j] != 0.0:
                out += k[i, j] * padded[i : i + h, j : j + w]
    return out


def sobel_gradients(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical responses (cross-correlation, replicated borders)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or min(pixels.shape) < 3:
        raise DimensionError(f"sobel needs an image of at least 3x3, got shape {pixels.shape}")
    return _correlate3(pixels, SOBEL_X), _correlate3(pixels, SOBEL_Y)


def sobel_magnitude(pixels: np.ndarray) -> np.ndarray:
    """Unnormalized gradient magnitude of intensities scaled to [0, 1]."""
    gx, gy = sobel_gradients(np.asarray(pixels, dtype=np.float64) / 255.0)
    return np.sqrt(gx * gx + gy * gy)


def sobel_array(pixels: np.ndarray) -> np.ndarray:
    mag = sobel_magnitude(pixels)
    return mag / max(mag.max(), EPS_MAX)


def sobel(img: Image) -> EdgeMap:
    """Edge magnitude normalized by its per-image maximum into [0, 1]."""
    return EdgeMap(sobel_array(img.pixels))


def edge_to_tensor(e: EdgeMap, size: int | None = None) -> Tensor:
    if size is not None and e.magnitudes.shape != (size, size):
        raise DimensionError(f"edge map is {e.magnitudes.shape}, model expects ({size}, {size})")
    return Tensor(e.magnitudes[None])
