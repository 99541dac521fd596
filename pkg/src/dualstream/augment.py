"""Ultrasound-style augmentation of single-channel intensity images.

Physics augmentations (speckle, shadow, gain) act on the texture stream only;
geometric augmentations act on the shared input before the streams split.
Every function is a pure function of (image, parameters, rng state) and
clamps its output to [0, 255].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError
from .tensor import Tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

PHYSICS_AUGMENTATIONS = ("speckle", "shadow", "gain")

# incremented on every apply_physics call; evaluation code must never move it
physics_call_count = 0


@dataclass(frozen=True, eq=False)
class Image:
    """Grayscale image; ``pixels`` is an (H, W) float array in [0, 255].

    ``history`` lists (augmentation name, drawn parameters) pairs in the
    order they were applied.
    """

    pixels: np.ndarray
    id: str = ""
    history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise DimensionError(f"image pixels must be 2-D, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def derive(self, pixels: np.ndarray, name: str | None = None, **params) -> Image:
        history = self.history + ((name, params),) if name else self.history
        return replace(self, pixels=np.clip(pixels, 0.0, 255.0), history=history)


@dataclass
class AugConfig:
    sigma_s_range: tuple[float, float] = (0.05, 0.15)
    shadow_width_frac: float = 0.15
    alpha_range: tuple[float, float] = (0.2, 0.5)
    gmin_range: tuple[float, float] = (0.6, 0.9)
    gmax_range: tuple[float, float] = (1.0, 1.3)
    physics_prob: float = 1.0
    flip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    # None means 8 px and 6 px at side 224, scaled linearly with image side
    elastic_alpha_px: float | None = None
    elastic_sigma_px: float | None = None

    def __post_init__(self):
        for name in ("sigma_s_range", "alpha_range", "gmin_range", "gmax_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: {lo} > {hi}")
        for name in ("physics_prob", "flip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.shadow_width_frac < 1.0:
            raise ConfigError("shadow_width_frac must lie in (0, 1)")

    def elastic_params(self, side: int) -> tuple[float, float]:
        alpha = 8.0 * side / 224 if self.elastic_alpha_px is None else self.elastic_alpha_px
        sigma = 6.0 * side / 224 if self.elastic_sigma_px is None else self.elastic_sigma_px
        return alpha, sigma


def speckle(img: Image, sigma_s: float, rng: np.random.Generator) -> Image:
    """Additive Gaussian noise with standard deviation sigma_s * 255."""
    if not 0.05 <= sigma_s <= 0.15:
        raise ConfigError(f"speckle sigma_s must lie in [0.05, 0.15], got {sigma_s}")
    noise = rng.normal(0.0, sigma_s * 255.0, size=img.pixels.shape)
    return img.derive(img.pixels + noise, "speckle", sigma_s=float(sigma_s))


def shadow_width(width: int, frac: float = 0.15) -> int:
    return int(math.floor(frac * width))


def shadow(
    img: Image,
    rng: np.random.Generator,
    cfg: AugConfig | None = None,
    alpha: float | None = None,
    x0: int | None = None,
) -> Image:
    """Attenuate a vertical band of floor(0.15 W) columns by a factor alpha."""
    cfg = cfg or AugConfig()
    if img.width < 8:
        raise DimensionError(f"shadow needs width >= 8, got {img.width}")
    w = shadow_width(img.width, cfg.shadow_width_frac)
    if x0 is None:
        x0 = int(rng.integers(0, img.width - w))
    if alpha is None:
        alpha = float(rng.uniform(*cfg.alpha_range))
    out = img.pixels.copy()
    out[:, x0 : x0 + w] *= alpha
    return img.derive(out, "shadow", x0=x0, width=w, alpha=alpha)


def gain_profile(height: int, g_min: float, g_max: float) -> np.ndarray:
    y = np.arange(height, dtype=np.float64)
    return g_min + (g_max - g_min) * y / height


def gain(
    img: Image,
    rng: np.random.Generator,
    cfg: AugConfig | None = None,
    g_min: float | None = None,
    g_max: float | None = None,
) -> Image:
    """Depth-dependent linear gain ramp applied row by row."""
    cfg = cfg or AugConfig()
    if img.height < 2:
        raise DimensionError(f"gain needs height >= 2, got {img.height}")
    if g_min is None:
        g_min = float(rng.uniform(*cfg.gmin_range))
    if g_max is None:
        g_max = float(rng.uniform(*cfg.gmax_range))
    out = img.pixels * gain_profile(img.height, g_min, g_max)[:, None]
    return img.derive(out, "gain", g_min=g_min, g_max=g_max)


def apply_physics(img: Image, cfg: AugConfig, rng: np.random.Generator) -> Image:
    """Apply one physics augmentation chosen uniformly among the three.

    With ``cfg.physics_prob < 1`` the call may leave the image untouched.
    """
    global physics_call_count
    physics_call_count += 1
    if rng.random() >= cfg.physics_prob:
        return img
    choice = PHYSICS_AUGMENTATIONS[int(rng.integers(3))]
    if choice == "speckle":
        return speckle(img, float(rng.uniform(*cfg.sigma_s_range)), rng)
    if choice == "shadow":
        return shadow(img, rng, cfg)
    return gain(img, rng, cfg)


def hflip(img: Image) -> Image:
    return img.derive(img.pixels[:, ::-1].copy(), "hflip")


def rotate(img: Image, angle_deg: float) -> Image:
    """Rotate about the image centre; bilinear sampling, edge-replicate padding."""
    h, w = img.pixels.shape
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    src_y = cy + c * dy - s * dx
    src_x = cx + s * dy + c * dx
    out = ndimage.map_coordinates(img.pixels, [src_y, src_x], order=1, mode="nearest")
    return img.derive(out, "rotate", angle_deg=float(angle_deg))


def elastic(img: Image, alpha_px: float, sigma_px: float, rng: np.random.Generator) -> Image:
    """Smooth random displacement field with peak magnitude alpha_px."""
    h, w = img.pixels.shape
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=(h, w)), sigma_px, mode="reflect")
        peak = np.abs(f).max()
        fields.append(f / peak * alpha_px if peak > 0 else f)
    if alpha_px == 0:
        return img.derive(img.pixels.copy(), "elastic", alpha_px=0.0, sigma_px=float(sigma_px))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = ndimage.map_coordinates(img.pixels, [yy + fields[0], xx + fields[1]], order=1, mode="nearest")
    return img.derive(out, "elastic", alpha_px=float(alpha_px), sigma_px=float(sigma_px))


def apply_geometric(img: Image, cfg: AugConfig, rng: np.random.Generator) -> Image:
    if rng.random() < cfg.flip_prob:
        img = hflip(img)
    img = rotate(img, float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)))
    alpha, sigma = cfg.elastic_params(img.width)
    return elastic(img, alpha, sigma, rng)


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(img: Image, size: int) -> Image:
    """Bilinear resampling to size x size (pixel-centre aligned, edges clamped)."""
    if size < 8:
        raise ConfigError(f"resize target must be >= 8, got {size}")
    if img.pixels.shape == (size, size):
        return img
    y0, y1, fy = _bilinear_axis(img.height, size)
    x0, x1, fx = _bilinear_axis(img.width, size)
    p = img.pixels
    rows = p[y0] * (1 - fy)[:, None] + p[y1] * fy[:, None]
    out = rows[:, x0] * (1 - fx) + rows[:, x1] * fx
    return img.derive(out)


def normalize_array(pixels: np.ndarray) -> np.ndarray:
    """(S, S) intensities in [0, 255] -> (3, S, S) ImageNet-normalized values."""
    v = pixels / 255.0
    mean = np.asarray(IMAGENET_MEAN)[:, None, None]
    std = np.asarray(IMAGENET_STD)[:, None, None]
    return (v[None] - mean) / std


def normalize_for_backbone(img: Image) -> Tensor:
    if img.height != img.width:
        raise DimensionError(f"expected a square image, got {img.pixels.shape}")
    return Tensor(normalize_array(img.pixels))
