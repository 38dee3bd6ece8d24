"""
Ellipse-union visibility masks and the masked/noisy corruption used to build
FusionMNIST and FusionCelebA context images, plus the CelebA target crop.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import cv2
import numpy as np

from errors import DataGenerationError, ShapeMismatchError

logger = logging.getLogger(__name__)

MNIST_SIZE = 32
CELEBA_RAW_SHAPE = (3, 218, 178)
CELEBA_CROP = 148
CELEBA_SIZE = 64
# (218 - 148) / 2, (178 - 148) / 2
CELEBA_OFFSET = (35, 15)

MAX_RESAMPLES = 100
# cv2 draws in fixed point with 4 fractional bits
DRAW_SHIFT = 4
DRAW_ONE = 1 << DRAW_SHIFT


@dataclass
class MaskConfig:
    """Ellipse sampling ranges; axis lengths are fractions of min(h, w)"""
    min_ellipses: int = 1
    max_ellipses: int = 3
    min_axis: float = 0.1
    max_axis: float = 0.4
    noise_std: float = 0.3

    def to_dict(self) -> Dict:
        return asdict(self)


def sample_ellipses(rng: np.random.Generator, h: int, w: int, cfg: MaskConfig) -> List[Dict]:
    """Draw ellipse parameters (center, semi-axes in pixels, angle in degrees)"""
    count = int(rng.integers(cfg.min_ellipses, cfg.max_ellipses + 1))
    scale = min(h, w)
    ellipses = []
    for _ in range(count):
        for _ in range(MAX_RESAMPLES):
            a = rng.uniform(cfg.min_axis, cfg.max_axis) * scale
            b = rng.uniform(cfg.min_axis, cfg.max_axis) * scale
            if a > 0 and b > 0:
                break
        else:
            raise DataGenerationError(f"axis range [{cfg.min_axis}, {cfg.max_axis}] only yields degenerate ellipses")
        ellipses.append({
            'cx': float(rng.uniform(0, w)),
            'cy': float(rng.uniform(0, h)),
            'a': float(a),
            'b': float(b),
            'angle': float(rng.uniform(0.0, 180.0)),
        })
    return ellipses


def rasterize_ellipses(ellipses: List[Dict], h: int, w: int) -> np.ndarray:
    """Union of filled ellipses drawn with cv2.ellipse onto a uint8 canvas"""
    canvas = np.zeros((h, w), dtype=np.uint8)
    for e in ellipses:
        # cv2 puts pixel centers on integer coordinates, the sampler at +0.5
        center = (int(round((e['cx'] - 0.5) * DRAW_ONE)), int(round((e['cy'] - 0.5) * DRAW_ONE)))
        axes = (max(int(round(e['a'] * DRAW_ONE)), 1), max(int(round(e['b'] * DRAW_ONE)), 1))
        cv2.ellipse(canvas, center, axes, float(e['angle']), 0, 360, 1, thickness=-1,
                    lineType=cv2.LINE_8, shift=DRAW_SHIFT)
    return canvas.astype(bool)


def ellipse_union_contains(ellipses: List[Dict], xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Exact membership of continuous points (x, y) in the union of the sampled ellipses"""
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    for e in ellipses:
        theta = np.deg2rad(e['angle'])
        dx, dy = xs - e['cx'], ys - e['cy']
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        inside |= (u / e['a']) ** 2 + (v / e['b']) ** 2 <= 1.0
    return inside


def gen_ellipse_mask_with_params(rng: np.random.Generator, h: int, w: int,
                                 cfg: MaskConfig) -> Tuple[np.ndarray, List[Dict]]:
    if h <= 0 or w <= 0:
        raise ShapeMismatchError(f"mask size must be positive, got {h}x{w}")
    for _ in range(MAX_RESAMPLES):
        ellipses = sample_ellipses(rng, h, w, cfg)
        mask = rasterize_ellipses(ellipses, h, w)
        # a mask must show something
        if mask.any():
            return mask, ellipses
    raise DataGenerationError("could not draw a non-empty mask; check the axis range")


def gen_ellipse_mask(rng: np.random.Generator, h: int, w: int, cfg: Optional[MaskConfig] = None) -> np.ndarray:
    mask, _ = gen_ellipse_mask_with_params(rng, h, w, cfg or MaskConfig())
    return mask


def corrupt_with_mask(target: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                      noise_std: float) -> np.ndarray:
    """Blacken pixels outside the mask, add Gaussian noise, clip to [0, 1]"""
    if mask.shape != target.shape[-2:]:
        raise ShapeMismatchError(f"mask {mask.shape} does not match image {target.shape}")
    out = target * mask[None].astype(target.dtype)
    if noise_std > 0:
        out = out + rng.normal(0.0, noise_std, size=out.shape).astype(target.dtype)
    return np.clip(out, 0.0, 1.0)


def corrupt_mnist(target: np.ndarray, rng: np.random.Generator, cfg: Optional[MaskConfig] = None,
                  mask: Optional[np.ndarray] = None) -> np.ndarray:
    """One noisy partial view of a padded 1x32x32 digit"""
    cfg = cfg or MaskConfig()
    if target.shape != (1, MNIST_SIZE, MNIST_SIZE):
        raise ShapeMismatchError(f"expected a 1x{MNIST_SIZE}x{MNIST_SIZE} digit, got {target.shape}")
    if mask is None:
        mask = gen_ellipse_mask(rng, MNIST_SIZE, MNIST_SIZE, cfg)
    return corrupt_with_mask(target, mask, rng, cfg.noise_std)


def pad_mnist(digit: np.ndarray) -> np.ndarray:
    """28x28 uint8 or float digit -> zero-padded 1x32x32 float32 in [0, 1]"""
    image = digit.astype(np.float32)
    if image.max() > 1.0:
        image /= 255.0
    pad = (MNIST_SIZE - image.shape[-1]) // 2
    return np.pad(image, ((pad, pad), (pad, pad)))[None]


def make_celeba_target(raw: np.ndarray) -> np.ndarray:
    """Aligned 3x218x178 CelebA image -> centered 148 crop, bilinear resize to 3x64x64"""
    if raw.shape != CELEBA_RAW_SHAPE:
        raise ShapeMismatchError(f"expected an aligned CelebA image of shape {CELEBA_RAW_SHAPE}, got {raw.shape}")
    top, left = CELEBA_OFFSET
    crop = raw[:, top:top + CELEBA_CROP, left:left + CELEBA_CROP]
    hwc = np.ascontiguousarray(crop.transpose(1, 2, 0), dtype=np.float64)
    resized = cv2.resize(hwc, (CELEBA_SIZE, CELEBA_SIZE), interpolation=cv2.INTER_LINEAR)
    return np.clip(resized.transpose(2, 0, 1), 0.0, 1.0).astype(np.float32)
