"""
FusionT-LESS occlusions: cut objects out of occluder-class images with a
Canny edge detector, keep them in an offline sprite bank, and paste 5-8 of
them over a target at random scales, rotations and positions.
"""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from PIL import Image

from errors import DataGenerationError, ManifestError, ShapeMismatchError

logger = logging.getLogger(__name__)

TLESS_TARGET_CLASSES = frozenset(range(19, 25))
TLESS_OCCLUDERS_TRAIN = frozenset([1, 2, 5, 6, 7, 11, 12, 13, 14, 25, 26, 27])
TLESS_OCCLUDERS_EVAL = frozenset([3, 4, 8, 9, 10, 15, 16, 17, 18, 28, 29, 30])
TLESS_HOLDOUT_EVERY = 10

SPRITE_MANIFEST = 'sprites.json'


def occluder_classes(split: str) -> frozenset:
    if split == 'train':
        return TLESS_OCCLUDERS_TRAIN
    if split in ('eval', 'test'):
        return TLESS_OCCLUDERS_EVAL
    raise DataGenerationError(f"Unknown split: {split}")


def is_holdout(index: int) -> bool:
    """Every tenth target image goes to evaluation"""
    return index % TLESS_HOLDOUT_EVERY == TLESS_HOLDOUT_EVERY - 1


@dataclass
class CannyConfig:
    low_threshold: int = 50
    high_threshold: int = 150
    blur_kernel: int = 5


@dataclass
class OcclusionConfig:
    min_sprites: int = 5
    max_sprites: int = 8
    min_scale: float = 0.5
    max_scale: float = 1.2
    max_rotation: float = 360.0


@dataclass
class Sprite:
    """RGB crop [3, h, w] in [0, 1] with a boolean alpha mask [h, w] tight to the object"""
    rgb: np.ndarray
    alpha: np.ndarray
    source_class: int = 0


@dataclass
class SpriteSet:
    sprites: List[Sprite] = field(default_factory=list)
    source_class: int = 0

    def __len__(self) -> int:
        return len(self.sprites)

    def extend(self, other: "SpriteSet") -> None:
        self.sprites.extend(other.sprites)


def to_uint8_hwc(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def _refine_edge_pixels(gray: np.ndarray, filled: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Edge pixels sit on either side of the true boundary; keep those that look like the object"""
    edge_pixels = edges & filled
    interior = filled & ~edge_pixels
    ring = cv2.dilate(filled.astype(np.uint8), np.ones((3, 3), np.uint8)).astype(bool) & ~filled
    background = float(np.median(gray[ring])) if ring.any() else 0.0
    foreground = float(np.median(gray[interior])) if interior.any() else 255.0
    keep = np.abs(gray.astype(np.float64) - foreground) <= np.abs(gray.astype(np.float64) - background)
    return interior | (edge_pixels & keep)


def cut_objects_canny(image: np.ndarray, cfg: Optional[CannyConfig] = None, source_class: int = 0) -> SpriteSet:
    """
    Cut the object out of an occluder image.

    The sprite is everything inside the filled outer contours of the Canny
    edges. Images without any contour come back as an empty SpriteSet.
    """
    cfg = cfg or CannyConfig()
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeMismatchError(f"expected a [C, H, W] image, got {image.shape}")

    hwc = to_uint8_hwc(image)
    gray = cv2.cvtColor(hwc, cv2.COLOR_RGB2GRAY) if hwc.shape[2] == 3 else hwc[:, :, 0]
    blurred = cv2.GaussianBlur(gray, (cfg.blur_kernel, cfg.blur_kernel), 0)
    edges = cv2.Canny(blurred, cfg.low_threshold, cfg.high_threshold)

    contours, _ = cv2.findContours(edges, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    if not contours:
        logger.warning(f"⚠️ No contour found in occluder image of class {source_class}, skipping")
        return SpriteSet([], source_class)

    filled = np.zeros_like(gray)
    cv2.drawContours(filled, contours, -1, 255, thickness=cv2.FILLED)
    mask = _refine_edge_pixels(gray, filled > 0, edges > 0)
    if not mask.any():
        logger.warning(f"⚠️ Empty object mask in occluder image of class {source_class}, skipping")
        return SpriteSet([], source_class)

    x, y, w, h = cv2.boundingRect(mask.astype(np.uint8))
    rgb = image[:, y:y + h, x:x + w]
    if rgb.shape[0] == 1:
        rgb = np.repeat(rgb, 3, axis=0)
    sprite = Sprite(rgb.astype(np.float32), mask[y:y + h, x:x + w].copy(), source_class)
    return SpriteSet([sprite], source_class)


def _rotate_bound(rgb_hwc: np.ndarray, alpha: np.ndarray, angle: float,
                  scale: float) -> Tuple[np.ndarray, np.ndarray]:
    """Scale and rotate without clipping the corners"""
    h, w = alpha.shape
    center = (w / 2.0, h / 2.0)
    matrix = cv2.getRotationMatrix2D(center, angle, scale)
    cos, sin = abs(matrix[0, 0]), abs(matrix[0, 1])
    new_w = max(1, int(np.ceil(h * sin + w * cos)))
    new_h = max(1, int(np.ceil(h * cos + w * sin)))
    matrix[0, 2] += new_w / 2.0 - center[0]
    matrix[1, 2] += new_h / 2.0 - center[1]
    rgb = cv2.warpAffine(rgb_hwc, matrix, (new_w, new_h), flags=cv2.INTER_LINEAR, borderValue=0)
    mask = cv2.warpAffine(alpha.astype(np.uint8), matrix, (new_w, new_h), flags=cv2.INTER_NEAREST, borderValue=0)
    if rgb.ndim == 2:
        rgb = rgb[:, :, None]
    return rgb, mask.astype(bool)


class OcclusionComposer:
    def __init__(self, sprites: SpriteSet, cfg: Optional[OcclusionConfig] = None):
        """
        Paste random occluders from a sprite bank over target images

        Args:
            sprites: Occluder sprites, all from one split
            cfg: Count, scale and rotation ranges
        """
        self.sprites = sprites
        self.cfg = cfg or OcclusionConfig()

    def sample_count(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.cfg.min_sprites, self.cfg.max_sprites + 1))

    def compose(self, target: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, Dict]:
        """Returns the occluded image and the per-sprite placement parameters"""
        count = self.sample_count(rng)
        if count > 0 and len(self.sprites) == 0:
            raise DataGenerationError("cannot occlude with an empty sprite set")

        _, H, W = target.shape
        canvas = target.transpose(1, 2, 0).astype(np.float32).copy()
        occluded = np.zeros((H, W), dtype=bool)
        placements = []
        # later sprites are pasted over earlier ones
        for _ in range(count):
            index = int(rng.integers(len(self.sprites)))
            sprite = self.sprites.sprites[index]
            scale = float(rng.uniform(self.cfg.min_scale, self.cfg.max_scale))
            angle = float(rng.uniform(0.0, self.cfg.max_rotation))
            rgb, alpha = _rotate_bound(sprite.rgb.transpose(1, 2, 0).astype(np.float32), sprite.alpha, angle, scale)

            h, w = alpha.shape
            if h > H or w > W:
                fit = min(H / h, W / w)
                size = (max(1, int(w * fit)), max(1, int(h * fit)))
                rgb = cv2.resize(rgb, size, interpolation=cv2.INTER_LINEAR)
                alpha = cv2.resize(alpha.astype(np.uint8), size, interpolation=cv2.INTER_NEAREST).astype(bool)
                if rgb.ndim == 2:
                    rgb = rgb[:, :, None]
                h, w = alpha.shape

            cx, cy = float(rng.uniform(0, W)), float(rng.uniform(0, H))
            top, left = int(round(cy - h / 2.0)), int(round(cx - w / 2.0))
            y0, x0 = max(top, 0), max(left, 0)
            y1, x1 = min(top + h, H), min(left + w, W)
            if y1 > y0 and x1 > x0:
                patch_alpha = alpha[y0 - top:y1 - top, x0 - left:x1 - left]
                patch_rgb = rgb[y0 - top:y1 - top, x0 - left:x1 - left]
                region = canvas[y0:y1, x0:x1]
                region[patch_alpha] = patch_rgb[patch_alpha][:, :region.shape[2]]
                occluded[y0:y1, x0:x1] |= patch_alpha

            placements.append({'sprite': index, 'scale': scale, 'angle': angle, 'cx': cx, 'cy': cy})

        params = {'count': count, 'placements': placements, 'occluded_fraction': float(occluded.mean())}
        return np.clip(canvas.transpose(2, 0, 1), 0.0, 1.0), params


def compose_tless_occlusion(target: np.ndarray, sprites: SpriteSet, rng: np.random.Generator,
                            cfg: Optional[OcclusionConfig] = None) -> np.ndarray:
    image, _ = OcclusionComposer(sprites, cfg).compose(target, rng)
    return image


def save_sprite_bank(sprites: SpriteSet, directory: str) -> str:
    """Write sprites as RGB + alpha PNG pairs with a JSON index"""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, sprite in enumerate(sprites.sprites):
        rgb_name, alpha_name = f"sprite_{i:05d}.png", f"sprite_{i:05d}_alpha.png"
        Image.fromarray(to_uint8_hwc(sprite.rgb)).save(os.path.join(directory, rgb_name))
        Image.fromarray(sprite.alpha.astype(np.uint8) * 255).save(os.path.join(directory, alpha_name))
        entries.append({'rgb': rgb_name, 'alpha': alpha_name, 'source_class': sprite.source_class})

    path = os.path.join(directory, SPRITE_MANIFEST)
    with open(path, 'w') as f:
        json.dump({'sprites': entries}, f, indent=2)
    logger.info(f"✅ Saved {len(entries)} sprites to {directory}")
    return path


def load_sprite_bank(directory: str, classes: Optional[Sequence[int]] = None) -> SpriteSet:
    path = os.path.join(directory, SPRITE_MANIFEST)
    if not os.path.exists(path):
        raise ManifestError(f"No sprite bank at {directory}")
    with open(path) as f:
        entries = json.load(f)['sprites']

    bank = SpriteSet()
    for entry in entries:
        if classes is not None and entry['source_class'] not in classes:
            continue
        rgb = np.asarray(Image.open(os.path.join(directory, entry['rgb'])).convert('RGB'), dtype=np.float32) / 255.0
        alpha = np.asarray(Image.open(os.path.join(directory, entry['alpha'])).convert('L')) > 127
        bank.sprites.append(Sprite(rgb.transpose(2, 0, 1), alpha, entry['source_class']))
    return bank
