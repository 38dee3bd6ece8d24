"""
Live augmentation and the per-batch context count.

FusionMNIST regenerates masks and noise on every draw, FusionCelebA flips
all images together half of the time and regenerates masks, FusionT-LESS
moves the target object (flip, rotation, scale, translation) and
re-composes every context's occluders.
"""
import logging
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Dict, Optional

import cv2
import numpy as np

from errors import ConfigError
from mask_generator import MaskConfig, corrupt_with_mask, gen_ellipse_mask_with_params
from occlusion_composer import OcclusionComposer

if TYPE_CHECKING:
    from dataset_generator import FusionSample

logger = logging.getLogger(__name__)

K_MAX = 3
DATASETS = ('fmnist', 'fceleba', 'ftless')


def sample_context_count(rng: np.random.Generator, k_max: int = K_MAX) -> int:
    """K uniform on {0, ..., k_max}; drawn once per batch"""
    return int(rng.integers(0, k_max + 1))


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[..., ::-1])


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation: float = 15.0
    min_scale: float = 0.9
    max_scale: float = 1.1
    max_shift: float = 0.1


def random_affine(rng: np.random.Generator, size: int, cfg: AugmentConfig) -> Dict:
    """Draw one geometric transform of the target object"""
    return {
        'flip': bool(rng.random() < cfg.flip_prob),
        'angle': float(rng.uniform(-cfg.max_rotation, cfg.max_rotation)),
        'scale': float(rng.uniform(cfg.min_scale, cfg.max_scale)),
        'dx': float(rng.uniform(-cfg.max_shift, cfg.max_shift) * size),
        'dy': float(rng.uniform(-cfg.max_shift, cfg.max_shift) * size),
    }


def apply_affine(image: np.ndarray, transform: Dict) -> np.ndarray:
    """Apply a transform drawn by random_affine to a [C, H, W] image"""
    out = hflip(image) if transform['flip'] else image
    if transform['angle'] == 0 and transform['scale'] == 1 and transform['dx'] == 0 and transform['dy'] == 0:
        return out
    _, h, w = out.shape
    matrix = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), transform['angle'], transform['scale'])
    matrix[0, 2] += transform['dx']
    matrix[1, 2] += transform['dy']
    hwc = np.ascontiguousarray(out.transpose(1, 2, 0), dtype=np.float32)
    warped = cv2.warpAffine(hwc, matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if warped.ndim == 2:
        warped = warped[:, :, None]
    return np.clip(warped.transpose(2, 0, 1), 0.0, 1.0)


class FusionAugmenter:
    def __init__(self, dataset: str, mask_cfg: Optional[MaskConfig] = None,
                 augment_cfg: Optional[AugmentConfig] = None, composer: Optional[OcclusionComposer] = None):
        """
        Dataset-specific live augmentation

        Args:
            dataset: 'fmnist', 'fceleba' or 'ftless'
            mask_cfg: Ellipse and noise settings for the masked datasets
            augment_cfg: Flip probability and geometric ranges
            composer: Occluder composer, required for 'ftless'
        """
        if dataset not in DATASETS:
            raise ConfigError(f"Unknown dataset: {dataset}")
        if dataset == 'ftless' and composer is None:
            raise ConfigError("ftless augmentation needs an occlusion composer")
        self.dataset = dataset
        self.mask_cfg = mask_cfg or MaskConfig()
        self.augment_cfg = augment_cfg or AugmentConfig()
        self.composer = composer

    def _masked_contexts(self, target: np.ndarray, count: int, rng: np.random.Generator):
        _, h, w = target.shape
        contexts, params = [], []
        for _ in range(count):
            mask, ellipses = gen_ellipse_mask_with_params(rng, h, w, self.mask_cfg)
            contexts.append(corrupt_with_mask(target, mask, rng, self.mask_cfg.noise_std))
            params.append({'ellipses': ellipses})
        return contexts, params

    def augment(self, sample: "FusionSample", rng: np.random.Generator) -> "FusionSample":
        """Same geometric transform for target and contexts; corruption re-sampled per context"""
        count = len(sample.contexts)
        meta = dict(sample.meta)

        if self.dataset == 'fmnist':
            contexts, params = self._masked_contexts(sample.target, count, rng)
            meta['contexts'] = params
            return replace(sample, contexts=contexts, meta=meta)

        if self.dataset == 'fceleba':
            flip = bool(rng.random() < self.augment_cfg.flip_prob)
            target = hflip(sample.target) if flip else sample.target
            contexts, params = self._masked_contexts(target, count, rng)
            meta.update({'flip': flip, 'contexts': params})
            return replace(sample, target=target, contexts=contexts, meta=meta)

        transform = random_affine(rng, sample.target.shape[-1], self.augment_cfg)
        target = apply_affine(sample.target, transform)
        contexts, params = [], []
        for _ in range(count):
            image, placement = self.composer.compose(target, rng)
            contexts.append(image)
            params.append(placement)
        meta.update({'transform': transform, 'contexts': params})
        return replace(sample, target=target, contexts=contexts, meta=meta)


def augment(sample: "FusionSample", rng: np.random.Generator, dataset: str,
            composer: Optional[OcclusionComposer] = None, mask_cfg: Optional[MaskConfig] = None,
            augment_cfg: Optional[AugmentConfig] = None) -> "FusionSample":
    return FusionAugmenter(dataset, mask_cfg, augment_cfg, composer).augment(sample, rng)
