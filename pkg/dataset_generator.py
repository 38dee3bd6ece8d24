"""
Fusion dataset construction: raw readers, deterministic per-sample seeding,
PNG + JSON manifest output, and torch datasets for training and evaluation.
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from glob import glob
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset
from tqdm import tqdm

from augmentation import K_MAX, FusionAugmenter
from errors import DataGenerationError, ManifestError, ShapeMismatchError
from mask_generator import (MaskConfig, corrupt_with_mask,
                            gen_ellipse_mask_with_params, make_celeba_target,
                            pad_mnist)
from occlusion_composer import (CannyConfig, OcclusionComposer, OcclusionConfig,
                                SpriteSet, cut_objects_canny, is_holdout,
                                load_sprite_bank, occluder_classes,
                                save_sprite_bank, TLESS_TARGET_CLASSES)

logger = logging.getLogger(__name__)

DATASET_SHAPES = {
    'fmnist': (1, 32, 32),
    'fceleba': (3, 64, 64),
    'ftless': (3, 64, 64),
}
SPLITS = ('train', 'eval')
MANIFEST_NAME = 'manifest.json'
TLESS_SIZE = 64


@dataclass
class FusionSample:
    """One target with up to K_MAX corrupted contexts of the same shape"""
    target: np.ndarray
    contexts: List[np.ndarray] = field(default_factory=list)
    meta: Dict = field(default_factory=dict)

    def validate(self, dataset: Optional[str] = None) -> "FusionSample":
        if dataset is not None and self.target.shape != DATASET_SHAPES[dataset]:
            raise ShapeMismatchError(f"{dataset} target must be {DATASET_SHAPES[dataset]}, got {self.target.shape}")
        if len(self.contexts) > K_MAX:
            raise ShapeMismatchError(f"at most {K_MAX} contexts, got {len(self.contexts)}")
        for image in [self.target] + list(self.contexts):
            if image.shape != self.target.shape:
                raise ShapeMismatchError(f"context shape {image.shape} differs from target {self.target.shape}")
            if image.min() < 0.0 or image.max() > 1.0:
                raise ShapeMismatchError("image values must lie in [0, 1]")
        return self

    def truncated(self, k: int) -> "FusionSample":
        return FusionSample(self.target, list(self.contexts[:k]), dict(self.meta))


def sample_seed(master_seed: int, index: int, epoch: Optional[int] = None) -> int:
    """Independent 32-bit seed per (master seed, [epoch,] sample index)"""
    entropy = [master_seed, index] if epoch is None else [master_seed, epoch, index]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def sample_rng(master_seed: int, index: int, epoch: Optional[int] = None) -> np.random.Generator:
    return np.random.default_rng(sample_seed(master_seed, index, epoch))


# --- image IO -------------------------------------------------------------

def save_png(path: str, image: np.ndarray) -> None:
    """[C, H, W] float in [0, 1] -> 8-bit grayscale or RGB PNG"""
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if data.shape[0] == 1:
        Image.fromarray(data[0]).save(path)
    else:
        Image.fromarray(np.ascontiguousarray(data.transpose(1, 2, 0))).save(path)


def load_png(path: str, channels: int) -> np.ndarray:
    image = Image.open(path).convert('L' if channels == 1 else 'RGB')
    data = np.asarray(image, dtype=np.float32) / 255.0
    return data[None] if channels == 1 else data.transpose(2, 0, 1)


def load_rgb(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert('RGB'), dtype=np.float32).transpose(2, 0, 1) / 255.0


# --- raw readers ----------------------------------------------------------

def load_mnist_digits(root: str, split: str) -> np.ndarray:
    """Raw MNIST digits [N, 28, 28] uint8; the files must already be under root"""
    from torchvision.datasets import MNIST

    try:
        mnist = MNIST(root, train=(split == 'train'), download=False)
    except RuntimeError as exc:
        raise DataGenerationError(f"MNIST not found under {root}: {exc}")
    return mnist.data.numpy()


def list_celeba_images(root: str, split: str) -> List[str]:
    folder = os.path.join(root, 'img_align_celeba')
    paths = sorted(glob(os.path.join(folder if os.path.isdir(folder) else root, '*.jpg')))
    if not paths:
        raise DataGenerationError(f"No CelebA images under {root}")

    partition_file = os.path.join(root, 'list_eval_partition.txt')
    if os.path.exists(partition_file):
        with open(partition_file) as f:
            partition = dict(line.split() for line in f if line.strip())
        wanted = {'0', '1'} if split == 'train' else {'2'}
        return [p for p in paths if partition.get(os.path.basename(p)) in wanted]
    return [p for i, p in enumerate(paths) if is_holdout(i) == (split == 'eval')]


def list_tless_images(root: str, classes: Sequence[int]) -> List[Tuple[int, str]]:
    """(class id, path) pairs from a train_primesense/<cls>/rgb/*.png tree"""
    base = os.path.join(root, 'train_primesense')
    items = []
    for cls in sorted(classes):
        paths = sorted(glob(os.path.join(base, f"{cls:02d}", 'rgb', '*.png')))
        items.extend((cls, p) for p in paths)
    if not items:
        raise DataGenerationError(f"No T-LESS images for classes {sorted(classes)} under {base}")
    return items


def load_tless_image(path: str) -> np.ndarray:
    rgb = np.asarray(Image.open(path).convert('RGB'))
    resized = cv2.resize(rgb, (TLESS_SIZE, TLESS_SIZE), interpolation=cv2.INTER_AREA)
    return resized.astype(np.float32).transpose(2, 0, 1) / 255.0


# --- manifests ------------------------------------------------------------

def validate_manifest(manifest: Dict) -> Dict:
    for key in ('dataset', 'master_seed', 'split', 'samples'):
        if key not in manifest:
            raise ManifestError(f"manifest is missing '{key}'")
    if manifest['dataset'] not in DATASET_SHAPES:
        raise ManifestError(f"unknown dataset '{manifest['dataset']}'")
    if not isinstance(manifest['samples'], list):
        raise ManifestError("'samples' must be a list")
    for entry in manifest['samples']:
        for key, kind in (('id', int), ('seed', int), ('target_path', str), ('context_paths', list), ('params', dict)):
            if not isinstance(entry.get(key), kind):
                raise ManifestError(f"sample entry {entry.get('id')} has an invalid '{key}'")
        if len(entry['context_paths']) > K_MAX:
            raise ManifestError(f"sample {entry['id']} lists more than {K_MAX} contexts")
    return manifest


def write_manifest(manifest: Dict, directory: str) -> str:
    validate_manifest(manifest)
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def load_manifest(path: str) -> Dict:
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(path):
        raise ManifestError(f"No manifest at {path}")
    with open(path) as f:
        manifest = json.load(f)
    manifest = validate_manifest(manifest)
    manifest['root'] = os.path.dirname(os.path.abspath(path))
    return manifest


# --- generation -----------------------------------------------------------

class DatasetGenerator:
    def __init__(self, dataset: str, raw_root: str, master_seed: int = 0,
                 mask_cfg: Optional[MaskConfig] = None, occlusion_cfg: Optional[OcclusionConfig] = None,
                 canny_cfg: Optional[CannyConfig] = None):
        """
        Initialize a fusion dataset generator

        Args:
            dataset: 'fmnist', 'fceleba' or 'ftless'
            raw_root: Directory holding the user-supplied raw dataset
            master_seed: Seed from which every per-sample generator derives
            mask_cfg: Ellipse and noise settings (fmnist, fceleba)
            occlusion_cfg: Occluder count/scale/rotation ranges (ftless)
            canny_cfg: Edge thresholds for occluder cutting (ftless)
        """
        if dataset not in DATASET_SHAPES:
            raise DataGenerationError(f"Unknown dataset: {dataset}")
        self.dataset = dataset
        self.raw_root = raw_root
        self.master_seed = master_seed
        self.mask_cfg = mask_cfg or MaskConfig()
        self.occlusion_cfg = occlusion_cfg or OcclusionConfig()
        self.canny_cfg = canny_cfg or CannyConfig()
        self.skipped = 0

    # targets are loaded lazily: a callable per index keeps memory flat for CelebA
    def list_targets(self, split: str) -> List[Callable[[], np.ndarray]]:
        if self.dataset == 'fmnist':
            digits = load_mnist_digits(self.raw_root, split)
            return [lambda d=d: pad_mnist(d) for d in digits]
        if self.dataset == 'fceleba':
            return [lambda p=p: make_celeba_target(load_rgb(p)) for p in list_celeba_images(self.raw_root, split)]

        items = list_tless_images(self.raw_root, TLESS_TARGET_CLASSES)
        per_class: Dict[int, int] = {}
        selected = []
        for cls, path in items:
            index = per_class.get(cls, 0)
            per_class[cls] = index + 1
            if is_holdout(index) == (split == 'eval'):
                selected.append(lambda p=path: load_tless_image(p))
        return selected

    def build_sprite_bank(self, split: str, out_dir: str) -> SpriteSet:
        """Cut every occluder image of the split once and store the result"""
        bank = SpriteSet()
        items = list_tless_images(self.raw_root, occluder_classes(split))
        for cls, path in tqdm(items, desc=f"cutting {split} occluders", leave=False):
            cut = cut_objects_canny(load_tless_image(path), self.canny_cfg, source_class=cls)
            if len(cut) == 0:
                self.skipped += 1
            bank.extend(cut)
        save_sprite_bank(bank, out_dir)
        return bank

    def _corrupt(self, target: np.ndarray, rng: np.random.Generator,
                 composer: Optional[OcclusionComposer]) -> Tuple[np.ndarray, Dict]:
        if self.dataset == 'ftless':
            return composer.compose(target, rng)
        _, h, w = target.shape
        noise_std = self.mask_cfg.noise_std
        mask, ellipses = gen_ellipse_mask_with_params(rng, h, w, self.mask_cfg)
        return corrupt_with_mask(target, mask, rng, noise_std), {'ellipses': ellipses}

    def make_sample(self, index: int, target: np.ndarray,
                    composer: Optional[OcclusionComposer] = None) -> FusionSample:
        seed = sample_seed(self.master_seed, index)
        rng = np.random.default_rng(seed)
        contexts, params = [], []
        for _ in range(K_MAX):
            image, p = self._corrupt(target, rng, composer)
            contexts.append(image)
            params.append(p)
        meta = {'id': index, 'seed': seed, 'dataset': self.dataset, 'contexts': params}
        return FusionSample(target, contexts, meta).validate(self.dataset)

    def _write_sample(self, index: int, load_target: Callable[[], np.ndarray], out_dir: str,
                      composer: Optional[OcclusionComposer]) -> Optional[Dict]:
        try:
            sample = self.make_sample(index, load_target(), composer)
        except (OSError, ValueError, DataGenerationError) as exc:
            logger.warning(f"⚠️ Skipping sample {index}: {exc}")
            return None

        target_path = os.path.join('images', f"{index:06d}_target.png")
        save_png(os.path.join(out_dir, target_path), sample.target)
        context_paths = []
        for k, context in enumerate(sample.contexts):
            path = os.path.join('images', f"{index:06d}_ctx{k}.png")
            save_png(os.path.join(out_dir, path), context)
            context_paths.append(path)
        return {'id': index, 'seed': sample.meta['seed'], 'target_path': target_path,
                'context_paths': context_paths, 'params': {'contexts': sample.meta['contexts']}}

    def generate(self, split: str, out_dir: str, limit: Optional[int] = None,
                 progress_callback: Optional[Callable[[int], None]] = None, workers: int = 1) -> str:
        """
        Write one split as PNG images plus a manifest

        Args:
            split: 'train' or 'eval'
            out_dir: Split output directory
            limit: Keep only the first `limit` targets
            progress_callback: Optional callback receiving percent done
            workers: Threads writing samples; results do not depend on it

        Returns:
            Path of the written manifest
        """
        if split not in SPLITS:
            raise DataGenerationError(f"Unknown split: {split}")
        os.makedirs(os.path.join(out_dir, 'images'), exist_ok=True)

        composer = None
        if self.dataset == 'ftless':
            bank_dir = os.path.join(out_dir, 'sprites')
            sprites = self.build_sprite_bank(split, bank_dir)
            if len(sprites) == 0:
                raise DataGenerationError(f"No usable occluders for the {split} split")
            composer = OcclusionComposer(sprites, self.occlusion_cfg)

        targets = self.list_targets(split)
        if limit is not None:
            targets = targets[:limit]

        entries: List[Optional[Dict]] = [None] * len(targets)
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            futures = [pool.submit(self._write_sample, i, load, out_dir, composer) for i, load in enumerate(targets)]
            for i, future in enumerate(tqdm(futures, desc=f"{self.dataset}/{split}", leave=False)):
                entries[i] = future.result()
                if progress_callback:
                    progress_callback(min(100, int((i + 1) / len(futures) * 100)))

        samples = [e for e in entries if e is not None]
        self.skipped += len(entries) - len(samples)
        manifest = {'dataset': self.dataset, 'master_seed': self.master_seed, 'split': split, 'samples': samples}
        path = write_manifest(manifest, out_dir)
        logger.info(f"✅ Wrote {len(samples)} {self.dataset}/{split} samples to {out_dir}")
        return path


# --- torch datasets -------------------------------------------------------

def _to_tensors(sample: FusionSample) -> Tuple[torch.Tensor, torch.Tensor]:
    target = torch.from_numpy(np.ascontiguousarray(sample.target, dtype=np.float32))
    contexts = torch.from_numpy(np.stack(sample.contexts).astype(np.float32))
    return target, contexts


class FusionManifestDataset(Dataset):
    """Fixed samples read back from a manifest: (target [C,H,W], contexts [K_MAX,C,H,W])"""

    def __init__(self, manifest_path: str, limit: Optional[int] = None):
        self.manifest = load_manifest(manifest_path)
        self.dataset = self.manifest['dataset']
        self.channels = DATASET_SHAPES[self.dataset][0]
        self.entries = self.manifest['samples'][:limit] if limit else self.manifest['samples']

    def __len__(self) -> int:
        return len(self.entries)

    def load_sample(self, index: int) -> FusionSample:
        entry = self.entries[index]
        root = self.manifest['root']
        target = load_png(os.path.join(root, entry['target_path']), self.channels)
        contexts = [load_png(os.path.join(root, p), self.channels) for p in entry['context_paths']]
        return FusionSample(target, contexts, {'id': entry['id'], 'seed': entry['seed']})

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return _to_tensors(self.load_sample(index))


class FusionStreamDataset(Dataset):
    """Training targets with contexts regenerated by the augmenter on every access"""

    def __init__(self, manifest_path: str, augmenter: FusionAugmenter, master_seed: int = 0,
                 limit: Optional[int] = None):
        self.source = FusionManifestDataset(manifest_path, limit)
        self.augmenter = augmenter
        self.master_seed = master_seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.source)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        base = self.source.load_sample(index)
        rng = sample_rng(self.master_seed, index, self.epoch)
        # placeholders; the augmenter replaces every context
        seed_sample = FusionSample(base.target, [base.target] * K_MAX, base.meta)
        return _to_tensors(self.augmenter.augment(seed_sample, rng))


def build_augmenter(dataset: str, data_dir: str, mask_cfg: Optional[MaskConfig] = None,
                    occlusion_cfg: Optional[OcclusionConfig] = None) -> FusionAugmenter:
    composer = None
    if dataset == 'ftless':
        sprites = load_sprite_bank(os.path.join(data_dir, 'train', 'sprites'))
        composer = OcclusionComposer(sprites, occlusion_cfg)
    return FusionAugmenter(dataset, mask_cfg, composer=composer)
