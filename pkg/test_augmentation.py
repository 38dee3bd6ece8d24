import numpy as np
import pytest

from augmentation import (K_MAX, AugmentConfig, FusionAugmenter, apply_affine, augment,
                          hflip, random_affine, sample_context_count)
from dataset_generator import FusionSample
from errors import ConfigError
from occlusion_composer import OcclusionComposer, Sprite, SpriteSet


def _sample(channels=1, size=32, k=3, seed=0):
    rng = np.random.default_rng(seed)
    target = rng.random((channels, size, size)).astype(np.float32)
    return FusionSample(target, [np.zeros_like(target) for _ in range(k)], {'index': seed})


class TestContextCount:

    def test_uniform_over_support(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_context_count(rng) for _ in range(100_000)])
        assert set(np.unique(draws)) == set(range(K_MAX + 1))
        for k in range(K_MAX + 1):
            assert abs((draws == k).mean() - 0.25) < 0.01

    def test_same_seed_same_sequence(self):
        rng1, rng2 = np.random.default_rng(9), np.random.default_rng(9)
        assert [sample_context_count(rng1) for _ in range(50)] == [sample_context_count(rng2) for _ in range(50)]


class TestGeometry:

    def test_flip_is_an_involution(self):
        image = np.random.default_rng(0).random((3, 8, 8))
        np.testing.assert_array_equal(hflip(hflip(image)), image)
        np.testing.assert_array_equal(hflip(image)[:, :, 0], image[:, :, -1])

    def test_identity_transform(self):
        image = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
        transform = {'flip': False, 'angle': 0.0, 'scale': 1.0, 'dx': 0.0, 'dy': 0.0}
        np.testing.assert_array_equal(apply_affine(image, transform), image)

    def test_zero_ranges_leave_target_unchanged(self):
        cfg = AugmentConfig(flip_prob=0.0, max_rotation=0.0, min_scale=1.0, max_scale=1.0, max_shift=0.0)
        image = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
        transform = random_affine(np.random.default_rng(1), 16, cfg)
        np.testing.assert_array_equal(apply_affine(image, transform), image)

    def test_integer_shift(self):
        image = np.zeros((1, 16, 16), np.float32)
        image[0, 5, 5] = 1.0
        shifted = apply_affine(image, {'flip': False, 'angle': 0.0, 'scale': 1.0, 'dx': 3.0, 'dy': 2.0})
        assert shifted[0, 7, 8] == pytest.approx(1.0)


class TestFusionAugmenter:

    def test_same_seed_same_output(self):
        sample = _sample()
        a = augment(sample, np.random.default_rng(3), 'fmnist')
        b = augment(sample, np.random.default_rng(3), 'fmnist')
        for x, y in zip(a.contexts, b.contexts):
            np.testing.assert_array_equal(x, y)

    def test_fmnist_regenerates_contexts(self):
        sample = _sample()
        out = FusionAugmenter('fmnist').augment(sample, np.random.default_rng(0))
        assert len(out.contexts) == 3
        np.testing.assert_array_equal(out.target, sample.target)
        assert all(c.shape == sample.target.shape for c in out.contexts)
        assert len(out.meta['contexts']) == 3
        assert out.meta['index'] == 0
        out.validate('fmnist')

    def test_celeba_flip_frequency(self):
        augmenter = FusionAugmenter('fceleba')
        sample = _sample(channels=3, size=8, k=0)
        rng = np.random.default_rng(0)
        flips = [augmenter.augment(sample, rng).meta['flip'] for _ in range(10_000)]
        assert abs(np.mean(flips) - 0.5) < 0.02

    def test_celeba_flip_moves_target(self):
        sample = _sample(channels=3, size=8, k=1)
        rng = np.random.default_rng(0)
        for _ in range(20):
            out = FusionAugmenter('fceleba').augment(sample, rng)
            expected = hflip(sample.target) if out.meta['flip'] else sample.target
            np.testing.assert_array_equal(out.target, expected)

    def test_celeba_without_flips(self):
        augmenter = FusionAugmenter('fceleba', augment_cfg=AugmentConfig(flip_prob=0.0))
        sample = _sample(channels=3, size=8, k=2)
        out = augmenter.augment(sample, np.random.default_rng(0))
        assert out.meta['flip'] is False
        np.testing.assert_array_equal(out.target, sample.target)

    def test_tless_recomposes_occluders(self):
        rgb = np.zeros((3, 10, 10), np.float32)
        rgb[2] = 1.0
        composer = OcclusionComposer(SpriteSet([Sprite(rgb, np.ones((10, 10), bool))]))
        sample = _sample(channels=3, size=32, k=2)
        out = FusionAugmenter('ftless', composer=composer).augment(sample, np.random.default_rng(0))
        assert len(out.contexts) == 2
        assert set(out.meta['transform']) == {'flip', 'angle', 'scale', 'dx', 'dy'}
        assert all(5 <= p['count'] <= 8 for p in out.meta['contexts'])

    def test_tless_needs_composer(self):
        with pytest.raises(ConfigError):
            FusionAugmenter('ftless')

    def test_unknown_dataset(self):
        with pytest.raises(ConfigError):
            FusionAugmenter('cifar')
