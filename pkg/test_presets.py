import pytest

from config import TrainConfig
from errors import ConfigError
from presets import ExperimentPresets


class TestExperimentPresets:

    def test_every_preset_builds_a_valid_config(self):
        for name in ExperimentPresets.list_presets():
            cfg = TrainConfig(preset=name, **ExperimentPresets.get_preset(name)).validate()
            assert cfg.hierarchy_spec().num_groups in (7, 17)

    def test_default_is_desk_scale_mnist(self):
        info = ExperimentPresets.get_preset_info(ExperimentPresets.DEFAULT_PRESET)
        assert info['dataset'] == 'fmnist' and not info['long_running']
        assert info['latent_groups'] == '5x4,2x8'

    def test_returned_settings_are_copies(self):
        settings = ExperimentPresets.get_preset('fmnist-full')
        settings['epochs'] = 1
        assert ExperimentPresets.get_preset('fmnist-full')['epochs'] == 400

    def test_celeba_uses_the_mixture_likelihood(self):
        for name in ('fceleba-small', 'fceleba-full'):
            settings = ExperimentPresets.get_preset(name)
            assert settings['likelihood'] == 'logistic_mixture'
            assert settings['noise_std'] == 0.0

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match='fmnist-small'):
            ExperimentPresets.get_preset('imagenet')
        with pytest.raises(ConfigError):
            ExperimentPresets.get_preset_info('imagenet')
