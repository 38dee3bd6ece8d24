"""
Experiment presets for the three fusion datasets.
Desk-scale ("small") and full-scale ("full") variants of every dataset.
"""

from typing import Dict, List

from errors import ConfigError


class ExperimentPresets:
    """Named experiment configurations"""

    PRESETS = {
        'fmnist-small': {
            'name': 'FusionMNIST (desk scale)',
            'description': 'Seven latent groups on 4x4 and 8x8, narrow widths; about half an hour per run',
            'long_running': False,
            'settings': {
                'dataset': 'fmnist',
                'scales': '5x4,2x8',
                'latent_channels': 10,
                'base_width': 4,
                'image_channels': 1,
                'image_size': 32,
                'likelihood': 'bernoulli',
                'epochs': 20,
                'batch_size': 64,
                'n_importance_samples': 100,
                'train_limit': 20000,
                'eval_limit': 1000,
            },
        },
        'fmnist-full': {
            'name': 'FusionMNIST (full scale)',
            'description': 'Seven latent groups, 400 epochs at batch size 800',
            'long_running': True,
            'settings': {
                'dataset': 'fmnist',
                'scales': '5x4,2x8',
                'latent_channels': 10,
                'base_width': 16,
                'image_channels': 1,
                'image_size': 32,
                'likelihood': 'bernoulli',
                'epochs': 400,
                'batch_size': 800,
                'n_importance_samples': 1000,
                'train_limit': 0,
                'eval_limit': 0,
            },
        },
        'fceleba-small': {
            'name': 'FusionCelebA (desk scale)',
            'description': 'Seventeen latent groups with narrow widths; several GPU-hours',
            'long_running': True,
            'settings': {
                'dataset': 'fceleba',
                'scales': '10x8,5x16,2x32',
                'latent_channels': 20,
                'base_width': 4,
                'image_channels': 3,
                'image_size': 64,
                'likelihood': 'logistic_mixture',
                'noise_std': 0.0,
                'epochs': 10,
                'batch_size': 16,
                'n_importance_samples': 100,
                'train_limit': 20000,
                'eval_limit': 500,
            },
        },
        'fceleba-full': {
            'name': 'FusionCelebA (full scale)',
            'description': 'Seventeen latent groups on 8x8, 16x16 and 32x32, 90 epochs at batch size 32',
            'long_running': True,
            'settings': {
                'dataset': 'fceleba',
                'scales': '10x8,5x16,2x32',
                'latent_channels': 20,
                'base_width': 16,
                'image_channels': 3,
                'image_size': 64,
                'likelihood': 'logistic_mixture',
                'noise_std': 0.0,
                'epochs': 90,
                'batch_size': 32,
                'n_importance_samples': 1000,
                'train_limit': 0,
                'eval_limit': 0,
            },
        },
        'ftless-small': {
            'name': 'FusionT-LESS (desk scale)',
            'description': 'Seventeen latent groups with narrow widths; several GPU-hours',
            'long_running': True,
            'settings': {
                'dataset': 'ftless',
                'scales': '10x8,5x16,2x32',
                'latent_channels': 20,
                'base_width': 4,
                'image_channels': 3,
                'image_size': 64,
                'likelihood': 'bernoulli',
                'epochs': 20,
                'batch_size': 16,
                'n_importance_samples': 100,
                'train_limit': 0,
                'eval_limit': 500,
            },
        },
        'ftless-full': {
            'name': 'FusionT-LESS (full scale)',
            'description': 'Seventeen latent groups on 8x8, 16x16 and 32x32, 500 epochs at batch size 32',
            'long_running': True,
            'settings': {
                'dataset': 'ftless',
                'scales': '10x8,5x16,2x32',
                'latent_channels': 20,
                'base_width': 16,
                'image_channels': 3,
                'image_size': 64,
                'likelihood': 'bernoulli',
                'epochs': 500,
                'batch_size': 32,
                'n_importance_samples': 1000,
                'train_limit': 0,
                'eval_limit': 0,
            },
        },
    }

    DEFAULT_PRESET = 'fmnist-small'

    @staticmethod
    def get_preset(preset_name: str) -> Dict:
        """Config settings of a preset; unknown names raise ConfigError"""
        if preset_name not in ExperimentPresets.PRESETS:
            raise ConfigError(
                f"Unknown preset: {preset_name}. Available: {', '.join(ExperimentPresets.list_presets())}"
            )
        return dict(ExperimentPresets.PRESETS[preset_name]['settings'])

    @staticmethod
    def list_presets() -> List[str]:
        return list(ExperimentPresets.PRESETS)

    @staticmethod
    def get_preset_info(preset_name: str) -> Dict:
        """Display information about a preset"""
        preset = ExperimentPresets.PRESETS.get(preset_name)
        if preset is None:
            raise ConfigError(f"Unknown preset: {preset_name}")
        return {
            'name': preset['name'],
            'description': preset['description'],
            'long_running': preset['long_running'],
            'dataset': preset['settings']['dataset'],
            'latent_groups': preset['settings']['scales'],
        }
