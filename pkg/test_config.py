"""Tests for configuration resolution and the command-line surface."""

import os

import pytest

import app
from config import (RESOLVED_CONFIG_NAME, TrainConfig, coerce_value, format_scales,
                    load_config_file, parse_overrides, parse_scales, resolve_config,
                    to_env_text)
from errors import ConfigError


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ('FVLAB_DEVICE', 'FVLAB_DATA_ROOT', 'FVLAB_DATABASE_URL', 'FVLAB_OUT'):
        monkeypatch.delenv(name, raising=False)


class TestScales:

    def test_parse_and_format(self):
        assert parse_scales('10x8, 5x16,2X32') == [(10, 8), (5, 16), (2, 32)]
        assert format_scales([(5, 4), (2, 8)]) == '5x4,2x8'

    def test_validate_canonicalizes_scales(self):
        cfg = resolve_config(overrides=['scales= 5X4, 2x8'])
        assert cfg.scales == '5x4,2x8'

    @pytest.mark.parametrize("text", ['5', '5x', 'ax4', '5x4;2x8'])
    def test_bad_scales(self, text):
        with pytest.raises(ConfigError):
            parse_scales(text)


class TestResolution:

    def test_defaults_come_from_the_default_preset(self):
        cfg = resolve_config()
        assert cfg.preset == 'fmnist-small'
        assert cfg.train_limit == 20000 and cfg.epochs == 20
        assert cfg.hierarchy_spec().num_groups == 7

    def test_precedence(self, tmp_path, monkeypatch):
        path = tmp_path / 'exp.env'
        path.write_text('preset=fceleba-small\nepochs=3\nbatch_size=8\ndevice=cuda:1\n')
        monkeypatch.setenv('FVLAB_DEVICE', 'cpu')
        cfg = resolve_config(str(path), ['epochs=5'], {'seed': 11})
        assert cfg.dataset == 'fceleba' and cfg.likelihood == 'logistic_mixture'
        assert cfg.epochs == 5 and cfg.batch_size == 8
        assert cfg.device == 'cpu'
        assert cfg.seed == 11

    def test_unknown_key(self, tmp_path):
        path = tmp_path / 'exp.env'
        path.write_text('epochz=3\n')
        with pytest.raises(ConfigError, match='epochz'):
            load_config_file(str(path))
        with pytest.raises(ConfigError):
            resolve_config(overrides=['learning_rate=0.1'])

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            resolve_config(overrides=['epochs=many'])
        with pytest.raises(ConfigError):
            resolve_config(overrides=['prior_mode=SumAgg'])
        with pytest.raises(ConfigError):
            resolve_config(overrides=['lr_end=0.1'])
        with pytest.raises(ConfigError):
            resolve_config(overrides=['architectures=FusionVAE,GAN'])
        with pytest.raises(ConfigError):
            parse_overrides(['epochs'])
        with pytest.raises(ConfigError):
            resolve_config('/does/not/exist.env')

    def test_booleans(self):
        assert coerce_value('use_se', 'off', bool) is False
        assert coerce_value('use_se', 'Yes', bool) is True
        with pytest.raises(ConfigError):
            coerce_value('use_se', 'maybe', bool)

    def test_architecture_list(self):
        assert TrainConfig(architectures='all').architecture_list() == ['FCN', 'FCN+S', 'CVAE', 'CVAE+S', 'FusionVAE']
        assert TrainConfig(architectures='CVAE, FusionVAE').architecture_list() == ['CVAE', 'FusionVAE']

    def test_env_text_round_trip(self, tmp_path):
        cfg = resolve_config(overrides=['use_se=false', 'scales=3x4,2x8'])
        path = tmp_path / RESOLVED_CONFIG_NAME
        path.write_text(to_env_text(cfg))
        assert resolve_config(str(path)) == cfg

    def test_raw_root_falls_back_to_env(self, monkeypatch):
        cfg = TrainConfig()
        with pytest.raises(ConfigError):
            cfg.resolved_raw_root()
        monkeypatch.setenv('FVLAB_DATA_ROOT', '/data/raw')
        assert cfg.resolved_raw_root() == '/data/raw'
        assert cfg.resolved_data_dir('out') == os.path.join('out', 'data', 'fmnist')


class TestCommandLine:

    def test_help_lists_config_keys(self, capsys):
        with pytest.raises(SystemExit) as info:
            app.main(['train', '--help'])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for key in ('lr_start', 'warmup_fraction', 'n_importance_samples', 'prior_mode'):
            assert key in text

    def test_config_error_exits_with_2(self, tmp_path):
        assert app.main(['train', '--out', str(tmp_path), '--set', 'epochs=0', '--quiet']) == 2

    def test_missing_data_exits_with_2(self, tmp_path):
        assert app.main(['train', '--out', str(tmp_path), '--quiet']) == 2
        assert (tmp_path / RESOLVED_CONFIG_NAME).exists()

    def test_missing_raw_root(self, tmp_path):
        assert app.main(['datagen', '--out', str(tmp_path), '--quiet']) == 2

    def test_report_without_reports_is_a_runtime_failure(self, tmp_path):
        assert app.main(['report', '--out', str(tmp_path), '--quiet']) == 3

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as info:
            app.main(['fly'])
        assert info.value.code == 2
