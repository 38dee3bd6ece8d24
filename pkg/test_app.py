"""Tests for the fvlab command line: subcommands, output bundles and exit codes."""

import csv
import hashlib
import json
import os
from dataclasses import fields

import numpy as np
import pytest

import app
import dataset_generator
import results_db
from acceptance_check import MIN_TREND_RUNS, AcceptanceChecker
from config import TrainConfig
from evaluator import build_report
from presets import ExperimentPresets

TINY_MODEL = ['--set', 'scales=1x4,1x8', '--set', 'latent_channels=2', '--set', 'base_width=4',
              '--set', 'epochs=1', '--set', 'runs=1', '--set', 'batch_size=4',
              '--set', 'n_importance_samples=2', '--set', 'eval_batch_size=4', '--set', 'grid_items=2',
              '--set', 'grid_samples=2']


def _sha256(path):
    with open(path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


def _manifest(out, split='train'):
    return os.path.join(out, 'data', 'fmnist', split, 'manifest.json')


def _write_report(reports_dir, name, architecture, nll, mse, n_runs=MIN_TREND_RUNS):
    report = build_report(architecture, 'fmnist', nll, mse, 100, 100)
    report.n_runs = n_runs
    os.makedirs(reports_dir, exist_ok=True)
    with open(os.path.join(reports_dir, f"{name}.json"), 'w', encoding='utf-8') as f:
        f.write(report.to_json())


def _bundle_bytes(bundle):
    contents = {}
    for name in sorted(os.listdir(bundle)):
        with open(os.path.join(bundle, name), 'rb') as f:
            contents[name] = f.read()
    return contents


@pytest.fixture
def raw_mnist(tmp_path, monkeypatch):
    """Twelve fake MNIST digits behind an existing raw directory"""
    digits = (np.random.default_rng(0).random((12, 28, 28)) * 255).astype(np.uint8)
    monkeypatch.setattr(dataset_generator, 'load_mnist_digits', lambda root, split: digits)
    monkeypatch.delenv('FVLAB_DATABASE_URL', raising=False)
    raw = tmp_path / 'raw'
    raw.mkdir()
    return str(raw)


def _datagen(raw, out, *extra):
    return app.main(['datagen', '--out', out, '--set', f'raw_root={raw}', '--seed', '3', '--quiet', *extra])


class TestDatagen:

    def test_same_seed_same_manifest(self, raw_mnist, tmp_path):
        first, second = str(tmp_path / 'a'), str(tmp_path / 'b')
        assert _datagen(raw_mnist, first, '--limit', '4') == 0
        assert _datagen(raw_mnist, second, '--limit', '4') == 0
        for split in ('train', 'eval'):
            assert _sha256(_manifest(first, split)) == _sha256(_manifest(second, split))
        image = os.path.join('data', 'fmnist', 'train', 'images', '000002_ctx1.png')
        assert _sha256(os.path.join(first, image)) == _sha256(os.path.join(second, image))

    def test_limit_and_manifest_schema(self, raw_mnist, tmp_path):
        out = str(tmp_path / 'out')
        assert _datagen(raw_mnist, out, '--limit', '10', '--split', 'train') == 0
        assert not os.path.exists(_manifest(out, 'eval'))
        with open(_manifest(out), encoding='utf-8') as f:
            manifest = json.load(f)
        assert set(manifest) == {'dataset', 'master_seed', 'split', 'samples'}
        assert manifest['dataset'] == 'fmnist' and manifest['split'] == 'train' and manifest['master_seed'] == 3
        assert len(manifest['samples']) == 10
        for index, entry in enumerate(manifest['samples']):
            assert set(entry) == {'id', 'seed', 'target_path', 'context_paths', 'params'}
            assert entry['id'] == index
            assert len(entry['context_paths']) == 3
            for path in [entry['target_path'], *entry['context_paths']]:
                assert os.path.exists(os.path.join(out, 'data', 'fmnist', 'train', path))
        assert os.path.exists(os.path.join(out, 'resolved_config.env'))

    def test_missing_raw_directory(self, tmp_path):
        out = str(tmp_path / 'out')
        assert app.main(['datagen', '--out', out, '--set', f'raw_root={tmp_path / "nowhere"}', '--quiet']) == 2


class TestAblate:

    def test_single_cell_writes_one_row(self, raw_mnist, tmp_path):
        out = str(tmp_path / 'out')
        assert _datagen(raw_mnist, out, '--limit', '6') == 0
        code = app.main(['ablate', '--out', out, '--study', 'aggregation', '--modes', 'MaxAgg', '--train',
                         '--limit', '4', '--quiet', *TINY_MODEL])
        assert code == 0
        with open(os.path.join(out, 'ablation', 'aggregation.csv'), encoding='utf-8') as f:
            rows = list(csv.reader(f))
        assert len(rows) == 2
        assert rows[0][0] == 'Prior aggregation'
        assert rows[1][0] == 'MaxAgg'
        assert os.path.exists(os.path.join(out, 'ablation', 'aggregation.md'))
        assert os.path.isdir(os.path.join(out, 'ablation', 'MaxAgg_q_y'))

    def test_unknown_study_is_a_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            app.main(['ablate', '--out', str(tmp_path), '--study', 'likelihood'])
        assert info.value.code == 2


class TestReport:

    @pytest.fixture
    def reports(self, tmp_path, monkeypatch):
        monkeypatch.delenv('FVLAB_DATABASE_URL', raising=False)
        out = tmp_path / 'out'
        reports_dir = str(out / 'reports')
        _write_report(reports_dir, 'fusionvae', 'FusionVAE', {0: 0.40, 1: 0.30, 2: 0.25, 3: 0.20},
                      {0: 0.10, 1: 0.05, 2: 0.04, 3: 0.03})
        _write_report(reports_dir, 'fcn', 'FCN', {k: None for k in range(4)}, {0: 0.12, 1: 0.07, 2: 0.06, 3: 0.05})
        return str(out)

    def test_empty_directory_fails_without_bundle(self, tmp_path):
        out = str(tmp_path / 'empty')
        assert app.main(['report', '--out', out, '--quiet']) == 3
        assert not os.path.exists(os.path.join(out, 'report'))
        assert not os.path.exists(os.path.join(out, 'report.tmp'))

    def test_mixed_datasets_fail_without_bundle(self, reports):
        report = build_report('CVAE', 'fceleba', {k: 3.0 for k in range(4)}, {k: 0.1 for k in range(4)}, 10, 10)
        with open(os.path.join(reports, 'reports', 'cvae.json'), 'w', encoding='utf-8') as f:
            f.write(report.to_json())
        assert app.main(['report', '--out', reports, '--quiet']) == 3
        assert not os.path.exists(os.path.join(reports, 'report'))

    def test_bundle_is_reproducible(self, reports):
        assert app.main(['report', '--out', reports, '--quiet']) == 0
        bundle = os.path.join(reports, 'report')
        first = _bundle_bytes(bundle)
        assert {'table_mean_std.csv', 'table_mean_std.md', 'table_best_run.csv', 'table_best_run.md'} <= set(first)
        assert app.main(['report', '--out', reports, '--quiet']) == 0
        assert _bundle_bytes(bundle) == first
        assert not os.path.exists(bundle + '.tmp')

    def test_run_history_from_the_index(self, reports):
        results_db.init_database(fallback_dir=reports)
        run_id = results_db.record_run_started({'dataset': 'fmnist'}, 'abc', 'FusionVAE', 0, 7)
        results_db.save_eval_report(run_id, build_report('FusionVAE', 'fmnist', {k: 0.3 for k in range(4)},
                                                         {k: 0.05 for k in range(4)}, 10, 10))
        results_db.record_run_finished(run_id, 'finished')
        results_db.engine.dispose()

        assert app.main(['report', '--out', reports, '--quiet']) == 0
        with open(os.path.join(reports, 'report', 'run_history.csv'), encoding='utf-8') as f:
            rows = list(csv.reader(f))
        assert rows[0][0] == 'Architecture'
        assert rows[1] == ['FusionVAE', '0', '7', 'finished', '0.3000', '0.0500']
        results_db.engine.dispose()

    def test_no_index_no_history(self, reports):
        assert app.main(['report', '--out', reports, '--quiet']) == 0
        assert not os.path.exists(os.path.join(reports, 'report', 'run_history.csv'))
        assert not os.path.exists(os.path.join(reports, results_db.DB_FILENAME))

    def test_failed_acceptance_exits_with_4(self, reports, monkeypatch):
        monkeypatch.setattr(app, 'AcceptanceChecker',
                            lambda reports_dir, seed=0: AcceptanceChecker(reports_dir, seed=seed, quick=True))
        assert app.main(['report', '--out', reports, '--check-acceptance', '--quiet']) == 0
        # FCN now beats FusionVAE and contexts stop helping
        _write_report(os.path.join(reports, 'reports'), 'fcn', 'FCN', {k: None for k in range(4)},
                      {k: 0.01 for k in range(4)})
        assert app.main(['report', '--out', reports, '--check-acceptance', '--quiet']) == 4


class TestUsage:

    def test_help_lists_every_config_key(self, capsys):
        with pytest.raises(SystemExit) as info:
            app.main(['train', '--help'])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for field in fields(TrainConfig):
            assert f"  {field.name} (" in text
        for name in ExperimentPresets.list_presets():
            assert f"  {name}: " in text

    def test_bad_override_exits_with_2(self, tmp_path):
        assert app.main(['datagen', '--out', str(tmp_path), '--set', 'no_such_key=1', '--quiet']) == 2
        assert app.main(['train', '--out', str(tmp_path), '--set', 'prior_mode=SumAgg', '--quiet']) == 2

    def test_missing_command(self):
        with pytest.raises(SystemExit) as info:
            app.main([])
        assert info.value.code == 2
