"""Tests for importance-sampled NLL, MSE-min, run aggregation and the result tables."""

import math

import numpy as np
import pytest
import torch
from torch.utils.data import TensorDataset

from baselines import BaselineSpec, build_baseline
from errors import ReportError
from evaluator import (COLUMN_KEYS, EvalReport, build_report, aggregate_runs, config_hash,
                       evaluate_model, load_samples_npz, log_mean_exp, mse_min,
                       mse_min_from_samples, nll_bpd, results_table, table_to_csv,
                       table_to_markdown, write_samples_npz)
from fusion_vae import FusionVAE, HierarchySpec
from objective import compute_loss


class ConstantWeights:
    """Every importance weight equals a fixed per-image log value"""

    def __init__(self, log_value):
        self.log_value = log_value

    def importance_log_weights(self, contexts, target, n_samples):
        return torch.full((n_samples, target.size(0)), self.log_value, dtype=torch.float64)


class ConjugateGaussian:
    """
    z ~ N(0, 1), y | z ~ N(z, 1) with a deliberately mis-centred proposal
    q(z | y) = N(y / 2 + 0.3, 0.8). The exact marginal is log N(y; 0, 2).
    """

    def __init__(self, seed):
        self.generator = torch.Generator().manual_seed(seed)

    @staticmethod
    def _log_normal(x, mean, var):
        return -0.5 * (math.log(2 * math.pi * var) + (x - mean) ** 2 / var)

    def importance_log_weights(self, contexts, target, n_samples):
        y = target.double().flatten(1)[:, 0]
        mean_q, var_q = y / 2 + 0.3, 0.8
        z = mean_q + math.sqrt(var_q) * torch.randn(n_samples, y.numel(), generator=self.generator,
                                                     dtype=torch.float64)
        return (self._log_normal(z, 0.0, 1.0) + self._log_normal(y, z, 1.0)
                - self._log_normal(z, mean_q, var_q))

    @classmethod
    def exact(cls, y):
        return cls._log_normal(y, 0.0, 2.0)


def _report(arch='FusionVAE', nll=0.1, mse=0.02, hash_value='abc'):
    return build_report(arch, 'fmnist', {k: nll for k in range(4)}, {k: mse for k in range(4)}, 10, 10,
                        config_hash_value=hash_value)


class TestNllBpd:

    def test_uniform_model_scores_eight_bits(self):
        target = torch.zeros(3, 1, 8, 8)
        estimate = nll_bpd(ConstantWeights(-64 * math.log(256.0)), [], target, 5)
        np.testing.assert_allclose(estimate.bpd, 8.0, atol=1e-9)
        assert estimate.mean_bpd == pytest.approx(8.0)

    def test_bpd_is_invariant_to_image_size(self):
        small = nll_bpd(ConstantWeights(-64 * 3.0), [], torch.zeros(1, 1, 8, 8), 2)
        large = nll_bpd(ConstantWeights(-3 * 1024 * 3.0), [], torch.zeros(1, 3, 32, 32), 2)
        np.testing.assert_allclose(small.bpd, large.bpd)

    def test_chunking_does_not_change_constant_weights(self):
        model = ConstantWeights(-10.0)
        whole = nll_bpd(model, [], torch.zeros(2, 1, 4, 4), 10)
        chunked = nll_bpd(model, [], torch.zeros(2, 1, 4, 4), 10, chunk_size=3)
        np.testing.assert_allclose(whole.log_likelihood, chunked.log_likelihood)

    def test_non_finite_weights_are_excluded(self):
        class OneBroken(ConstantWeights):
            def importance_log_weights(self, contexts, target, n_samples):
                log_w = super().importance_log_weights(contexts, target, n_samples)
                log_w[0, 1] = float('nan')
                return log_w

        estimate = nll_bpd(OneBroken(-5.0), [], torch.zeros(3, 1, 2, 2), 4)
        assert estimate.excluded == 1
        assert estimate.bpd.shape == (2,)

    def test_needs_samples(self):
        with pytest.raises(ValueError):
            nll_bpd(ConstantWeights(0.0), [], torch.zeros(1, 1, 2, 2), 0)

    def test_log_mean_exp(self):
        log_w = torch.log(torch.tensor([[1.0], [2.0], [3.0]]))
        torch.testing.assert_close(log_mean_exp(log_w), torch.log(torch.tensor([2.0], dtype=torch.float64)))


class TestImportanceOracle:

    def test_error_within_three_standard_errors(self):
        hits = 0
        rng = np.random.default_rng(0)
        for seed in range(200):
            y = float(rng.normal(0.0, math.sqrt(2.0)))
            estimate = nll_bpd(ConjugateGaussian(seed), [], torch.tensor([[[[y]]]]), 100)
            error = abs(float(estimate.log_likelihood[0]) - ConjugateGaussian.exact(y))
            hits += error < 3 * float(estimate.stderr[0])
        assert hits >= 190

    def test_error_shrinks_with_more_samples(self):
        rng = np.random.default_rng(1)
        ys = rng.normal(0.0, math.sqrt(2.0), size=200)
        medians = []
        for n_samples in (1, 10, 100):
            errors = [abs(float(nll_bpd(ConjugateGaussian(i), [], torch.tensor([[[[y]]]]), n_samples)
                                .log_likelihood[0]) - ConjugateGaussian.exact(y))
                      for i, y in enumerate(ys)]
            medians.append(np.median(errors))
        assert medians[0] > medians[1] > medians[2]


def _latent_blind_model(posterior_mean, posterior_logvar):
    """
    One-group FusionVAE whose decoder ignores z and whose posterior is a fixed
    N(mean, exp(logvar)). Without contexts the prior is N(0, 1), so log p(y)
    is the likelihood of any decode and the ELBO has a closed form.
    """
    spec = HierarchySpec([(1, 2)], latent_channels=1, base_width=2, image_channels=1, image_size=4)
    model = FusionVAE(spec, likelihood='bernoulli', prior_mode='MaxAggAdd').eval()
    with torch.no_grad():
        model.combiners[0].conv.weight[:, -spec.latent_channels:] = 0.0
        model.posterior_nets[0].weight.zero_()
        model.posterior_nets[0].bias.copy_(torch.tensor([posterior_mean, posterior_logvar]))
    return model


class TestModelImportanceOracle:

    @pytest.fixture
    def target(self):
        return torch.randint(0, 2, (3, 1, 4, 4), generator=torch.Generator().manual_seed(5)).float()

    @staticmethod
    def _exact_log_p(model, target):
        with torch.no_grad():
            return model(contexts=[], target=target).likelihood.log_prob(target).double()

    def test_posterior_equal_to_prior_gives_exact_weights(self, target):
        model = _latent_blind_model(0.0, 0.0)
        exact = self._exact_log_p(model, target)
        log_w = model.importance_log_weights([], target, 16)
        torch.testing.assert_close(log_w, exact.expand_as(log_w), rtol=0.0, atol=1e-5)
        estimate = nll_bpd(model, [], target, 16)
        np.testing.assert_allclose(estimate.bpd, (-exact / (16 * math.log(2.0))).numpy(), atol=1e-6)

    def test_mismatched_posterior_converges_to_exact_likelihood(self, target):
        mean, logvar = 0.5, 0.2
        model = _latent_blind_model(mean, logvar)
        exact = self._exact_log_p(model, target).numpy()

        estimate = nll_bpd(model, [], target, 4000, chunk_size=1000)
        error = np.abs(estimate.log_likelihood - exact)
        assert np.all(error < 4 * estimate.stderr + 1e-3)
        np.testing.assert_allclose(estimate.bpd, -exact / (16 * math.log(2.0)), atol=0.01)

    def test_weights_average_to_the_elbo(self, target):
        mean, logvar = 0.5, 0.2
        model = _latent_blind_model(mean, logvar)
        exact = self._exact_log_p(model, target)
        # 4 latent elements, each KL(N(mean, e^logvar) || N(0, 1))
        kl = 4 * 0.5 * (math.exp(logvar) + mean ** 2 - 1.0 - logvar)

        with torch.no_grad():
            loss = compute_loss(model(contexts=[], target=target), target, beta=1.0, alpha=[1.0])
        assert -float(loss.total) == pytest.approx(float(exact.mean()) - kl, abs=1e-4)

        log_w = model.importance_log_weights([], target, 4000)
        np.testing.assert_allclose(log_w.mean(dim=0).numpy(), (exact - kl).numpy(), atol=0.1)
        # the importance bound is never looser than the ELBO
        assert torch.all(log_mean_exp(log_w) >= log_w.mean(dim=0))
        assert torch.all(log_mean_exp(log_w) >= exact - kl)


class TestMseMin:

    def test_more_samples_never_hurt(self):
        torch.manual_seed(0)
        samples = torch.rand(20, 4, 1, 8, 8)
        target = torch.rand(4, 1, 8, 8)
        values = [mse_min_from_samples(samples[:s], target) for s in range(1, 21)]
        for smaller, larger in zip(values, values[1:]):
            assert bool((larger <= smaller).all())

    def test_exact_sample_scores_zero(self):
        target = torch.rand(2, 3, 4, 4)
        samples = torch.stack([torch.rand_like(target), target, torch.rand_like(target)])
        assert torch.equal(mse_min_from_samples(samples, target), torch.zeros(2))

    def test_model_interface(self, tiny_spec):
        model = FusionVAE(tiny_spec).eval()
        out = mse_min(model, [torch.rand(3, 1, 8, 8)], torch.rand(3, 1, 8, 8), 4)
        assert out.shape == (3,) and bool((out >= 0).all())
        with pytest.raises(ValueError):
            mse_min(model, [], torch.rand(1, 1, 8, 8), 0)


class TestEvaluateModel:

    @pytest.fixture
    def dataset(self):
        return TensorDataset(torch.rand(5, 1, 8, 8), torch.rand(5, 3, 1, 8, 8))

    def test_fusion_vae_report(self, tiny_spec, dataset):
        report = evaluate_model(FusionVAE(tiny_spec), dataset, 'FusionVAE', 'fmnist', n_importance_samples=3,
                                batch_size=2)
        assert list(report.nll_bpd) == COLUMN_KEYS
        assert all(math.isfinite(v) for v in report.nll_bpd.values())
        assert report.mse_min['avg'] == pytest.approx(np.mean([report.mse_min[str(k)] for k in range(4)]))
        assert report.n_mse_samples == 3

    def test_fcn_has_no_likelihood(self, dataset):
        model = build_baseline(BaselineSpec('FCN', base_width=4, latent_channels=2, latent_spatial=4, image_size=8))
        report = evaluate_model(model, dataset, 'FCN', 'fmnist', n_importance_samples=2, k_values=(0, 1))
        assert report.nll_bpd == {'0': None, '1': None, 'avg': None}
        assert report.mse_min['avg'] is not None

    def test_samples_npz(self, tiny_spec, dataset, tmp_path):
        path = write_samples_npz(FusionVAE(tiny_spec), dataset, str(tmp_path / 'samples.npz'), n_items=2,
                                 n_samples=3, k_values=(0, 2))
        grids = load_samples_npz(path)
        assert sorted(grids) == [0, 2]
        assert grids[0]['inputs'].shape == (2, 0, 1, 8, 8)
        assert grids[2]['inputs'].shape == (2, 2, 1, 8, 8)
        assert grids[2]['samples'].shape == (2, 3, 1, 8, 8)
        assert grids[2]['targets'].shape == (2, 1, 8, 8)


class TestAggregateRuns:

    def test_single_run(self):
        report = _report()
        aggregate, best = aggregate_runs([report])
        assert aggregate.nll_std is None and aggregate.n_runs == 1
        assert aggregate.nll_bpd == report.nll_bpd
        assert best is report

    def test_identical_runs_have_zero_spread(self):
        aggregate, _ = aggregate_runs([_report(), _report(), _report()])
        assert aggregate.n_runs == 3
        assert all(v == 0.0 for v in aggregate.nll_std.values())

    def test_hand_computed_mean_and_std(self):
        runs = [_report(nll=v, mse=v / 10) for v in (1.0, 2.0, 3.0)]
        aggregate, best = aggregate_runs(runs)
        assert aggregate.nll_bpd['avg'] == pytest.approx(2.0)
        assert aggregate.nll_std['0'] == pytest.approx(1.0)
        assert aggregate.mse_std['3'] == pytest.approx(0.1)
        assert best is runs[0]

    def test_missing_cells_stay_missing(self):
        fcn = [build_report('FCN', 'fmnist', {k: None for k in range(4)}, {k: m for k in range(4)}, 5, 5)
               for m in (0.2, 0.1)]
        aggregate, best = aggregate_runs(fcn)
        assert aggregate.nll_bpd['avg'] is None and aggregate.nll_std['avg'] is None
        assert best is fcn[1]

    def test_mixed_configurations(self):
        with pytest.raises(ReportError):
            aggregate_runs([_report(hash_value='a'), _report(hash_value='b')])
        with pytest.raises(ReportError):
            aggregate_runs([])


class TestReports:

    def test_json_round_trip(self):
        report = _report()
        report.annotations.append('skipped 3 steps')
        assert EvalReport.from_json(report.to_json()) == report

    def test_config_hash_ignores_run_keys(self):
        assert config_hash({'lr': 0.01, 'seed': 1}) == config_hash({'lr': 0.01, 'seed': 2})
        assert config_hash({'lr': 0.01}) != config_hash({'lr': 0.02})

    def test_table_layout(self):
        reports = {arch: _report(arch) for arch in ('FCN', 'FCN+S', 'CVAE', 'CVAE+S', 'FusionVAE')}
        rows = results_table(reports)
        assert len(rows) == 6
        assert all(len(row) == 11 for row in rows)
        assert [row[0] for row in rows[1:]] == ['FCN', 'FCN+S', 'CVAE', 'CVAE+S', 'FusionVAE']
        assert rows[1][1] == '10.00' and rows[1][6] == '2.00'

    def test_missing_cells_and_spread(self):
        fcn = build_report('FCN', 'fmnist', {k: None for k in range(4)}, {k: 0.0123 for k in range(4)}, 5, 5)
        aggregate, _ = aggregate_runs([_report(nll=v) for v in (0.1, 0.12)])
        rows = results_table({'FCN': fcn, 'FusionVAE': aggregate}, with_std=True)
        assert rows[1][1:6] == ['n/a'] * 5
        assert rows[1][6] == '1.23'
        assert '±' in rows[2][1]

    def test_text_renderings(self):
        rows = results_table({'FusionVAE': _report()})
        assert table_to_csv(rows).splitlines()[0].startswith('Architecture,NLL 0')
        markdown = table_to_markdown(rows).splitlines()
        assert len(markdown) == 3 and markdown[1].startswith('|---|')
