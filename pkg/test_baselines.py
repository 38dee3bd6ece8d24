import itertools

import pytest
import torch

from baselines import (BASELINE_KINDS, BaselineSpec, CVAEBaseline, FCNBaseline,
                       build_baseline, cvae_forward, fcn_forward, fit_baseline_spec,
                       skip_fuse)
from errors import ConfigError, ShapeMismatchError
from evaluator import mse_min
from fusion_vae import FusionVAE, HierarchySpec
from residual_cells import count_parameters


def _spec(kind, **kwargs):
    return BaselineSpec(kind, base_width=4, latent_channels=2, latent_spatial=4, image_size=8, **kwargs)


def _contexts(k, batch=2):
    return [torch.rand(batch, 1, 8, 8) for _ in range(k)]


class TestBaselineSpec:

    def test_flags(self):
        assert _spec('CVAE+S').is_vae and _spec('CVAE+S').uses_skips
        assert not _spec('FCN').is_vae and not _spec('FCN').uses_skips
        assert _spec('FCN').num_levels == 1

    def test_rejects_unknown_kind(self):
        with pytest.raises(ConfigError):
            _spec('GAN')

    def test_rejects_latent_size(self):
        with pytest.raises(ConfigError):
            BaselineSpec('CVAE', base_width=4, latent_spatial=3, image_size=8)

    def test_build(self):
        assert isinstance(build_baseline(_spec('CVAE')), CVAEBaseline)
        assert isinstance(build_baseline(_spec('FCN+S')), FCNBaseline)


class TestSkipFuse:

    def test_identity_on_equal_inputs(self):
        x = torch.randn(2, 3, 4, 4)
        assert torch.equal(skip_fuse(x, x), x)

    def test_masked_side_yields_other(self):
        dec = torch.randn(2, 3, 4, 4)
        assert torch.equal(skip_fuse(torch.full_like(dec, float('-inf')), dec), dec)
        assert torch.equal(skip_fuse(None, dec), dec)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            skip_fuse(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 2, 2))


class TestCVAE:

    @pytest.mark.parametrize("kind", ['CVAE', 'CVAE+S'])
    def test_empty_context_prior_is_standard_normal(self, kind):
        model = build_baseline(_spec(kind))
        out = model([], torch.rand(2, 1, 8, 8))
        prior = out.latents.priors[0]
        assert torch.equal(prior.mu, torch.zeros(2, 2, 4, 4))
        assert torch.equal(prior.var, torch.ones(2, 2, 4, 4))
        assert len(out.latents.posteriors) == 1

    def test_context_permutation_invariance(self):
        model = build_baseline(_spec('CVAE+S')).eval()
        ctx = _contexts(3)
        reference = model.sample(ctx, n_samples=1, temperature=0.0)
        for order in itertools.permutations(ctx):
            torch.testing.assert_close(model.sample(list(order), n_samples=1, temperature=0.0), reference,
                                       atol=1e-6, rtol=0)

    def test_functional_forward(self):
        model = build_baseline(_spec('CVAE')).eval()
        with torch.no_grad():
            unconditional = cvae_forward(model, [], batch_size=3)
            trained = cvae_forward(model, _contexts(1), torch.rand(2, 1, 8, 8))
        assert unconditional.likelihood.mean().shape == (3, 1, 8, 8)
        assert unconditional.latents.posteriors == []
        assert len(trained.latents.posteriors) == 1

    def test_importance_weights(self):
        model = build_baseline(_spec('CVAE')).eval()
        log_w = model.importance_log_weights(_contexts(2), torch.rand(2, 1, 8, 8), 3)
        assert log_w.shape == (3, 2)
        assert bool(torch.isfinite(log_w).all())

    def test_mixture_likelihood(self):
        spec = BaselineSpec('CVAE', base_width=4, latent_channels=2, latent_spatial=8, image_channels=3,
                            image_size=16, likelihood='logistic_mixture')
        model = build_baseline(spec).eval()
        samples = model.sample([torch.rand(2, 3, 16, 16)], n_samples=2)
        assert samples.shape == (2, 2, 3, 16, 16)


class TestFCN:

    def test_repeated_context_is_idempotent(self):
        model = build_baseline(_spec('FCN+S')).eval()
        x = torch.rand(2, 1, 8, 8)
        with torch.no_grad():
            torch.testing.assert_close(model([x, x]), model([x]))

    def test_deterministic(self):
        model = build_baseline(_spec('FCN')).eval()
        ctx = _contexts(2)
        with torch.no_grad():
            assert torch.equal(fcn_forward(model, ctx), fcn_forward(model, ctx))

    def test_empty_context_uses_learned_constant(self):
        model = build_baseline(_spec('FCN')).eval()
        with torch.no_grad():
            out = model([], batch_size=3)
        assert out.shape == (3, 1, 8, 8)
        torch.testing.assert_close(out[0], out[2])
        with pytest.raises(ValueError):
            model([])

    def test_samples_are_identical(self):
        model = build_baseline(_spec('FCN')).eval()
        ctx, target = _contexts(1), torch.rand(2, 1, 8, 8)
        samples = model.sample(ctx, n_samples=5)
        assert all(torch.equal(samples[0], samples[s]) for s in range(5))
        single = ((model.reconstruct(ctx, target) - target) ** 2).flatten(1).mean(dim=1)
        torch.testing.assert_close(mse_min(model, ctx, target, 5), single)

    def test_overfits_a_fixed_batch(self):
        torch.manual_seed(0)
        model = build_baseline(_spec('FCN+S'))
        ramp = torch.linspace(0.0, 1.0, 8)
        target = (ramp.view(1, 1, 8, 1) * ramp.view(1, 1, 1, 8)).expand(4, 1, 8, 8).contiguous()
        ctx = [target * (torch.rand(4, 1, 8, 8) > 0.5) for _ in range(2)]
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-2)
        losses = []
        for _ in range(100):
            optimizer.zero_grad()
            loss = model.loss(ctx, target)
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        assert losses[-1] < 0.5 * losses[0]


class TestParameterMatching:

    @pytest.fixture(scope='class')
    def fusion_parameters(self):
        spec = HierarchySpec([(5, 4), (2, 8)], latent_channels=10, base_width=4)
        return count_parameters(FusionVAE(spec))

    @pytest.mark.parametrize("kind", BASELINE_KINDS)
    def test_within_tolerance(self, kind, fusion_parameters):
        template = BaselineSpec(kind, base_width=4, latent_channels=10, latent_spatial=8)
        spec = fit_baseline_spec(kind, fusion_parameters, template)
        count = count_parameters(build_baseline(spec))
        assert abs(count - fusion_parameters) / fusion_parameters <= 0.10
        assert spec.kind == kind

    def test_unreachable_target(self):
        with pytest.raises(ConfigError):
            fit_baseline_spec('FCN', 10, _spec('FCN'))
