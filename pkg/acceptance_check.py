#!/usr/bin/env python3
"""
Acceptance harness for the fusion lab.

Runs the numeric oracles that need no trained model (aggregation
equivalence, permutation invariance, likelihood normalization, BPD units,
MSE-min monotonicity) and, when a reports directory is given, the
desk-scale FusionMNIST trend checks on the aggregated run reports.
"""
import itertools
import logging
import math
import os
import sys
import time
from typing import Dict, Optional

import torch

from aggregation import GaussianFeature, bayes_agg_closed, bayes_agg_iter
from evaluator import EvalReport, mse_min_from_samples, nll_bpd
from fusion_vae import PRIOR_MODES, FusionVAE, HierarchySpec
from likelihoods import DiscretizedLogisticMixture, output_channels

logger = logging.getLogger(__name__)

MIN_TREND_RUNS = 3
MSE_RATIO_LIMIT = 0.5


class _UniformModel:
    """Puts mass 1/256 on every pixel value, whatever the input"""

    def importance_log_weights(self, contexts, target, n_samples):
        dims = target[0].numel()
        return torch.full((n_samples, target.size(0)), -dims * math.log(256.0), dtype=torch.float64)


class AcceptanceChecker:
    def __init__(self, reports_dir: Optional[str] = None, seed: int = 0, quick: bool = False):
        """
        Args:
            reports_dir: Directory with aggregated reports (fusionvae.json, fcn.json) for the trend checks
            seed: Seed of every random instance
            quick: Smaller instance counts for smoke runs
        """
        self.reports_dir = reports_dir
        self.seed = seed
        self.quick = quick
        self.tests_run = 0
        self.tests_passed = 0
        self.failures = []

    def log_test(self, name: str, success: bool, details: str = "") -> bool:
        """Log test results"""
        self.tests_run += 1
        if success:
            self.tests_passed += 1
            logger.info(f"✅ {name} - PASSED" + (f" ({details})" if details else ""))
        else:
            self.failures.append(name)
            logger.error(f"❌ {name} - FAILED: {details}")
        return success

    def _count(self, full: int, quick: int) -> int:
        return quick if self.quick else full

    # --- oracles -----------------------------------------------------------

    def test_aggregation_oracle(self) -> bool:
        """Iterative and closed-form Bayesian aggregation agree on random instances"""
        gen = torch.Generator().manual_seed(self.seed)
        worst_mu, worst_var = 0.0, 0.0
        start = time.time()
        for _ in range(self._count(1000, 100)):
            k = int(torch.randint(1, 6, (1,), generator=gen))
            shape = tuple(int(d) for d in torch.randint(1, 5, (3,), generator=gen))

            def draw():
                mu = torch.randn(shape, generator=gen, dtype=torch.float64)
                var = torch.exp(torch.randn(shape, generator=gen, dtype=torch.float64))
                return GaussianFeature(mu, var)

            prior = draw() if bool(torch.rand(1, generator=gen) < 0.5) else None
            obs = [draw() for _ in range(k)]
            a, b = bayes_agg_iter(prior, obs), bayes_agg_closed(prior, obs)
            worst_mu = max(worst_mu, float((a.mu - b.mu).abs().max()))
            worst_var = max(worst_var, float((a.var - b.var).abs().max()))
        elapsed = time.time() - start
        return self.log_test("Bayesian aggregation oracle", worst_mu < 1e-6 and worst_var < 1e-6,
                             f"max |dmu|={worst_mu:.2e}, max |dvar|={worst_var:.2e}, {elapsed:.1f}s")

    def test_permutation_invariance(self) -> bool:
        """Every prior mode gives the same p_l for all orderings of three contexts"""
        spec = HierarchySpec([(1, 2), (1, 4)], latent_channels=2, base_width=2, image_size=8)
        worst = 0.0
        for seed in range(self._count(50, 5)):
            torch.manual_seed(self.seed + seed)
            model = FusionVAE(spec).double().eval()
            contexts = [torch.rand(2, 1, 8, 8, dtype=torch.float64) for _ in range(3)]
            z = [torch.randn(2, 2, s, s, dtype=torch.float64) for s, _ in spec.group_layout()]
            with torch.no_grad():
                for mode in PRIOR_MODES:
                    model.prior_mode = mode
                    reference = model.conditional_priors(contexts, z)
                    for order in itertools.permutations(range(3)):
                        priors = model.conditional_priors([contexts[i] for i in order], z)
                        for p, q in zip(reference, priors):
                            worst = max(worst, float((p.mu - q.mu).abs().max()), float((p.var - q.var).abs().max()))
        return self.log_test("Prior permutation invariance", worst <= 1e-6, f"max deviation {worst:.2e}")

    def test_likelihood_normalization(self) -> bool:
        """The discretized logistic mixture sums to one over all 256 levels"""
        torch.manual_seed(self.seed)
        num_mix, side = 10, self._count(100, 20)
        params = torch.randn(1, output_channels('logistic_mixture', 1, num_mix), side, side, dtype=torch.float64)
        dist = DiscretizedLogisticMixture(params, 1, num_mix)
        levels = [dist.log_prob_per_pixel(torch.full((1, 1, side, side), v / 255.0, dtype=torch.float64))
                  for v in range(256)]
        total = torch.logsumexp(torch.stack(levels, dim=0), dim=0).exp()
        worst = float((total - 1.0).abs().max())
        return self.log_test("Likelihood normalization", worst < 1e-5,
                             f"{side * side} pixel draws, max |sum - 1| = {worst:.2e}")

    def test_uniform_bpd(self) -> bool:
        target = torch.rand(4, 1, 32, 32)
        estimate = nll_bpd(_UniformModel(), [], target, n_samples=3)
        worst = float(abs(estimate.bpd - 8.0).max())
        return self.log_test("Uniform model BPD", worst < 1e-9, f"max |bpd - 8| = {worst:.2e}")

    def test_mse_min_monotonicity(self) -> bool:
        """mse_min over nested sample sets never increases"""
        gen = torch.Generator().manual_seed(self.seed)
        samples = torch.rand(32, 100, 1, 8, 8, generator=gen)
        target = torch.rand(100, 1, 8, 8, generator=gen)
        values = [mse_min_from_samples(samples[:s], target) for s in (1, 8, 32)]
        ok = bool(torch.all(values[1] <= values[0]) and torch.all(values[2] <= values[1]))
        return self.log_test("MSE-min monotonicity", ok, "S = 1, 8, 32 on 100 targets")

    # --- trend -------------------------------------------------------------

    def _load_report(self, name: str) -> Optional[EvalReport]:
        path = os.path.join(self.reports_dir, f"{name}.json")
        if not os.path.exists(path):
            return None
        with open(path, encoding='utf-8') as f:
            return EvalReport.from_json(f.read())

    def test_trend(self) -> bool:
        """Desk-scale ordering on the mean of the runs"""
        fusion, fcn = self._load_report('fusionvae'), self._load_report('fcn')
        if fusion is None or fcn is None:
            return self.log_test("Desk-scale trend", False, f"fusionvae.json and fcn.json needed in {self.reports_dir}")
        ok = self.log_test("Trend: enough runs", min(fusion.n_runs, fcn.n_runs) >= MIN_TREND_RUNS,
                           f"FusionVAE {fusion.n_runs} runs, FCN {fcn.n_runs} runs")
        ratio = fusion.mse_min['3'] / fusion.mse_min['0']
        ok &= self.log_test("Trend: MSE-min K=3 vs K=0", ratio < MSE_RATIO_LIMIT, f"ratio {ratio:.3f}")
        ok &= self.log_test("Trend: FusionVAE beats FCN", fusion.mse_min['avg'] < fcn.mse_min['avg'],
                            f"{fusion.mse_min['avg']:.4f} vs {fcn.mse_min['avg']:.4f}")
        nll0, nll3 = fusion.nll_bpd['0'], fusion.nll_bpd['3']
        ok &= self.log_test("Trend: NLL falls with contexts", nll0 is not None and nll3 is not None and nll0 > nll3,
                            f"K=0 {nll0} BPD vs K=3 {nll3} BPD")
        return ok

    def run_all_tests(self) -> bool:
        logger.info("🚀 Starting acceptance checks")
        self.test_aggregation_oracle()
        self.test_permutation_invariance()
        self.test_likelihood_normalization()
        self.test_uniform_bpd()
        self.test_mse_min_monotonicity()
        if self.reports_dir:
            self.test_trend()

        logger.info(f"📊 Acceptance results: {self.tests_passed}/{self.tests_run} passed")
        if self.tests_passed == self.tests_run:
            logger.info("🎉 All acceptance checks passed!")
            return True
        logger.warning(f"⚠️ {self.tests_run - self.tests_passed} checks failed: {', '.join(self.failures)}")
        return False

    def summary(self) -> Dict:
        return {'run': self.tests_run, 'passed': self.tests_passed, 'failures': list(self.failures)}


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    checker = AcceptanceChecker(sys.argv[1] if len(sys.argv) > 1 else None)
    return 0 if checker.run_all_tests() else 4


if __name__ == "__main__":
    sys.exit(main())
