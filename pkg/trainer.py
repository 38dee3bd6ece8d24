"""
Training loop, multi-run orchestration and the prior/posterior ablation grid.

Every batch draws its own context count K uniformly from {0..3} and keeps
only the first K contexts of each sample. VAEs minimize the KL-annealed
negative ELBO, FCNs the pixel MSE. Non-finite batches are skipped and
counted; a run aborts once they exceed max_skip_fraction of an epoch.
"""
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

import results_db
from augmentation import K_MAX, sample_context_count
from baselines import BaselineSpec, FCNBaseline, build_baseline, fit_baseline_spec
from checkpoints import load_checkpoint, model_kind, save_checkpoint
from config import TrainConfig, write_resolved_config
from dataset_generator import (MANIFEST_NAME, FusionManifestDataset, FusionStreamDataset,
                               build_augmenter)
from errors import (ConfigError, FusionLabError, NonFiniteLikelihoodError, ReportError,
                    TrainingAborted)
from evaluator import (EvalReport, aggregate_runs, config_hash, evaluate_model,
                       write_samples_npz)
from fusion_vae import POSTERIOR_VARIANTS, PRIOR_MODES, FusionVAE
from metrics_logger import MetricsLogger
from objective import ScheduleState, compute_loss

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = 'checkpoint.pt'
REPORT_NAME = 'report.json'
SAMPLES_NAME = 'samples.npz'
BASELINE_SPECS_NAME = 'baseline_specs.json'

# ablation studies: (prior modes, posterior variants)
ABLATION_STUDIES = {
    'posterior': (('MaxAggAdd',), POSTERIOR_VARIANTS),
    'aggregation': (PRIOR_MODES, ('q(y)',)),
}


def lr_at(step: int, total_steps: int, lr_start: float = 0.01, lr_end: float = 0.0001) -> float:
    """Cosine annealing from lr_start at step 0 to lr_end at total_steps"""
    if total_steps <= 0:
        return lr_start
    step = min(max(step, 0), total_steps)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


def arch_dirname(architecture: str) -> str:
    return architecture.lower().replace('+s', '_s')


def is_vae(model: nn.Module) -> bool:
    return not isinstance(model, FCNBaseline)


def truncate_contexts(contexts: torch.Tensor, k: int) -> List[torch.Tensor]:
    """[B, K_MAX, C, H, W] -> the first k context batches"""
    return [contexts[:, i] for i in range(k)]


def latent_group_sizes(model: nn.Module) -> List[int]:
    if isinstance(model, FusionVAE):
        return model.spec.group_sizes()
    spec = model.spec
    return [spec.latent_channels * spec.latent_spatial ** 2]


# --- model construction ---------------------------------------------------

def build_fusion_model(cfg: TrainConfig) -> FusionVAE:
    return FusionVAE(cfg.hierarchy_spec(), likelihood=cfg.likelihood, prior_mode=cfg.prior_mode,
                     posterior_variant=cfg.posterior_variant, share_encoder=cfg.share_encoder,
                     cells_per_group=cfg.cells_per_group, use_se=cfg.use_se, num_mix=cfg.num_mix)


def baseline_template(cfg: TrainConfig, kind: str) -> BaselineSpec:
    spec = cfg.hierarchy_spec()
    return BaselineSpec(kind, base_width=cfg.base_width, latent_channels=cfg.latent_channels,
                        latent_spatial=spec.finest_spatial, image_channels=cfg.image_channels,
                        image_size=cfg.image_size, likelihood=cfg.likelihood, num_mix=cfg.num_mix)


def match_baselines(cfg: TrainConfig, kinds: Sequence[str]) -> Dict[str, BaselineSpec]:
    """Parameter-matched specs of every requested baseline"""
    kinds = [k for k in kinds if k != 'FusionVAE']
    if not kinds:
        return {}
    target = build_fusion_model(cfg).num_parameters()
    logger.info(f"FusionVAE has {target} parameters; matching baselines within {cfg.baseline_tolerance:.0%}")
    return {kind: fit_baseline_spec(kind, target, baseline_template(cfg, kind), cfg.baseline_tolerance)
            for kind in kinds}


def build_model(architecture: str, cfg: TrainConfig,
                baseline_specs: Optional[Dict[str, BaselineSpec]] = None) -> nn.Module:
    if architecture == 'FusionVAE':
        return build_fusion_model(cfg)
    specs = baseline_specs if baseline_specs is not None else match_baselines(cfg, [architecture])
    return build_baseline(specs[architecture])


# --- training -------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    batches: int = 0
    skipped: int = 0
    loss_sum: float = 0.0
    k_counts: List[int] = field(default_factory=lambda: [0] * (K_MAX + 1))
    seconds: float = 0.0

    @property
    def mean_loss(self) -> float:
        done = self.batches - self.skipped
        return self.loss_sum / done if done else float('nan')

    def as_record(self) -> Dict:
        return {'epoch': self.epoch, 'batches': self.batches, 'skipped': self.skipped,
                'mean_loss': self.mean_loss, 'k_counts': list(self.k_counts), 'seconds': self.seconds}


class Trainer:
    def __init__(self, model: nn.Module, cfg: TrainConfig, total_steps: int, seed: int = 0,
                 metrics: Optional[MetricsLogger] = None, show_progress: bool = True):
        """
        Owns the optimizer, the KL schedule and the per-batch context-count stream

        Args:
            model: FusionVAE or a baseline
            cfg: Resolved training configuration
            total_steps: Optimizer steps over the whole run (sets LR and warm-up length)
            seed: Seed of the K stream
            metrics: Optional metrics.jsonl writer
            show_progress: Show a tqdm bar per epoch
        """
        self.model = model
        self.cfg = cfg
        self.total_steps = max(1, total_steps)
        self.device = cfg.device
        self.metrics = metrics
        self.show_progress = show_progress
        self.k_rng = np.random.default_rng(seed)
        self.step = 0
        self.epoch = 0
        self.optimizer = torch.optim.Adamax(model.parameters(), lr=cfg.lr_start,
                                            betas=(cfg.adamax_beta1, cfg.adamax_beta2),
                                            eps=cfg.adamax_eps, weight_decay=cfg.weight_decay)
        self.schedule = None
        if is_vae(model):
            warmup = max(1, int(round(cfg.warmup_fraction * self.total_steps)))
            self.schedule = ScheduleState(latent_group_sizes(model), warmup, alpha_mode=cfg.alpha_mode)

    def current_lr(self) -> float:
        return lr_at(self.step, self.total_steps, self.cfg.lr_start, self.cfg.lr_end)

    def _set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group['lr'] = lr

    def batch_loss(self, contexts: List[torch.Tensor], target: torch.Tensor):
        """(loss tensor, LossBreakdown or None for FCNs)"""
        if not is_vae(self.model):
            return self.model.loss(contexts, target), None
        # the KL EMA is updated only once the batch is known to be finite
        breakdown = compute_loss(self.model(contexts, target), target, None, self.cfg.free_bits,
                                 beta=self.schedule.beta(), alpha=self.schedule.alpha())
        return breakdown.total, breakdown

    def train_step(self, target: torch.Tensor, contexts: torch.Tensor, k: int) -> Optional[float]:
        """One optimizer step; returns the loss, or None when the batch was skipped"""
        target = target.to(self.device)
        ctx = truncate_contexts(contexts.to(self.device), k)
        lr = self.current_lr()
        self._set_lr(lr)
        self.optimizer.zero_grad(set_to_none=True)
        try:
            loss, breakdown = self.batch_loss(ctx, target)
        except NonFiniteLikelihoodError as e:
            logger.warning(f"⚠️ Skipping batch at step {self.step}: {e}")
            self._log_skip(k, 'non-finite likelihood')
            return None
        if not torch.isfinite(loss):
            logger.warning(f"⚠️ Skipping batch at step {self.step}: loss is {loss.item()}")
            self._log_skip(k, 'non-finite loss')
            return None

        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        if not torch.isfinite(grad_norm):
            self.optimizer.zero_grad(set_to_none=True)
            logger.warning(f"⚠️ Skipping batch at step {self.step}: gradient norm is {grad_norm.item()}")
            self._log_skip(k, 'non-finite gradient')
            return None
        self.optimizer.step()
        if breakdown is not None:
            self.schedule.update([float(kl.detach()) for kl in breakdown.kl_per_group])

        if self.metrics is not None:
            if breakdown is not None:
                self.metrics.log_step(self.step, breakdown, lr, k)
            else:
                self.metrics.log({'step': self.step, 'total': float(loss), 'lr': lr, 'k': k})
        self.step += 1
        if self.schedule is not None:
            self.schedule.advance()
        return float(loss.detach())

    def _log_skip(self, k: int, reason: str) -> None:
        self.optimizer.zero_grad(set_to_none=True)
        if self.metrics is not None:
            self.metrics.log_skip(self.step, k, reason)

    def train_epoch(self, batches: Iterable[Tuple[torch.Tensor, torch.Tensor]]) -> EpochMetrics:
        """
        One pass over (target [B,C,H,W], contexts [B,K_MAX,C,H,W]) batches

        Raises:
            TrainingAborted: more than max_skip_fraction of the batches were non-finite
        """
        self.model.train()
        stats = EpochMetrics(self.epoch)
        start = time.time()
        bar = tqdm(batches, desc=f"epoch {self.epoch}", leave=False, disable=not self.show_progress)
        for target, contexts in bar:
            k = sample_context_count(self.k_rng, min(K_MAX, contexts.size(1)))
            stats.batches += 1
            stats.k_counts[k] += 1
            loss = self.train_step(target, contexts, k)
            if loss is None:
                stats.skipped += 1
            else:
                stats.loss_sum += loss
                bar.set_postfix(loss=f"{loss:.4f}")
        stats.seconds = time.time() - start

        if stats.batches and stats.skipped > self.cfg.max_skip_fraction * stats.batches:
            logger.error(f"❌ {stats.skipped}/{stats.batches} batches skipped in epoch {self.epoch}")
            raise TrainingAborted(stats.skipped, stats.batches, self.epoch)
        if self.metrics is not None:
            self.metrics.log({'epoch_summary': stats.as_record()})
        self.epoch += 1
        return stats

    def training_state(self, extra: Optional[Dict] = None) -> Dict:
        return {
            'epoch': self.epoch,
            'step': self.step,
            'total_steps': self.total_steps,
            'optimizer': self.optimizer.state_dict(),
            'schedule': self.schedule.state_dict() if self.schedule is not None else None,
            **(extra or {}),
        }

    def fit(self, loader: DataLoader, epochs: int, checkpoint_path: Optional[str] = None,
            state_extra: Optional[Dict] = None) -> List[EpochMetrics]:
        """Run `epochs` epochs; the stream dataset is re-seeded per epoch; checkpoint after each epoch"""
        history = []
        for _ in range(epochs):
            source = getattr(loader, 'dataset', None)
            if hasattr(source, 'set_epoch'):
                source.set_epoch(self.epoch)
            stats = self.train_epoch(loader)
            history.append(stats)
            logger.info(f"epoch {stats.epoch}: loss {stats.mean_loss:.4f}, "
                        f"{stats.skipped} skipped, K counts {stats.k_counts}, {stats.seconds:.0f}s")
            if checkpoint_path:
                save_checkpoint(self.model, checkpoint_path, self.training_state(state_extra))
        return history


# --- orchestration --------------------------------------------------------

@dataclass
class ArchitectureResult:
    architecture: str
    checkpoints: List[str] = field(default_factory=list)
    reports: List[EvalReport] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)
    aggregate: Optional[EvalReport] = None
    best: Optional[EvalReport] = None


def manifest_paths(cfg: TrainConfig, out_dir: str) -> Tuple[str, str, str]:
    """(data dir, train manifest, eval manifest); both splits must exist"""
    data_dir = cfg.resolved_data_dir(out_dir)
    train_manifest = os.path.join(data_dir, 'train', MANIFEST_NAME)
    eval_manifest = os.path.join(data_dir, 'eval', MANIFEST_NAME)
    for path in (train_manifest, eval_manifest):
        if not os.path.exists(path):
            raise ConfigError(f"Missing {path}; run the datagen subcommand first or set data_dir")
    return data_dir, train_manifest, eval_manifest


def make_train_loader(cfg: TrainConfig, data_dir: str, train_manifest: str, seed: int) -> DataLoader:
    augmenter = build_augmenter(cfg.dataset, data_dir, cfg.mask_config(), cfg.occlusion_config())
    dataset = FusionStreamDataset(train_manifest, augmenter, master_seed=seed, limit=cfg.train_limit or None)
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=generator,
                      num_workers=cfg.num_workers, persistent_workers=False)


def eval_dataset(cfg: TrainConfig, eval_manifest: str) -> Dataset:
    return FusionManifestDataset(eval_manifest, limit=cfg.eval_limit or None)


def evaluate_run(model: nn.Module, cfg: TrainConfig, architecture: str, dataset: Dataset, run_dir: str,
                 seed: int, chash: str) -> EvalReport:
    """Score one trained model and store report.json plus samples.npz next to its checkpoint"""
    report = evaluate_model(model, dataset, architecture, cfg.dataset, cfg.n_importance_samples,
                            cfg.n_mse_samples or None, cfg.eval_batch_size, device=cfg.device, seed=seed,
                            config_hash_value=chash)
    with open(os.path.join(run_dir, REPORT_NAME), 'w', encoding='utf-8') as f:
        f.write(report.to_json())
    write_samples_npz(model, dataset, os.path.join(run_dir, SAMPLES_NAME), cfg.grid_items, cfg.grid_samples,
                      device=cfg.device, seed=seed)
    return report


def train_architecture(cfg: TrainConfig, architecture: str, out_dir: str, data_paths: Tuple[str, str, str],
                       baseline_specs: Dict[str, BaselineSpec], evaluate: bool = True,
                       show_progress: bool = True) -> ArchitectureResult:
    """cfg.runs independent runs of one architecture; failed runs are logged and left out"""
    data_dir, train_manifest, eval_manifest = data_paths
    chash = config_hash({**cfg.to_dict(), 'architecture': architecture})
    result = ArchitectureResult(architecture)
    test_set = eval_dataset(cfg, eval_manifest) if evaluate else None

    for run_idx in range(cfg.runs):
        seed = cfg.seed + run_idx
        run_dir = os.path.join(out_dir, 'runs', arch_dirname(architecture), f"run{run_idx}")
        os.makedirs(run_dir, exist_ok=True)
        run_id = results_db.record_run_started(cfg.to_dict(), chash, architecture, run_idx, seed)
        try:
            torch.manual_seed(seed)
            model = build_model(architecture, cfg, baseline_specs).to(cfg.device)
            loader = make_train_loader(cfg, data_dir, train_manifest, seed)
            with MetricsLogger(run_dir, tags={'architecture': architecture, 'run': run_idx}) as metrics:
                trainer = Trainer(model, cfg, cfg.epochs * len(loader), seed, metrics, show_progress)
                checkpoint = os.path.join(run_dir, CHECKPOINT_NAME)
                trainer.fit(loader, cfg.epochs, checkpoint,
                            {'seed': seed, 'run_idx': run_idx, 'architecture': architecture, 'config_hash': chash})
            result.checkpoints.append(checkpoint)
            if evaluate:
                report = evaluate_run(model, cfg, architecture, test_set, run_dir, seed, chash)
                result.reports.append(report)
                results_db.save_eval_report(run_id, report)
            results_db.record_run_finished(run_id, 'finished')
            logger.info(f"✅ {architecture} run {run_idx} finished")
        except (TrainingAborted, NonFiniteLikelihoodError) as e:
            logger.error(f"❌ {architecture} run {run_idx} failed: {e}")
            result.failures.append(f"run{run_idx}: {e}")
            results_db.record_run_finished(run_id, 'failed', str(e))

    if result.reports:
        aggregate, best = aggregate_runs(result.reports)
        if result.failures:
            aggregate.annotations.append(f"{len(result.reports)} of {cfg.runs} runs succeeded")
        result.aggregate, result.best = aggregate, best
    return result


def write_aggregate(result: ArchitectureResult, reports_dir: str) -> None:
    if result.aggregate is None:
        return
    os.makedirs(reports_dir, exist_ok=True)
    name = arch_dirname(result.architecture)
    with open(os.path.join(reports_dir, f"{name}.json"), 'w', encoding='utf-8') as f:
        f.write(result.aggregate.to_json())
    with open(os.path.join(reports_dir, f"{name}_best.json"), 'w', encoding='utf-8') as f:
        f.write(result.best.to_json())


def run_experiment(cfg: TrainConfig, out_dir: str, evaluate: bool = True,
                   show_progress: bool = True) -> Dict[str, ArchitectureResult]:
    """
    Train (and evaluate) every configured architecture cfg.runs times

    Args:
        cfg: Resolved configuration
        out_dir: Root of all outputs
        evaluate: Score each run on the eval split after training
        show_progress: Show tqdm bars

    Returns:
        Results per architecture, aggregates written to <out>/reports
    """
    data_paths = manifest_paths(cfg, out_dir)
    write_resolved_config(cfg, out_dir)
    results_db.init_database(fallback_dir=out_dir)
    architectures = cfg.architecture_list()
    baseline_specs = match_baselines(cfg, architectures)
    for kind, spec in baseline_specs.items():
        logger.info(f"{kind}: base_width={spec.base_width}, latent_channels={spec.latent_channels}")
    if baseline_specs:
        with open(os.path.join(out_dir, BASELINE_SPECS_NAME), 'w', encoding='utf-8') as f:
            json.dump({kind: spec.to_dict() for kind, spec in baseline_specs.items()}, f, indent=2)

    results = {}
    for architecture in architectures:
        result = train_architecture(cfg, architecture, out_dir, data_paths, baseline_specs, evaluate, show_progress)
        if not result.checkpoints:
            logger.error(f"❌ Every {architecture} run failed")
        write_aggregate(result, os.path.join(out_dir, 'reports'))
        results[architecture] = result

    if not any(r.checkpoints for r in results.values()):
        raise FusionLabError("all training runs failed")
    return results


def ablation_cells(study: str, modes: Optional[Sequence[str]] = None,
                   variants: Optional[Sequence[str]] = None) -> List[Tuple[str, str]]:
    """(prior mode, posterior variant) pairs of a study, optionally narrowed"""
    if study not in ABLATION_STUDIES:
        raise ConfigError(f"Unknown ablation study: {study}. Expected one of {', '.join(ABLATION_STUDIES)}")
    study_modes, study_variants = ABLATION_STUDIES[study]
    modes = [m for m in study_modes if not modes or m in modes]
    variants = [v for v in study_variants if not variants or v in variants]
    if not modes or not variants:
        raise ConfigError(f"No {study} ablation cell left after filtering")
    return [(m, v) for m in modes for v in variants]


def ablation_label(study: str, mode: str, variant: str) -> str:
    return variant if study == 'posterior' else mode


def ablation_cell_config(cfg: TrainConfig, mode: str, variant: str) -> TrainConfig:
    return replace(cfg, prior_mode=mode, posterior_variant=variant, architectures='FusionVAE').validate()


def ablation_cell_dir(out_dir: str, mode: str, variant: str) -> str:
    safe_variant = variant.replace('(', '_').replace(')', '').replace(',', '')
    return os.path.join(out_dir, 'ablation', f"{mode}_{safe_variant}")


def evaluate_checkpoint(path: str, cfg: TrainConfig, dataset: Dataset) -> EvalReport:
    """Re-score a saved run; report.json and samples.npz land next to the checkpoint"""
    model, state = load_checkpoint(path, cfg.device)
    architecture = model_kind(model)
    seed = state.get('seed', cfg.seed)
    chash = state.get('config_hash') or config_hash({**cfg.to_dict(), 'architecture': architecture})
    return evaluate_run(model, cfg, architecture, dataset, os.path.dirname(os.path.abspath(path)), seed, chash)


def find_checkpoints(root: str) -> List[str]:
    found = []
    for dirpath, _, filenames in os.walk(root):
        if CHECKPOINT_NAME in filenames:
            found.append(os.path.join(dirpath, CHECKPOINT_NAME))
    return sorted(found)


def run_ablation(cfg: TrainConfig, out_dir: str, study: str, train: bool = False,
                 modes: Optional[Sequence[str]] = None, variants: Optional[Sequence[str]] = None,
                 show_progress: bool = True) -> Dict[str, EvalReport]:
    """
    Evaluate the FusionVAE grid of one ablation study

    The posterior study fixes MaxAggAdd and varies the posterior; the
    aggregation study fixes q(y) and varies the six prior modes. Without
    `train` the cells are scored from checkpoints already under <out>/ablation.

    Returns:
        Aggregated report per row label
    """
    data_paths = manifest_paths(cfg, out_dir)
    results_db.init_database(fallback_dir=out_dir)
    reports = {}
    for mode, variant in ablation_cells(study, modes, variants):
        cell_cfg = ablation_cell_config(cfg, mode, variant)
        cell_dir = ablation_cell_dir(out_dir, mode, variant)
        label = ablation_label(study, mode, variant)
        if train:
            write_resolved_config(cell_cfg, cell_dir)
            result = train_architecture(cell_cfg, 'FusionVAE', cell_dir, data_paths, {}, True, show_progress)
            cell_reports = result.reports
        else:
            checkpoints = find_checkpoints(cell_dir)
            if not checkpoints:
                raise ReportError(f"No checkpoints for {label} under {cell_dir}; pass --train to train them")
            test_set = eval_dataset(cell_cfg, data_paths[2])
            cell_reports = [evaluate_checkpoint(p, cell_cfg, test_set) for p in checkpoints]
        if not cell_reports:
            logger.error(f"❌ No surviving runs for ablation cell {label}")
            continue
        reports[label], _ = aggregate_runs(cell_reports)
        logger.info(f"✅ Ablation cell {label} done ({len(cell_reports)} runs)")
    return reports
