"""
Training objective: reconstruction log-likelihood minus beta/alpha weighted
per-group KL terms, plus the warm-up and balancing schedules.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from aggregation import GaussianFeature
from errors import ConfigError, ShapeMismatchError
from likelihoods import LikelihoodParams

logger = logging.getLogger(__name__)

ALPHA_MODES = ('uniform', 'size-weighted', 'ema-balanced')
KL_EMA_DECAY = 0.99


@dataclass
class LossBreakdown:
    """Batch-mean quantities in nats per sample"""
    recon_ll: torch.Tensor
    kl_per_group: List[torch.Tensor]
    beta: float
    alpha: List[float]
    total: torch.Tensor

    @property
    def kl_total(self) -> float:
        return float(sum(float(kl) for kl in self.kl_per_group))

    def as_record(self) -> Dict:
        return {
            'beta': float(self.beta),
            'kl': [float(kl) for kl in self.kl_per_group],
            'recon': float(self.recon_ll),
            'total': float(self.total),
        }


def gaussian_kl_elementwise(q: GaussianFeature, p: GaussianFeature) -> torch.Tensor:
    """KL(N(mu_q, var_q) || N(mu_p, var_p)) per element"""
    q.validate()
    p.validate()
    if q.mu.shape != p.mu.shape:
        raise ShapeMismatchError(f"posterior shape {tuple(q.mu.shape)} != prior shape {tuple(p.mu.shape)}")
    return 0.5 * (torch.log(p.var) - torch.log(q.var)) + (q.var + (q.mu - p.mu) ** 2) / (2.0 * p.var) - 0.5


def gaussian_kl(q: GaussianFeature, p: GaussianFeature) -> torch.Tensor:
    """KL of one latent group, summed over everything but the batch dim -> [B]"""
    return gaussian_kl_elementwise(q, p).flatten(1).sum(dim=1)


def recon_log_likelihood(params: LikelihoodParams, y: torch.Tensor) -> torch.Tensor:
    """Sum over pixels of log p(y | params) -> [B]"""
    return params.log_prob(y)


def beta_schedule(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        raise ConfigError("warmup_steps must be positive")
    return min(1.0, max(step, 0) / warmup_steps)


def alpha_balance(kl_ema: Sequence[float], group_sizes: Sequence[int]) -> List[float]:
    """alpha_l proportional to size_l * ema_l, normalized to sum to L; all-zero EMAs give uniform weights"""
    if len(kl_ema) != len(group_sizes):
        raise ShapeMismatchError(f"{len(kl_ema)} KL averages for {len(group_sizes)} groups")
    weights = np.asarray(kl_ema, dtype=np.float64) * np.asarray(group_sizes, dtype=np.float64)
    weights = np.clip(weights, 0.0, None)
    total = weights.sum()
    num_groups = len(weights)
    if total <= 0 or not np.isfinite(total):
        return [1.0] * num_groups
    return list(weights / total * num_groups)


@dataclass
class ScheduleState:
    group_sizes: List[int]
    warmup_steps: int
    step: int = 0
    alpha_mode: str = 'ema-balanced'
    ema_decay: float = KL_EMA_DECAY
    kl_ema: Optional[List[float]] = field(default=None)

    def __post_init__(self):
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"Unknown alpha mode: {self.alpha_mode}")
        if self.warmup_steps <= 0:
            raise ConfigError("warmup_steps must be positive")

    @property
    def in_warmup(self) -> bool:
        return self.step < self.warmup_steps

    def beta(self) -> float:
        return beta_schedule(self.step, self.warmup_steps)

    def alpha(self) -> List[float]:
        num_groups = len(self.group_sizes)
        # balancing only acts during warm-up
        if not self.in_warmup or self.alpha_mode == 'uniform':
            return [1.0] * num_groups
        if self.alpha_mode == 'size-weighted' or self.kl_ema is None:
            return alpha_balance([1.0] * num_groups, self.group_sizes)
        return alpha_balance(self.kl_ema, self.group_sizes)

    def update(self, kl_values: Sequence[float]) -> None:
        values = [float(v) for v in kl_values]
        if self.kl_ema is None:
            self.kl_ema = values
        else:
            self.kl_ema = [self.ema_decay * old + (1 - self.ema_decay) * new for old, new in zip(self.kl_ema, values)]

    def advance(self) -> None:
        self.step += 1

    def state_dict(self) -> Dict:
        return {'step': self.step, 'warmup_steps': self.warmup_steps, 'alpha_mode': self.alpha_mode,
                'kl_ema': self.kl_ema}

    def load_state_dict(self, state: Dict) -> None:
        self.step = state['step']
        self.warmup_steps = state['warmup_steps']
        self.alpha_mode = state['alpha_mode']
        self.kl_ema = state['kl_ema']


def fusionvae_elbo(recon_ll: torch.Tensor, kl_per_group: Sequence[torch.Tensor],
                   schedule: Optional[ScheduleState] = None, beta: Optional[float] = None,
                   alpha: Optional[Sequence[float]] = None, free_bits: float = 0.0) -> LossBreakdown:
    """
    total = -recon + beta * sum_l alpha_l * KL_l on batch means.

    beta/alpha come from the schedule unless given explicitly. A positive
    free_bits floors each group's KL (in nats) inside the total only.
    """
    kl_per_group = list(kl_per_group)
    if not kl_per_group:
        raise ShapeMismatchError("at least one latent group is required")
    if beta is None:
        beta = schedule.beta() if schedule is not None else 1.0
    if alpha is None:
        alpha = schedule.alpha() if schedule is not None else [1.0] * len(kl_per_group)
    alpha = list(alpha)
    if len(alpha) != len(kl_per_group):
        raise ShapeMismatchError(f"{len(alpha)} alpha weights for {len(kl_per_group)} KL terms")

    recon = recon_ll.mean()
    kl_means = [kl.mean() for kl in kl_per_group]
    penalty = torch.zeros_like(recon)
    for a, kl in zip(alpha, kl_means):
        term = torch.clamp(kl, min=free_bits) if free_bits > 0 else kl
        penalty = penalty + a * term
    total = -recon + beta * penalty
    return LossBreakdown(recon, kl_means, float(beta), alpha, total)


def compute_loss(output, target: torch.Tensor, schedule: Optional[ScheduleState] = None,
                 free_bits: float = 0.0, beta: Optional[float] = None,
                 alpha: Optional[Sequence[float]] = None) -> LossBreakdown:
    """Loss of a forward pass that carries a likelihood and per-group priors/posteriors"""
    latents = output.latents
    if len(latents.posteriors) != len(latents.priors):
        raise ShapeMismatchError("every latent group needs a prior and a posterior")
    recon = recon_log_likelihood(output.likelihood, target)
    kls = [gaussian_kl(q, p) for q, p in zip(latents.posteriors, latents.priors)]
    breakdown = fusionvae_elbo(recon, kls, schedule, beta=beta, alpha=alpha, free_bits=free_bits)
    if schedule is not None:
        schedule.update([float(kl.detach()) for kl in breakdown.kl_per_group])
    return breakdown
