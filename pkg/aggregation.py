"""
Permutation-invariant fusion of per-context feature tensors.

Three rules are supported: pixel-wise mean, pixel-wise max and Bayesian
aggregation of factorized Gaussians (iterative gain form and closed
precision form). None of them invents a neutral element for an empty
set; they raise EmptyContextSet and the caller takes the no-context path.
"""
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import torch

from errors import EmptyContextSet, InvalidVarianceError, ShapeMismatchError

LOGVAR_CLAMP = 8.0


@dataclass
class GaussianFeature:
    """Per-pixel factorized Gaussian: mean and strictly positive variance of equal shape"""
    mu: torch.Tensor
    var: torch.Tensor

    @classmethod
    def from_logvar(cls, mu: torch.Tensor, logvar: torch.Tensor, clamp: float = LOGVAR_CLAMP) -> "GaussianFeature":
        return cls(mu, torch.exp(torch.clamp(logvar, -clamp, clamp)))

    @classmethod
    def from_params(cls, params: torch.Tensor) -> "GaussianFeature":
        """Split a head output [B, 2C, H, W] into mean and log-variance halves"""
        mu, logvar = torch.chunk(params, 2, dim=1)
        return cls.from_logvar(mu, logvar)

    @classmethod
    def standard_normal(cls, like: torch.Tensor) -> "GaussianFeature":
        return cls(torch.zeros_like(like), torch.ones_like(like))

    @property
    def std(self) -> torch.Tensor:
        return torch.sqrt(self.var)

    @property
    def logvar(self) -> torch.Tensor:
        return torch.log(self.var)

    def validate(self) -> "GaussianFeature":
        if self.mu.shape != self.var.shape:
            raise ShapeMismatchError(f"mean shape {tuple(self.mu.shape)} != variance shape {tuple(self.var.shape)}")
        if not bool(torch.all(self.var > 0)):
            raise InvalidVarianceError("variance must be strictly positive everywhere")
        return self

    def rsample(self, eps: Optional[torch.Tensor] = None, temperature: float = 1.0,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Reparameterized draw mu + temperature * sigma * eps"""
        if eps is None:
            eps = torch.randn(self.mu.shape, generator=generator, device=self.mu.device, dtype=self.mu.dtype)
        return self.mu + temperature * self.std * eps

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        return -0.5 * (torch.log(2 * math.pi * self.var) + (z - self.mu) ** 2 / self.var)


def _check_features(features: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    features = list(features)
    if not features:
        raise EmptyContextSet("cannot aggregate an empty feature set")
    shape = features[0].shape
    for f in features[1:]:
        if f.shape != shape:
            raise ShapeMismatchError(f"feature shapes differ: {tuple(shape)} vs {tuple(f.shape)}")
    return features


def mean_agg(features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Pixel-wise average of a non-empty feature set"""
    features = _check_features(features)
    if len(features) == 1:
        return features[0]
    return torch.stack(features, dim=0).mean(dim=0)


def max_agg(features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Pixel-wise maximum of a non-empty feature set"""
    features = _check_features(features)
    if len(features) == 1:
        return features[0]
    return torch.stack(features, dim=0).amax(dim=0)


def _check_gaussians(prior: Optional[GaussianFeature], obs: Sequence[GaussianFeature]) -> None:
    if prior is not None:
        prior.validate()
    for g in obs:
        g.validate()
        if prior is not None and g.mu.shape != prior.mu.shape:
            raise ShapeMismatchError(f"observation shape {tuple(g.mu.shape)} != prior shape {tuple(prior.mu.shape)}")


def bayes_agg_iter(prior: Optional[GaussianFeature], obs: Sequence[GaussianFeature]) -> GaussianFeature:
    """Sequential Bayes-rule fusion with gain q_i = var_{i-1} / (var_{i-1} + var_i).

    Without an explicit prior the first observation is the initial state.
    """
    obs = list(obs)
    _check_gaussians(prior, obs)
    if prior is None:
        if not obs:
            raise EmptyContextSet("Bayesian aggregation needs a prior or at least one observation")
        prior, obs = obs[0], obs[1:]

    mu, var = prior.mu, prior.var
    for g in obs:
        gain = var / (var + g.var)
        # the right-hand mean is the observation, the left-hand one the running estimate
        mu = mu + gain * (g.mu - mu)
        var = var * (1 - gain)
    return GaussianFeature(mu, var)


def bayes_agg_closed(prior: Optional[GaussianFeature], obs: Sequence[GaussianFeature]) -> GaussianFeature:
    """Precision-sum form of the same posterior (standard Gaussian conditioning)"""
    obs = list(obs)
    _check_gaussians(prior, obs)
    members = ([prior] if prior is not None else []) + obs
    if not members:
        raise EmptyContextSet("Bayesian aggregation needs a prior or at least one observation")

    precision = torch.stack([1.0 / g.var for g in members], dim=0).sum(dim=0)
    weighted = torch.stack([g.mu / g.var for g in members], dim=0).sum(dim=0)
    var = 1.0 / precision
    return GaussianFeature(var * weighted, var)


FEATURE_RULES: Dict[str, Callable[[Sequence[torch.Tensor]], torch.Tensor]] = {
    'max': max_agg,
    'mean': mean_agg,
}


def aggregate_features(rule: str, features: Sequence[torch.Tensor]) -> torch.Tensor:
    if rule not in FEATURE_RULES:
        raise ValueError(f"Unknown aggregation rule: {rule}")
    return FEATURE_RULES[rule](features)
