"""
Decoder output distributions.

Bernoulli logits (FusionMNIST, FusionT-LESS) and the discretized logistic
mixture over 256 intensity levels (FusionCelebA). Both score a batch of
targets in [0, 1] and render images through their per-pixel mean.
"""
import logging
from typing import Dict, Optional

import torch
import torch.nn.functional as F

from errors import ConfigError, NonFiniteLikelihoodError, ShapeMismatchError

logger = logging.getLogger(__name__)

NUM_BITS = 8
DEFAULT_NUM_MIX = 10
LIKELIHOOD_KINDS = ('bernoulli', 'logistic_mixture')


def output_channels(kind: str, image_channels: int, num_mix: int = DEFAULT_NUM_MIX) -> int:
    """Channel multiplicity of the decoder head for a likelihood kind"""
    if kind == 'bernoulli':
        return image_channels
    if kind == 'logistic_mixture':
        if image_channels == 1:
            return 3 * num_mix
        if image_channels == 3:
            return 10 * num_mix
        raise ConfigError(f"logistic mixture supports 1 or 3 channels, got {image_channels}")
    raise ConfigError(f"Unknown likelihood kind: {kind}")


def _check_finite(kind: str, params: torch.Tensor) -> None:
    if torch.isfinite(params).all():
        return
    diagnostics: Dict = {
        'kind': kind,
        'nan': int(torch.isnan(params).sum()),
        'inf': int(torch.isinf(params).sum()),
        'shape': tuple(params.shape),
    }
    raise NonFiniteLikelihoodError("Non-finite likelihood parameters", diagnostics)


class LikelihoodParams:
    """Base class; subclasses hold the raw head output and know how to score it"""
    kind = 'base'

    def __init__(self, params: torch.Tensor, image_channels: int):
        _check_finite(self.kind, params)
        self.params = params
        self.image_channels = image_channels

    def log_prob(self, y: torch.Tensor) -> torch.Tensor:
        """Per-sample log-likelihood in nats, summed over all pixels -> [B]"""
        raise NotImplementedError

    def mean(self) -> torch.Tensor:
        raise NotImplementedError

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        raise NotImplementedError

    def _check_target(self, y: torch.Tensor) -> None:
        if y.dim() != 4 or y.size(1) != self.image_channels or y.shape[-2:] != self.params.shape[-2:]:
            raise ShapeMismatchError(
                f"target shape {tuple(y.shape)} does not match likelihood over "
                f"{self.image_channels}x{tuple(self.params.shape[-2:])}"
            )


class BernoulliLikelihood(LikelihoodParams):
    kind = 'bernoulli'

    def log_prob(self, y: torch.Tensor) -> torch.Tensor:
        self._check_target(y)
        nll = F.binary_cross_entropy_with_logits(self.params, y, reduction='none')
        return -nll.flatten(1).sum(dim=1)

    def mean(self) -> torch.Tensor:
        return torch.sigmoid(self.params)

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return torch.bernoulli(torch.sigmoid(self.params), generator=generator)


class DiscretizedLogisticMixture(LikelihoodParams):
    """
    M-component logistic mixture discretized to 2^bits bins on [-1, 1].
    RGB channels are coupled autoregressively through tanh coefficients.
    """
    kind = 'logistic_mixture'

    def __init__(self, params: torch.Tensor, image_channels: int, num_mix: int = DEFAULT_NUM_MIX,
                 num_bits: int = NUM_BITS):
        super().__init__(params, image_channels)
        expected = output_channels(self.kind, image_channels, num_mix)
        if params.size(1) != expected:
            raise ShapeMismatchError(f"expected {expected} mixture channels, got {params.size(1)}")

        B, _, H, W = params.shape
        per_channel = 3 * num_mix if image_channels == 3 else 2 * num_mix
        self.num_mix = num_mix
        self.max_val = 2.0 ** num_bits - 1
        self.logit_probs = params[:, :num_mix]                                        # B, M, H, W
        rest = params[:, num_mix:].reshape(B, image_channels, per_channel, H, W)
        self.means = rest[:, :, :num_mix]                                             # B, C, M, H, W
        self.log_scales = torch.clamp(rest[:, :, num_mix:2 * num_mix], min=-7.0)      # B, C, M, H, W
        if image_channels == 3:
            self.coeffs = torch.tanh(rest[:, :, 2 * num_mix:3 * num_mix])             # B, 3, M, H, W
        else:
            self.coeffs = None

    def quantize(self, y: torch.Tensor) -> torch.Tensor:
        return torch.round(y.clamp(0.0, 1.0) * self.max_val) / self.max_val

    def _coupled_means(self, x: torch.Tensor) -> torch.Tensor:
        """Component means after channel coupling; x is [B, C, M, H, W] in [-1, 1]"""
        if self.coeffs is None:
            return self.means
        mean_r = self.means[:, 0]
        mean_g = self.means[:, 1] + self.coeffs[:, 0] * x[:, 0]
        mean_b = self.means[:, 2] + self.coeffs[:, 1] * x[:, 0] + self.coeffs[:, 2] * x[:, 1]
        return torch.stack([mean_r, mean_g, mean_b], dim=1)

    def log_prob_per_pixel(self, y: torch.Tensor) -> torch.Tensor:
        """Log-probability of each quantized pixel (channels joint) -> [B, H, W]"""
        self._check_target(y)
        x = 2.0 * self.quantize(y) - 1.0
        x = x.unsqueeze(2).expand(-1, -1, self.num_mix, -1, -1)                      # B, C, M, H, W
        centered = x - self._coupled_means(x)

        inv_stdv = torch.exp(-self.log_scales)
        plus_in = inv_stdv * (centered + 1.0 / self.max_val)
        min_in = inv_stdv * (centered - 1.0 / self.max_val)
        cdf_delta = torch.sigmoid(plus_in) - torch.sigmoid(min_in)
        log_cdf_plus = plus_in - F.softplus(plus_in)
        log_one_minus_cdf_min = -F.softplus(min_in)
        mid_in = inv_stdv * centered
        log_pdf_mid = mid_in - self.log_scales - 2.0 * F.softplus(mid_in)

        log_prob_mid = torch.where(
            cdf_delta > 1e-5,
            torch.log(torch.clamp(cdf_delta, min=1e-12)),
            log_pdf_mid - torch.log(torch.tensor(self.max_val / 2, dtype=x.dtype, device=x.device)),
        )
        # edge bins take the full tail mass; 0.999 keeps level 254 (0.992) an interior bin
        log_probs = torch.where(
            x < -0.999, log_cdf_plus,
            torch.where(x > 0.999, log_one_minus_cdf_min, log_prob_mid),
        )
        log_probs = log_probs.sum(dim=1) + F.log_softmax(self.logit_probs, dim=1)    # B, M, H, W
        return torch.logsumexp(log_probs, dim=1)

    def log_prob(self, y: torch.Tensor) -> torch.Tensor:
        return self.log_prob_per_pixel(y).flatten(1).sum(dim=1)

    def mean(self) -> torch.Tensor:
        weights = torch.softmax(self.logit_probs, dim=1).unsqueeze(1)                # B, 1, M, H, W
        component = self.means.clamp(-1.0, 1.0)
        if self.coeffs is not None:
            component = self._coupled_means(component).clamp(-1.0, 1.0)
        x = (weights * component).sum(dim=2)
        return x / 2.0 + 0.5

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        u = torch.rand(self.logit_probs.shape, generator=generator, device=self.params.device,
                       dtype=self.params.dtype).clamp(1e-5, 1.0 - 1e-5)
        gumbel = -torch.log(-torch.log(u))
        sel = F.one_hot(torch.argmax(self.logit_probs + gumbel, dim=1), self.num_mix)
        sel = sel.permute(0, 3, 1, 2).unsqueeze(1).to(self.params.dtype)             # B, 1, M, H, W

        means = (self.means * sel).sum(dim=2)
        log_scales = (self.log_scales * sel).sum(dim=2)
        u = torch.rand(means.shape, generator=generator, device=means.device,
                       dtype=means.dtype).clamp(1e-5, 1.0 - 1e-5)
        x = means + torch.exp(log_scales) * torch.logit(u)
        if self.coeffs is None:
            return x.clamp(-1.0, 1.0) / 2.0 + 0.5

        coeffs = (self.coeffs * sel).sum(dim=2)
        x0 = x[:, 0].clamp(-1.0, 1.0)
        x1 = (x[:, 1] + coeffs[:, 0] * x0).clamp(-1.0, 1.0)
        x2 = (x[:, 2] + coeffs[:, 1] * x0 + coeffs[:, 2] * x1).clamp(-1.0, 1.0)
        return torch.stack([x0, x1, x2], dim=1) / 2.0 + 0.5


def make_likelihood(kind: str, params: torch.Tensor, image_channels: int,
                    num_mix: int = DEFAULT_NUM_MIX) -> LikelihoodParams:
    if kind == 'bernoulli':
        return BernoulliLikelihood(params, image_channels)
    if kind == 'logistic_mixture':
        return DiscretizedLogisticMixture(params, image_channels, num_mix)
    raise ConfigError(f"Unknown likelihood kind: {kind}")
