"""
Comparison architectures: a single-latent CVAE and a deterministic FCN, each
with an optional "+S" variant that max-fuses aggregated encoder features into
the decoder at every resolution. All of them share one encoder across
contexts and pixel-wise max-aggregate before the bottleneck.
"""
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from aggregation import GaussianFeature, max_agg
from errors import ConfigError, ShapeMismatchError
from fusion_vae import FusionOutput, LatentState
from likelihoods import (DEFAULT_NUM_MIX, LikelihoodParams, make_likelihood,
                         output_channels)
from residual_cells import (DecoderCell, DownCell, EncoderCell, UpCell,
                            count_parameters)

logger = logging.getLogger(__name__)

BASELINE_KINDS = ('CVAE', 'CVAE+S', 'FCN', 'FCN+S')
PARAMETER_TOLERANCE = 0.10


@dataclass
class BaselineSpec:
    kind: str
    base_width: int
    latent_channels: int = 16
    latent_spatial: int = 8
    image_channels: int = 1
    image_size: int = 32
    likelihood: str = 'bernoulli'
    num_mix: int = DEFAULT_NUM_MIX

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"Unknown baseline kind: {self.kind}")
        ratio = self.image_size / self.latent_spatial
        if ratio < 1 or not float(math.log2(ratio)).is_integer():
            raise ConfigError(f"latent size {self.latent_spatial} does not divide image size {self.image_size}")

    @property
    def is_vae(self) -> bool:
        return self.kind.startswith('CVAE')

    @property
    def uses_skips(self) -> bool:
        return self.kind.endswith('+S')

    @property
    def num_levels(self) -> int:
        return int(round(math.log2(self.image_size // self.latent_spatial)))

    def to_dict(self) -> Dict:
        return asdict(self)


def skip_fuse(encoder_feature: Optional[torch.Tensor], decoder_feature: torch.Tensor) -> torch.Tensor:
    """Elementwise max of the aggregated encoder feature and the decoder feature"""
    if encoder_feature is None:
        return decoder_feature
    if encoder_feature.shape != decoder_feature.shape:
        raise ShapeMismatchError(
            f"skip shapes differ: {tuple(encoder_feature.shape)} vs {tuple(decoder_feature.shape)}"
        )
    return torch.maximum(encoder_feature, decoder_feature)


class SkipEncoder(nn.Module):
    """Residual encoder returning per-resolution skip features and the bottleneck"""

    def __init__(self, spec: BaselineSpec):
        super().__init__()
        width = spec.base_width
        self.stem = nn.Conv2d(spec.image_channels, width, 3, padding=1)
        self.cells = nn.ModuleList()
        self.downs = nn.ModuleList()
        for _ in range(spec.num_levels):
            self.cells.append(EncoderCell(width))
            self.downs.append(DownCell(width, 2 * width))
            width *= 2
        self.bottleneck = EncoderCell(width)
        self.out_width = width

    def forward(self, x: torch.Tensor) -> Tuple[List[torch.Tensor], torch.Tensor]:
        s = self.stem(2.0 * x - 1.0)
        skips = []
        for cell, down in zip(self.cells, self.downs):
            s = cell(s)
            skips.append(s)
            s = down(s)
        return skips, self.bottleneck(s)


class _ContextFusionNet(nn.Module):
    """Shared pieces: encoder over contexts, max aggregation, learned constant for K=0, decoder tower"""

    def __init__(self, spec: BaselineSpec, bottleneck_extra: int = 0):
        super().__init__()
        self.spec = spec
        self.encoder = SkipEncoder(spec)
        width = self.encoder.out_width
        size = spec.latent_spatial
        self.empty_context = nn.Parameter(torch.zeros(width, size, size))
        self.decoder_in = nn.Conv2d(width + bottleneck_extra, width, 1)
        self.ups = nn.ModuleList()
        self.dec_cells = nn.ModuleList()
        for _ in range(spec.num_levels):
            self.ups.append(UpCell(width, width // 2))
            width //= 2
            self.dec_cells.append(DecoderCell(width))
        self.out_width = width

    def _check_image(self, x: torch.Tensor) -> None:
        expected = (self.spec.image_channels, self.spec.image_size, self.spec.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeMismatchError(f"image shape {tuple(x.shape)} does not match {expected}")

    def encode_contexts(self, contexts: Sequence[torch.Tensor],
                        batch_size: int) -> Tuple[Optional[List[torch.Tensor]], torch.Tensor]:
        """Max-aggregated skips (None for K=0) and bottleneck (learned constant for K=0)"""
        contexts = list(contexts)
        if not contexts:
            return None, self.empty_context.unsqueeze(0).expand(batch_size, -1, -1, -1)
        for x in contexts:
            self._check_image(x)
        k = len(contexts)
        skips, bottleneck = self.encoder(torch.cat(contexts, dim=0))
        fused_skips = [max_agg(torch.chunk(s, k, dim=0)) for s in skips]
        return fused_skips, max_agg(torch.chunk(bottleneck, k, dim=0))

    def decode(self, s: torch.Tensor, skips: Optional[List[torch.Tensor]]) -> torch.Tensor:
        s = self.decoder_in(s)
        for level, (up, cell) in enumerate(zip(self.ups, self.dec_cells)):
            s = cell(up(s))
            if self.spec.uses_skips and skips is not None:
                s = skip_fuse(skips[-1 - level], s)
        return s


class CVAEBaseline(_ContextFusionNet):
    def __init__(self, spec: BaselineSpec):
        """
        Conditional VAE with one latent level at the bottleneck

        Args:
            spec: Widths, latent size and likelihood; kind must be CVAE or CVAE+S
        """
        super().__init__(spec, bottleneck_extra=spec.latent_channels)
        width = self.encoder.out_width
        self.prior_head = nn.Sequential(nn.ELU(), nn.Conv2d(width, 2 * spec.latent_channels, 3, padding=1))
        self.posterior_head = nn.Conv2d(width, 2 * spec.latent_channels, 3, padding=1)
        self.output_head = nn.Sequential(
            nn.ELU(),
            nn.Conv2d(self.out_width, output_channels(spec.likelihood, spec.image_channels, spec.num_mix), 3, padding=1),
        )

    def _prior(self, has_contexts: bool, bottleneck: torch.Tensor) -> GaussianFeature:
        if not has_contexts:
            size = self.spec.latent_spatial
            like = bottleneck.new_zeros(bottleneck.size(0), self.spec.latent_channels, size, size)
            return GaussianFeature.standard_normal(like)
        return GaussianFeature.from_params(self.prior_head(bottleneck))

    def _decode_z(self, skips, bottleneck: torch.Tensor, z: torch.Tensor) -> LikelihoodParams:
        s = self.decode(torch.cat([bottleneck, z], dim=1), skips)
        return make_likelihood(self.spec.likelihood, self.output_head(s), self.spec.image_channels, self.spec.num_mix)

    def forward(self, contexts: Sequence[torch.Tensor], target: torch.Tensor) -> FusionOutput:
        self._check_image(target)
        contexts = list(contexts)
        skips, bottleneck = self.encode_contexts(contexts, target.size(0))
        _, target_bottleneck = self.encoder(target)

        prior = self._prior(bool(contexts), bottleneck)
        feature = target_bottleneck + bottleneck if contexts else target_bottleneck
        posterior = GaussianFeature.from_params(self.posterior_head(feature))
        z = posterior.rsample()
        likelihood = self._decode_z(skips, bottleneck, z)
        return FusionOutput(likelihood, LatentState([prior], [posterior], [z]))

    @torch.no_grad()
    def sample(self, contexts: Sequence[torch.Tensor], n_samples: int = 1, temperature: float = 1.0,
               batch_size: Optional[int] = None) -> torch.Tensor:
        contexts = list(contexts)
        if batch_size is None:
            if not contexts:
                raise ValueError("batch_size is required when sampling without contexts")
            batch_size = contexts[0].size(0)
        skips, bottleneck = self.encode_contexts(contexts, batch_size)
        prior = self._prior(bool(contexts), bottleneck)
        images = []
        for _ in range(n_samples):
            z = prior.mu if temperature == 0 else prior.rsample(temperature=temperature)
            images.append(self._decode_z(skips, bottleneck, z).mean())
        return torch.stack(images, dim=0)

    @torch.no_grad()
    def reconstruct(self, contexts: Sequence[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
        return self.forward(contexts, target).likelihood.mean()

    @torch.no_grad()
    def importance_log_weights(self, contexts: Sequence[torch.Tensor], target: torch.Tensor,
                               n_samples: int) -> torch.Tensor:
        if n_samples < 1:
            raise ValueError("importance sampling needs S >= 1")
        weights = []
        for _ in range(n_samples):
            out = self.forward(contexts, target)
            prior, posterior, z = out.latents.priors[0], out.latents.posteriors[0], out.latents.z[0]
            log_w = out.likelihood.log_prob(target).double()
            log_w = log_w + (prior.log_prob(z) - posterior.log_prob(z)).double().flatten(1).sum(dim=1)
            weights.append(log_w)
        return torch.stack(weights, dim=0)


class FCNBaseline(_ContextFusionNet):
    def __init__(self, spec: BaselineSpec):
        """
        Deterministic fully convolutional fusion network trained with pixel MSE

        Args:
            spec: Widths and image shape; kind must be FCN or FCN+S
        """
        super().__init__(spec)
        self.output_head = nn.Sequential(
            nn.ELU(),
            nn.Conv2d(self.out_width, spec.image_channels, 3, padding=1),
        )

    def forward(self, contexts: Sequence[torch.Tensor], batch_size: Optional[int] = None) -> torch.Tensor:
        contexts = list(contexts)
        if batch_size is None:
            if not contexts:
                raise ValueError("batch_size is required without contexts")
            batch_size = contexts[0].size(0)
        skips, bottleneck = self.encode_contexts(contexts, batch_size)
        return torch.sigmoid(self.output_head(self.decode(bottleneck, skips)))

    def loss(self, contexts: Sequence[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
        self._check_image(target)
        return F.mse_loss(self.forward(contexts, target.size(0)), target)

    @torch.no_grad()
    def sample(self, contexts: Sequence[torch.Tensor], n_samples: int = 1, temperature: float = 1.0,
               batch_size: Optional[int] = None) -> torch.Tensor:
        """The prediction repeated n_samples times; temperature has no effect"""
        prediction = self.forward(contexts, batch_size)
        return prediction.unsqueeze(0).expand(n_samples, -1, -1, -1, -1).clone()

    @torch.no_grad()
    def reconstruct(self, contexts: Sequence[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
        return self.forward(contexts, target.size(0))


def cvae_forward(model: CVAEBaseline, contexts: Sequence[torch.Tensor],
                 target: Optional[torch.Tensor] = None, batch_size: Optional[int] = None):
    """Training pass with a target, or one prior sample rendered as likelihood params without"""
    if target is not None:
        return model(contexts, target)
    contexts = list(contexts)
    batch_size = batch_size or contexts[0].size(0)
    skips, bottleneck = model.encode_contexts(contexts, batch_size)
    prior = model._prior(bool(contexts), bottleneck)
    z = prior.rsample()
    return FusionOutput(model._decode_z(skips, bottleneck, z), LatentState([prior], [], [z]))


def fcn_forward(model: FCNBaseline, contexts: Sequence[torch.Tensor],
                batch_size: Optional[int] = None) -> torch.Tensor:
    return model(contexts, batch_size)


def build_baseline(spec: BaselineSpec) -> nn.Module:
    return CVAEBaseline(spec) if spec.is_vae else FCNBaseline(spec)


def _count_for(spec: BaselineSpec) -> int:
    return count_parameters(build_baseline(spec))


def fit_baseline_spec(kind: str, target_parameters: int, template: BaselineSpec,
                      tolerance: float = PARAMETER_TOLERANCE, max_width: int = 512) -> BaselineSpec:
    """
    Pick the base width (and for CVAEs the latent channels) whose parameter
    count lands closest to target_parameters; raise if it misses the tolerance.
    """
    spec = replace(template, kind=kind)
    low, high = 2, max_width
    # parameter count grows monotonically with width
    while low < high:
        mid = (low + high) // 2
        if _count_for(replace(spec, base_width=mid)) < target_parameters:
            low = mid + 1
        else:
            high = mid
    candidates = [replace(spec, base_width=w) for w in sorted({max(2, low - 1), low})]
    if spec.is_vae:
        candidates += [replace(c, latent_channels=max(1, c.latent_channels + d))
                       for c in list(candidates) for d in (-8, -4, 4, 8)]

    best = min(candidates, key=lambda c: abs(_count_for(c) - target_parameters))
    count = _count_for(best)
    deviation = abs(count - target_parameters) / target_parameters
    if deviation > tolerance:
        raise ConfigError(
            f"{kind}: closest parameter count {count} misses target {target_parameters} by {deviation:.1%}"
        )
    logger.info(f"✅ {kind} matched at width {best.base_width}: {count} params ({deviation:.1%} off target)")
    return best
