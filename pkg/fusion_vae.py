"""
FusionVAE: a hierarchical conditional VAE that fuses a variable set of
corrupted context images into reconstructions of a target image.

Context images and the target go through the same residual encoder. Each
latent group l has a conditional prior p_l built from the aggregated context
features plus the decoder state, and (when the target is known) a posterior
q_l built from the target features plus the decoder state. A trainable seed
tensor h starts the top-down generator.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from aggregation import (GaussianFeature, aggregate_features, bayes_agg_closed,
                         max_agg)
from errors import ConfigError, EmptyContextSet, ShapeMismatchError
from likelihoods import (DEFAULT_NUM_MIX, LIKELIHOOD_KINDS, LikelihoodParams,
                         make_likelihood, output_channels)
from residual_cells import (DecoderCell, DecoderCombiner, DownCell, EncoderCell,
                            UpCell, count_parameters)

logger = logging.getLogger(__name__)

PRIOR_MODES = ('MaxAggAdd', 'MeanAggAdd', 'BayAggAdd', 'MaxAggAll', 'MeanAggAll', 'BayAggAll')
POSTERIOR_VARIANTS = ('q(y)', 'q(x,y)')

_MODE_RULES = {
    'MaxAggAdd': ('max', 'add'),
    'MeanAggAdd': ('mean', 'add'),
    'BayAggAdd': ('bayes', 'add'),
    'MaxAggAll': ('max', 'all'),
    'MeanAggAll': ('mean', 'all'),
    'BayAggAll': ('bayes', 'all'),
}


@dataclass
class HierarchySpec:
    """Latent layout, listed top-down: the first scale is the coarsest"""
    scales: List[Tuple[int, int]]
    latent_channels: int
    base_width: int
    image_channels: int = 1
    image_size: int = 32

    def __post_init__(self):
        self.scales = [tuple(int(v) for v in s) for s in self.scales]
        if not self.scales or any(n < 1 for n, _ in self.scales):
            raise ConfigError("HierarchySpec needs at least one scale with at least one group")
        for (_, upper), (_, lower) in zip(self.scales, self.scales[1:]):
            if lower != 2 * upper:
                raise ConfigError(f"spatial dims must double between scales, got {upper} -> {lower}")
        ratio = self.image_size / self.finest_spatial
        if ratio < 1 or not float(math.log2(ratio)).is_integer():
            raise ConfigError(
                f"image size {self.image_size} is not a power-of-two multiple of latent size {self.finest_spatial}"
            )
        if self.latent_channels < 1 or self.base_width < 1:
            raise ConfigError("latent_channels and base_width must be positive")

    @property
    def num_groups(self) -> int:
        return sum(n for n, _ in self.scales)

    @property
    def finest_spatial(self) -> int:
        return self.scales[-1][1]

    @property
    def num_preprocess(self) -> int:
        """Downsampling steps between the image and the finest latent scale"""
        return int(round(math.log2(self.image_size // self.finest_spatial)))

    def width_at(self, spatial: int) -> int:
        # channels double with every halving of the resolution
        return self.base_width * (self.image_size // spatial)

    def group_layout(self) -> List[Tuple[int, int]]:
        """(spatial, width) for every group, top-down"""
        layout = []
        for n_groups, spatial in self.scales:
            layout.extend([(spatial, self.width_at(spatial))] * n_groups)
        return layout

    def group_sizes(self) -> List[int]:
        return [self.latent_channels * spatial * spatial for spatial, _ in self.group_layout()]

    def scale_starts(self) -> List[int]:
        """Indices of the first group of every scale after the top one"""
        starts, index = [], 0
        for n_groups, _ in self.scales[:-1]:
            index += n_groups
            starts.append(index)
        return starts

    def to_dict(self) -> Dict:
        return {**asdict(self), 'scales': [list(s) for s in self.scales]}

    @classmethod
    def from_dict(cls, data: Dict) -> "HierarchySpec":
        return cls(**{**data, 'scales': [tuple(s) for s in data['scales']]})


@dataclass
class LatentState:
    """Per-group priors, posteriors (empty without a target) and the samples z_l"""
    priors: List[GaussianFeature] = field(default_factory=list)
    posteriors: List[GaussianFeature] = field(default_factory=list)
    z: List[torch.Tensor] = field(default_factory=list)


@dataclass
class FusionOutput:
    likelihood: LikelihoodParams
    latents: LatentState


class FeatureEncoder(nn.Module):
    def __init__(self, spec: HierarchySpec, cells_per_group: int = 1, use_se: bool = True):
        """
        Bottom-up residual tower that taps one feature map per latent group

        Args:
            spec: Latent layout the taps must match
            cells_per_group: Encoder cells between consecutive taps
            use_se: Squeeze-and-excitation inside the cells
        """
        super().__init__()
        self.spec = spec
        width = spec.base_width
        self.stem = nn.Conv2d(spec.image_channels, width, 3, padding=1)

        pre_process = []
        for _ in range(spec.num_preprocess):
            pre_process.append(DownCell(width, 2 * width, use_se))
            width *= 2
        self.pre_process = nn.Sequential(*pre_process)

        self.group_cells = nn.ModuleList()
        self.scale_downs = nn.ModuleList()
        bottom_up = list(reversed(spec.scales))
        for index, (n_groups, _) in enumerate(bottom_up):
            for _ in range(n_groups):
                self.group_cells.append(nn.Sequential(*[EncoderCell(width, use_se) for _ in range(cells_per_group)]))
            if index < len(bottom_up) - 1:
                self.scale_downs.append(DownCell(width, 2 * width, use_se))
                width *= 2

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        s = self.pre_process(self.stem(2.0 * x - 1.0))
        taps = []
        cell_index = 0
        bottom_up = list(reversed(self.spec.scales))
        for index, (n_groups, _) in enumerate(bottom_up):
            for _ in range(n_groups):
                s = self.group_cells[cell_index](s)
                taps.append(s)
                cell_index += 1
            if index < len(bottom_up) - 1:
                s = self.scale_downs[index](s)
        taps.reverse()
        return taps


class FusionVAE(nn.Module):
    def __init__(self, spec: HierarchySpec, likelihood: str = 'bernoulli', prior_mode: str = 'MaxAggAdd',
                 posterior_variant: str = 'q(y)', share_encoder: bool = True, cells_per_group: int = 1,
                 use_se: bool = True, num_mix: int = DEFAULT_NUM_MIX):
        """
        Initialize the fusion network

        Args:
            spec: Hierarchy of latent groups and widths
            likelihood: 'bernoulli' or 'logistic_mixture'
            prior_mode: One of PRIOR_MODES
            posterior_variant: 'q(y)' or 'q(x,y)'
            share_encoder: Use the context encoder weights for the target too
            cells_per_group: Residual cells per group in encoder and decoder
            use_se: Squeeze-and-excitation inside every cell
            num_mix: Mixture components of the logistic likelihood
        """
        super().__init__()
        if likelihood not in LIKELIHOOD_KINDS:
            raise ConfigError(f"Unknown likelihood kind: {likelihood}")
        self.spec = spec
        self.likelihood_kind = likelihood
        self.num_mix = num_mix
        self.share_encoder = share_encoder
        self.cells_per_group = cells_per_group
        self.use_se = use_se
        self.prior_mode = prior_mode
        self.posterior_variant = posterior_variant

        self.context_encoder = FeatureEncoder(spec, cells_per_group, use_se)
        self.target_encoder = self.context_encoder if share_encoder else FeatureEncoder(spec, cells_per_group, use_se)

        layout = spec.group_layout()
        top_spatial, top_width = layout[0]
        self.h = nn.Parameter(torch.rand(top_width, top_spatial, top_spatial))

        zc = spec.latent_channels
        self._scale_starts = spec.scale_starts()
        self.prior_nets = nn.ModuleList()
        self.posterior_nets = nn.ModuleList()
        self.combiners = nn.ModuleList()
        self.dec_cells = nn.ModuleList()
        self.scale_ups = nn.ModuleList()
        for index, (_, width) in enumerate(layout):
            self.prior_nets.append(nn.Sequential(nn.ELU(), nn.Conv2d(width, 2 * zc, 3, padding=1)))
            self.posterior_nets.append(nn.Conv2d(width, 2 * zc, 3, padding=1))
            self.combiners.append(DecoderCombiner(width, zc))
            if index == 0:
                self.dec_cells.append(nn.Identity())
            else:
                self.dec_cells.append(nn.Sequential(*[DecoderCell(width, use_se=use_se) for _ in range(cells_per_group)]))
            if index in self._scale_starts:
                self.scale_ups.append(UpCell(layout[index - 1][1], width, use_se))

        width = layout[-1][1]
        post_process = []
        for _ in range(spec.num_preprocess):
            post_process.append(UpCell(width, width // 2, use_se))
            width //= 2
        self.post_process = nn.Sequential(*post_process)
        self.output_head = nn.Sequential(
            nn.ELU(),
            nn.Conv2d(width, output_channels(likelihood, spec.image_channels, num_mix), 3, padding=1),
        )

    # --- configuration -------------------------------------------------

    @property
    def prior_mode(self) -> str:
        return self._prior_mode

    @prior_mode.setter
    def prior_mode(self, mode: str):
        if mode not in _MODE_RULES:
            raise ConfigError(f"Unknown prior mode: {mode}. Expected one of {', '.join(PRIOR_MODES)}")
        self._prior_mode = mode

    @property
    def posterior_variant(self) -> str:
        return self._posterior_variant

    @posterior_variant.setter
    def posterior_variant(self, variant: str):
        if variant not in POSTERIOR_VARIANTS:
            raise ConfigError(f"Unknown posterior variant: {variant}")
        self._posterior_variant = variant

    def model_config(self) -> Dict:
        return {
            'spec': self.spec.to_dict(),
            'likelihood': self.likelihood_kind,
            'prior_mode': self.prior_mode,
            'posterior_variant': self.posterior_variant,
            'share_encoder': self.share_encoder,
            'cells_per_group': self.cells_per_group,
            'use_se': self.use_se,
            'num_mix': self.num_mix,
        }

    @classmethod
    def from_config(cls, config: Dict) -> "FusionVAE":
        options = dict(config)
        spec = HierarchySpec.from_dict(options.pop('spec'))
        return cls(spec, **options)

    def num_parameters(self) -> int:
        return count_parameters(self)

    # --- encoders ------------------------------------------------------

    def _check_image(self, x: torch.Tensor, what: str) -> None:
        expected = (self.spec.image_channels, self.spec.image_size, self.spec.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeMismatchError(f"{what} has shape {tuple(x.shape)}, expected [B, {expected[0]}, {expected[1]}, {expected[2]}]")

    def encode_contexts(self, contexts: Sequence[torch.Tensor]) -> List[List[torch.Tensor]]:
        """Per-group lists of context features; every context goes through the same encoder"""
        contexts = list(contexts)
        if not contexts:
            return [[] for _ in range(self.spec.num_groups)]
        for x in contexts:
            self._check_image(x, "context")
            if x.size(0) != contexts[0].size(0):
                raise ShapeMismatchError("all contexts must share the batch size")

        k = len(contexts)
        taps = self.context_encoder(torch.cat(contexts, dim=0))
        return [list(torch.chunk(tap, k, dim=0)) for tap in taps]

    def encode_target(self, target: torch.Tensor) -> List[torch.Tensor]:
        self._check_image(target, "target")
        return self.target_encoder(target)

    # --- latent heads --------------------------------------------------

    def _head(self, group: int, feature: torch.Tensor) -> GaussianFeature:
        return GaussianFeature.from_params(self.prior_nets[group](feature))

    def prior_heads(self, group: int, context_features: Sequence[torch.Tensor],
                    decoder_feature: Optional[torch.Tensor], like: torch.Tensor) -> GaussianFeature:
        """
        Conditional prior p_l for one group.

        `like` is any tensor with the latent shape of the group; it shapes the
        standard normal used when there is neither context nor decoder input.
        """
        members = list(context_features)
        if not members and decoder_feature is None:
            return GaussianFeature.standard_normal(like)

        rule, combine = _MODE_RULES[self.prior_mode]
        if rule == 'bayes':
            return self._bayes_prior(group, members, decoder_feature, combine)

        if combine == 'add':
            try:
                fused = aggregate_features(rule, members)
            except EmptyContextSet:
                return self._head(group, decoder_feature)
            if decoder_feature is not None:
                fused = fused + decoder_feature
            return self._head(group, fused)

        if decoder_feature is not None:
            members.append(decoder_feature)
        return self._head(group, aggregate_features(rule, members))

    def _bayes_prior(self, group: int, members: List[torch.Tensor], decoder_feature: Optional[torch.Tensor],
                     combine: str) -> GaussianFeature:
        if not members:
            return self._head(group, decoder_feature)

        if combine == 'add':
            if decoder_feature is not None:
                members = [f + decoder_feature for f in members]
            prior = None
        else:
            prior = self._head(group, decoder_feature) if decoder_feature is not None else None

        # one batched head pass over all contexts
        params = self.prior_nets[group](torch.cat(members, dim=0))
        observations = [GaussianFeature.from_params(p) for p in torch.chunk(params, len(members), dim=0)]
        return bayes_agg_closed(prior, observations)

    def posterior_heads(self, group: int, target_feature: Optional[torch.Tensor],
                        decoder_feature: Optional[torch.Tensor],
                        context_features: Sequence[torch.Tensor] = ()) -> GaussianFeature:
        """Approximate posterior q_l from the target features and the decoder state"""
        if target_feature is None:
            raise ShapeMismatchError("posterior needs target features")
        feature = target_feature
        if decoder_feature is not None:
            feature = feature + decoder_feature
        if self.posterior_variant == 'q(x,y)' and len(context_features) > 0:
            feature = feature + max_agg(context_features)
        return GaussianFeature.from_params(self.posterior_nets[group](feature))

    # --- top-down pass -------------------------------------------------

    def _latent_like(self, group: int, batch_size: int) -> torch.Tensor:
        spatial, _ = self.spec.group_layout()[group]
        return self.h.new_zeros(batch_size, self.spec.latent_channels, spatial, spatial)

    def _top_down(self, context_features: List[List[torch.Tensor]], target_features: Optional[List[torch.Tensor]],
                  batch_size: int, temperature: float = 1.0,
                  z_given: Optional[Sequence[torch.Tensor]] = None) -> Tuple[torch.Tensor, LatentState]:
        latents = LatentState()
        s = self.h.unsqueeze(0).expand(batch_size, -1, -1, -1)
        up_index = 0
        for group in range(self.spec.num_groups):
            if group in self._scale_starts:
                s = self.scale_ups[up_index](s)
                up_index += 1
            s = self.dec_cells[group](s)
            # the top group sees no decoder feature, only the seed h reaches it through the combiner
            decoder_feature = s if group > 0 else None

            prior = self.prior_heads(group, context_features[group], decoder_feature,
                                     self._latent_like(group, batch_size))
            latents.priors.append(prior)

            if target_features is not None:
                posterior = self.posterior_heads(group, target_features[group], decoder_feature,
                                                 context_features[group])
                latents.posteriors.append(posterior)
                z = posterior.rsample()
            elif z_given is not None:
                z = z_given[group]
            elif temperature == 0:
                z = prior.mu
            else:
                z = prior.rsample(temperature=temperature)

            latents.z.append(z)
            s = self.combiners[group](s, z)

        s = self.post_process(s)
        return self.output_head(s), latents

    def _make_likelihood(self, params: torch.Tensor) -> LikelihoodParams:
        return make_likelihood(self.likelihood_kind, params, self.spec.image_channels, self.num_mix)

    def forward(self, contexts: Sequence[torch.Tensor], target: torch.Tensor) -> FusionOutput:
        """Training pass: latents drawn from the posterior, priors computed alongside"""
        context_features = self.encode_contexts(contexts)
        target_features = self.encode_target(target)
        params, latents = self._top_down(context_features, target_features, target.size(0))
        return FusionOutput(self._make_likelihood(params), latents)

    def generate(self, z: Sequence[torch.Tensor], contexts: Sequence[torch.Tensor] = ()) -> LikelihoodParams:
        """Decode fixed latents; the contexts only shape the priors recorded along the way"""
        z = list(z)
        if len(z) != self.spec.num_groups:
            raise ShapeMismatchError(f"expected {self.spec.num_groups} latent groups, got {len(z)}")
        params, _ = self._top_down(self.encode_contexts(contexts), None, z[0].size(0), z_given=z)
        return self._make_likelihood(params)

    def conditional_priors(self, contexts: Sequence[torch.Tensor], z: Sequence[torch.Tensor]) -> List[GaussianFeature]:
        """Every p_l along the top-down pass that decodes the fixed latents z"""
        z = list(z)
        if len(z) != self.spec.num_groups:
            raise ShapeMismatchError(f"expected {self.spec.num_groups} latent groups, got {len(z)}")
        _, latents = self._top_down(self.encode_contexts(contexts), None, z[0].size(0), z_given=z)
        return latents.priors

    @torch.no_grad()
    def sample(self, contexts: Sequence[torch.Tensor], n_samples: int = 1, temperature: float = 1.0,
               batch_size: Optional[int] = None) -> torch.Tensor:
        """
        Ancestral sampling from the conditional priors.

        Returns rendered mean images [n_samples, B, C, H, W]. Temperature scales
        the prior standard deviations only; 0 decodes the prior means.
        """
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        contexts = list(contexts)
        if batch_size is None:
            if not contexts:
                raise ValueError("batch_size is required when sampling without contexts")
            batch_size = contexts[0].size(0)

        context_features = self.encode_contexts(contexts)
        images = []
        for _ in range(n_samples):
            params, _ = self._top_down(context_features, None, batch_size, temperature=temperature)
            images.append(self._make_likelihood(params).mean())
        return torch.stack(images, dim=0)

    @torch.no_grad()
    def reconstruct(self, contexts: Sequence[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
        """Posterior path with the target given as input, rendered as mean images [B, C, H, W]"""
        return self.forward(contexts, target).likelihood.mean()

    @torch.no_grad()
    def importance_log_weights(self, contexts: Sequence[torch.Tensor], target: torch.Tensor,
                               n_samples: int) -> torch.Tensor:
        """log p(y|x,z_s) + log p(z_s|x) - log q(z_s|y) for z_s ~ q, as float64 [S, B]"""
        if n_samples < 1:
            raise ValueError("importance sampling needs S >= 1")
        context_features = self.encode_contexts(contexts)
        target_features = self.encode_target(target)
        weights = []
        for _ in range(n_samples):
            params, latents = self._top_down(context_features, target_features, target.size(0))
            log_w = self._make_likelihood(params).log_prob(target).double()
            for prior, posterior, z in zip(latents.priors, latents.posteriors, latents.z):
                log_w = log_w + (prior.log_prob(z) - posterior.log_prob(z)).double().flatten(1).sum(dim=1)
            weights.append(log_w)
        return torch.stack(weights, dim=0)
