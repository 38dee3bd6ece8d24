"""
Resolved experiment configuration.

Values come from, in increasing precedence: the preset named by `preset`,
a flat KEY=value config file, environment overrides (FVLAB_DEVICE) and
`--set key=value` command-line overrides.
"""
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

from dotenv import dotenv_values

from augmentation import DATASETS
from errors import ConfigError
from fusion_vae import POSTERIOR_VARIANTS, PRIOR_MODES, HierarchySpec
from likelihoods import LIKELIHOOD_KINDS
from mask_generator import MaskConfig
from objective import ALPHA_MODES
from occlusion_composer import OcclusionConfig
from presets import ExperimentPresets

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = 'resolved_config.env'
ALL_ARCHITECTURES = ('FCN', 'FCN+S', 'CVAE', 'CVAE+S', 'FusionVAE')
_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def _opt(default, help_text: str):
    return field(default=default, metadata={'help': help_text})


@dataclass
class TrainConfig:
    # experiment
    preset: str = _opt(ExperimentPresets.DEFAULT_PRESET, "Named preset supplying the defaults below")
    dataset: str = _opt('fmnist', "Dataset id: fmnist, fceleba or ftless")
    architectures: str = _opt('FusionVAE', "Comma-separated architectures to train, or 'all'")
    raw_root: str = _opt('', "Raw dataset directory (falls back to FVLAB_DATA_ROOT)")
    data_dir: str = _opt('', "Generated dataset directory (defaults to <out>/data/<dataset>)")
    seed: int = _opt(0, "Master seed; run i uses seed + i")
    runs: int = _opt(3, "Independent training runs per architecture")
    device: str = _opt('cpu', "Torch device (FVLAB_DEVICE overrides the file value)")

    # model
    scales: str = _opt('5x4,2x8', "Latent groups per scale, top-down, as GROUPSxSIZE")
    latent_channels: int = _opt(10, "Channels of every latent group")
    base_width: int = _opt(4, "Feature channels at full image resolution; doubles per halving")
    image_channels: int = _opt(1, "Image channels")
    image_size: int = _opt(32, "Image side length")
    likelihood: str = _opt('bernoulli', "Output likelihood: bernoulli or logistic_mixture")
    num_mix: int = _opt(10, "Mixture components of the logistic likelihood")
    cells_per_group: int = _opt(1, "Residual cells per latent group")
    use_se: bool = _opt(True, "Squeeze-and-excitation in every residual cell")
    share_encoder: bool = _opt(True, "Share weights between context and target encoders")
    prior_mode: str = _opt('MaxAggAdd', "Prior fusion mode")
    posterior_variant: str = _opt('q(y)', "Posterior variant: q(y) or q(x,y)")
    baseline_tolerance: float = _opt(0.10, "Allowed relative parameter-count gap of the baselines")

    # optimization
    epochs: int = _opt(20, "Training epochs")
    batch_size: int = _opt(64, "Training batch size")
    lr_start: float = _opt(0.01, "Learning rate at step 0")
    lr_end: float = _opt(0.0001, "Learning rate at the last step")
    adamax_beta1: float = _opt(0.9, "AdaMax first-moment decay")
    adamax_beta2: float = _opt(0.999, "AdaMax infinity-norm decay")
    adamax_eps: float = _opt(1e-8, "AdaMax epsilon")
    weight_decay: float = _opt(0.0, "AdaMax weight decay")
    warmup_fraction: float = _opt(0.3, "Fraction of all steps over which beta rises to 1")
    alpha_mode: str = _opt('ema-balanced', "KL balancing: uniform, size-weighted or ema-balanced")
    free_bits: float = _opt(0.0, "Per-group KL floor in nats (0 disables)")
    grad_clip: float = _opt(200.0, "Global gradient-norm clipping threshold")
    max_skip_fraction: float = _opt(0.01, "Abort a run when more batches per epoch are non-finite")
    num_workers: int = _opt(0, "DataLoader worker processes (0 is reproducible)")

    # data generation
    workers: int = _opt(1, "Threads writing generated samples")
    train_limit: int = _opt(0, "Use only the first N training samples (0 = all)")
    eval_limit: int = _opt(0, "Use only the first N evaluation samples (0 = all)")
    min_ellipses: int = _opt(1, "Fewest ellipses per mask")
    max_ellipses: int = _opt(3, "Most ellipses per mask")
    min_axis: float = _opt(0.1, "Smallest ellipse semi-axis, fraction of the image side")
    max_axis: float = _opt(0.4, "Largest ellipse semi-axis, fraction of the image side")
    noise_std: float = _opt(0.3, "Std of the Gaussian noise added to every masked view")
    min_occluders: int = _opt(5, "Fewest occluders per T-LESS context")
    max_occluders: int = _opt(8, "Most occluders per T-LESS context")

    # evaluation
    n_importance_samples: int = _opt(100, "Importance samples per NLL estimate")
    n_mse_samples: int = _opt(0, "Samples for MSE-min (0 = n_importance_samples)")
    eval_batch_size: int = _opt(16, "Evaluation batch size")
    grid_items: int = _opt(8, "Rows of sample grids")
    grid_samples: int = _opt(5, "Samples per row in grids")

    def validate(self) -> "TrainConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset}")
        if self.likelihood not in LIKELIHOOD_KINDS:
            raise ConfigError(f"likelihood must be one of {LIKELIHOOD_KINDS}, got {self.likelihood}")
        if self.prior_mode not in PRIOR_MODES:
            raise ConfigError(f"prior_mode must be one of {PRIOR_MODES}, got {self.prior_mode}")
        if self.posterior_variant not in POSTERIOR_VARIANTS:
            raise ConfigError(f"posterior_variant must be one of {POSTERIOR_VARIANTS}")
        if self.alpha_mode not in ALPHA_MODES:
            raise ConfigError(f"alpha_mode must be one of {ALPHA_MODES}")
        if not self.lr_end < self.lr_start:
            raise ConfigError(f"lr_end ({self.lr_end}) must be below lr_start ({self.lr_start})")
        if self.epochs < 1 or self.runs < 1 or self.batch_size < 1:
            raise ConfigError("epochs, runs and batch_size must be at least 1")
        if not 0 < self.warmup_fraction <= 1:
            raise ConfigError("warmup_fraction must be in (0, 1]")
        if self.n_importance_samples < 1:
            raise ConfigError("n_importance_samples must be at least 1")
        self.architecture_list()
        self.scales = format_scales(self.hierarchy_spec().scales)
        return self

    # --- derived objects -------------------------------------------------

    def architecture_list(self) -> List[str]:
        if self.architectures.strip().lower() == 'all':
            return list(ALL_ARCHITECTURES)
        names = [a.strip() for a in self.architectures.split(',') if a.strip()]
        unknown = [a for a in names if a not in ALL_ARCHITECTURES]
        if unknown or not names:
            raise ConfigError(f"Unknown architectures {unknown}; choose from {', '.join(ALL_ARCHITECTURES)}")
        return names

    def hierarchy_spec(self) -> HierarchySpec:
        return HierarchySpec(parse_scales(self.scales), self.latent_channels, self.base_width,
                             self.image_channels, self.image_size)

    def mask_config(self) -> MaskConfig:
        return MaskConfig(self.min_ellipses, self.max_ellipses, self.min_axis, self.max_axis, self.noise_std)

    def occlusion_config(self) -> OcclusionConfig:
        return OcclusionConfig(min_sprites=self.min_occluders, max_sprites=self.max_occluders)

    def resolved_raw_root(self) -> str:
        root = self.raw_root or os.environ.get('FVLAB_DATA_ROOT', '')
        if not root:
            raise ConfigError("No raw dataset location: set raw_root or FVLAB_DATA_ROOT")
        return root

    def resolved_data_dir(self, out_dir: str) -> str:
        return self.data_dir or os.path.join(out_dir, 'data', self.dataset)

    def to_dict(self) -> Dict:
        return asdict(self)


# --- scales ---------------------------------------------------------------

def parse_scales(text: str) -> List[Tuple[int, int]]:
    """'5x4,2x8' -> [(5, 4), (2, 8)]"""
    scales = []
    for part in text.split(','):
        try:
            groups, size = part.strip().lower().split('x')
            scales.append((int(groups), int(size)))
        except ValueError:
            raise ConfigError(f"Bad scale '{part}' in '{text}'; expected GROUPSxSIZE") from None
    return scales


def format_scales(scales: Sequence[Tuple[int, int]]) -> str:
    return ','.join(f"{n}x{s}" for n, s in scales)


# --- parsing --------------------------------------------------------------

def coerce_value(key: str, raw, target_type):
    if not isinstance(raw, str):
        return target_type(raw)
    text = raw.strip()
    try:
        if target_type is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        return target_type(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read '{raw}' as {target_type.__name__}") from None


def _field_types() -> Dict[str, type]:
    return {f.name: f.type for f in fields(TrainConfig)}


def parse_settings(raw: Dict[str, Optional[str]], source: str) -> Dict:
    """Coerce raw string settings; unknown keys raise ConfigError"""
    types = _field_types()
    parsed = {}
    for key, value in raw.items():
        name = key.strip().lower()
        if name not in types:
            raise ConfigError(f"Unknown config key '{key}' in {source}")
        if value is None:
            raise ConfigError(f"Config key '{key}' in {source} has no value")
        parsed[name] = coerce_value(name, value, types[name])
    return parsed


def parse_overrides(overrides: Sequence[str]) -> Dict[str, str]:
    result = {}
    for item in overrides or []:
        if '=' not in item:
            raise ConfigError(f"Override '{item}' must look like key=value")
        key, value = item.split('=', 1)
        result[key.strip()] = value
    return result


def load_config_file(path: str) -> Dict:
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    return parse_settings(dotenv_values(path), path)


def resolve_config(config_path: Optional[str] = None, overrides: Sequence[str] = (),
                   extra: Optional[Dict] = None) -> TrainConfig:
    """
    Build the resolved TrainConfig

    Args:
        config_path: Optional flat KEY=value file
        overrides: 'key=value' strings, highest precedence
        extra: Already-typed values from dedicated CLI flags (e.g. --seed), applied last

    Returns:
        Validated TrainConfig
    """
    file_values = load_config_file(config_path) if config_path else {}
    override_values = parse_settings(parse_overrides(overrides), '--set')
    extra = {k: v for k, v in (extra or {}).items() if v is not None}

    preset = extra.get('preset') or override_values.get('preset') or file_values.get('preset') \
        or ExperimentPresets.DEFAULT_PRESET
    values = {'preset': preset, **ExperimentPresets.get_preset(preset)}
    values.update(file_values)
    device = os.environ.get('FVLAB_DEVICE')
    if device:
        values['device'] = device
    values.update(override_values)
    values.update(parse_settings({k: str(v) for k, v in extra.items()}, 'command line'))
    return TrainConfig(**values).validate()


def to_env_text(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = 'true' if value else 'false'
        lines.append(f"{f.name}={value}")
    return '\n'.join(lines) + '\n'


def write_resolved_config(cfg: TrainConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_CONFIG_NAME)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(to_env_text(cfg))
    logger.debug(f"Resolved config written to {path}")
    return path


def config_help_text() -> str:
    """Every config key with type, default and help, for --help epilogs"""
    lines = ['config keys (KEY=value in --config files, or --set key=value):']
    for f in fields(TrainConfig):
        lines.append(f"  {f.name} ({f.type.__name__}, default {f.default!r}): {f.metadata['help']}")
    lines.append('')
    lines.append('presets (preset=NAME):')
    for name in ExperimentPresets.list_presets():
        info = ExperimentPresets.get_preset_info(name)
        scale = 'long running' if info['long_running'] else 'desk scale'
        lines.append(f"  {name}: {info['dataset']}, latent groups {info['latent_groups']}, {scale}")
    return '\n'.join(lines)
