"""
Versioned checkpoint archives.

Layout of the single torch.save file:
    format_version  int, currently 1
    kind            'FusionVAE', 'CVAE', 'CVAE+S', 'FCN' or 'FCN+S'
    model_config    FusionVAE.model_config() or BaselineSpec.to_dict()
    state_dict      named parameter and buffer tensors
    training_state  epoch, optimizer state, KL schedule state, seeds
"""
import logging
import os
from typing import Dict, Optional, Tuple

import torch
from torch import nn

from baselines import BASELINE_KINDS, BaselineSpec, build_baseline
from errors import CheckpointError
from fusion_vae import FusionVAE

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FUSION_KIND = 'FusionVAE'


def model_kind(model: nn.Module) -> str:
    if isinstance(model, FusionVAE):
        return FUSION_KIND
    spec = getattr(model, 'spec', None)
    if isinstance(spec, BaselineSpec):
        return spec.kind
    raise CheckpointError(f"Cannot checkpoint a {type(model).__name__}")


def model_config(model: nn.Module) -> Dict:
    if isinstance(model, FusionVAE):
        return model.model_config()
    return model.spec.to_dict()


def build_model(kind: str, config: Dict) -> nn.Module:
    """Rebuild an untrained model from its kind tag and config"""
    if kind == FUSION_KIND:
        return FusionVAE.from_config(config)
    if kind in BASELINE_KINDS:
        return build_baseline(BaselineSpec(**config))
    raise CheckpointError(f"Unknown model kind in checkpoint: {kind}")


def save_checkpoint(model: nn.Module, path: str, training_state: Optional[Dict] = None) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        'format_version': FORMAT_VERSION,
        'kind': model_kind(model),
        'model_config': model_config(model),
        'state_dict': {k: v.detach().cpu() for k, v in model.state_dict().items()},
        'training_state': training_state or {},
    }
    # atomic: write then rename
    tmp_path = path + '.tmp'
    torch.save(payload, tmp_path)
    os.replace(tmp_path, path)
    logger.info(f"✅ Saved {payload['kind']} checkpoint to {path}")
    return path


def load_checkpoint(path: str, map_location: str = 'cpu') -> Tuple[nn.Module, Dict]:
    """
    Load a checkpoint archive

    Args:
        path: Archive written by save_checkpoint
        map_location: Device for the loaded tensors

    Returns:
        (model in eval mode, training_state)
    """
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or 'format_version' not in payload:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    version = payload['format_version']
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")

    model = build_model(payload['kind'], payload['model_config'])
    try:
        model.load_state_dict(payload['state_dict'])
    except RuntimeError as e:
        raise CheckpointError(f"State of {path} does not fit its model config: {e}") from e
    model.to(map_location)
    model.eval()
    return model, payload.get('training_state', {})
