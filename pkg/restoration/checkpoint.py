import hashlib
import io
import logging
from pathlib import Path

import torch
from django.core.exceptions import ValidationError

from degrade.clips import atomic_write_bytes

from .config import ModelConfig
from .exceptions import CheckpointError
from .network import RestorationNetwork

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'ronin-checkpoint'
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path, step=0, extra=None):
    payload = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'config': model.config.to_dict(),
        'step': int(step),
        'extra': extra or {},
        'state_dict': {
            name: tensor.detach().to('cpu', torch.float32).contiguous()
            for name, tensor in model.state_dict().items()
        },
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    atomic_write_bytes(path, buffer.getvalue())
    logger.debug('Saved checkpoint %s at step %d', path, step)
    return Path(path)


def read_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f'Checkpoint {path} does not exist.')
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as exc:
        raise CheckpointError(f'Cannot read checkpoint {path}: {exc}') from exc
    if not isinstance(payload, dict) or payload.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f'{path} is not a restoration checkpoint.')
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointError(
            f'{path} has checkpoint version {payload.get("version")}, expected {CHECKPOINT_VERSION}.'
        )
    return payload


def load_checkpoint(path, expected_config=None):
    """Return (model, payload); a differing ``expected_config`` is rejected."""
    payload = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(payload['config'])
    except ValidationError as exc:
        raise CheckpointError(f'{path} carries an invalid config: {exc.messages}') from exc
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        raise CheckpointError(
            f'{path} was trained with {config.to_dict()}, expected {expected_config.to_dict()}.'
        )
    model = RestorationNetwork(config)
    try:
        model.load_state_dict(payload['state_dict'])
    except RuntimeError as exc:
        raise CheckpointError(f'{path} does not match its own config: {exc}') from exc
    model.eval()
    return model, payload


def checkpoint_id(path):
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return f'{Path(path).stem}-{digest[:12]}'
