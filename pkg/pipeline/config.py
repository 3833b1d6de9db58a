"""Run configuration: JSON file values, overridden by flags, validated, then
snapshotted as resolved_config.json next to the outputs."""
import json
from pathlib import Path

from degrade.clips import atomic_write_text

from .exceptions import RunConfigError

RESOLVED_CONFIG = 'resolved_config.json'


def load_config_file(path):
    if not path:
        return {}
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise RunConfigError(f'Config file {path} does not exist.') from None
    except json.JSONDecodeError as exc:
        raise RunConfigError(f'{path} is not valid JSON: {exc}') from exc
    if not isinstance(payload, dict):
        raise RunConfigError(f'{path} must hold a JSON object.')
    return payload


def resolve_config(serializer_class, config_path=None, **overrides):
    """File values first, then every flag that was actually given."""
    values = load_config_file(config_path)
    values.update({key: value for key, value in overrides.items() if value is not None})
    serializer = serializer_class(data=values)
    if not serializer.is_valid():
        raise RunConfigError(f'Invalid configuration: {json.dumps(serializer.errors, sort_keys=True)}')
    return dict(serializer.validated_data)


def write_resolved_config(out_dir, config):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG
    atomic_write_text(path, json.dumps(config, indent=2, sort_keys=True) + '\n')
    return path
