import json
from dataclasses import dataclass
from pathlib import Path

from .exceptions import ProtocolError
from .serializers import ProtocolSerializer

PROTOCOL_DIR = Path(__file__).resolve().parent / 'protocol_configs'


@dataclass(frozen=True)
class Protocol:
    name: str
    candidates: tuple
    probability: float
    per_clip: bool
    ranges: dict

    def interval_for(self, num_frames, interval_t):
        """Single-degradation protocols draw once per clip."""
        return num_frames if self.per_clip else interval_t

    def to_dict(self):
        return {
            'name': self.name,
            'candidates': list(self.candidates),
            'probability': self.probability,
            'per_clip': self.per_clip,
            'ranges': self.ranges,
        }

    @classmethod
    def from_dict(cls, payload):
        serializer = ProtocolSerializer(data=payload)
        if not serializer.is_valid():
            raise ProtocolError(f'Invalid protocol: {serializer.errors}')
        data = serializer.validated_data
        return cls(
            name=data['name'],
            candidates=tuple(data['candidates']),
            probability=data['probability'],
            per_clip=data['per_clip'],
            ranges={kind: dict(rules) for kind, rules in data['ranges'].items()},
        )


def available_protocols():
    return sorted(path.stem for path in PROTOCOL_DIR.glob('*.json'))


def load_protocol(name_or_path, probability=None):
    path = Path(name_or_path)
    if path.suffix != '.json':
        path = PROTOCOL_DIR / f'{name_or_path}.json'
    if not path.is_file():
        raise ProtocolError(
            f'Unknown protocol {name_or_path!r}; choose from {available_protocols()} or a JSON file.'
        )
    try:
        payload = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise ProtocolError(f'{path} is not valid JSON: {exc}') from exc
    if probability is not None:
        payload['probability'] = probability
    return Protocol.from_dict(payload)
