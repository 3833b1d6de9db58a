from dataclasses import asdict, dataclass

from django.conf import settings
from django.core.exceptions import ValidationError

HISTORY_MODES = ('gated_prev_frame', 'none')
INJECTION_PRESETS = ('first', 'all', 'last_two')


def injection_sites_for(preset, num_decoders):
    """Decoder 0 runs at the latent resolution; the last decoder at full resolution."""
    if preset == 'first':
        return (0,)
    if preset == 'all':
        return tuple(range(num_decoders))
    if preset == 'last_two':
        return tuple(range(max(0, num_decoders - 2), num_decoders))
    raise ValidationError(f'Unknown injection preset {preset!r}; choose from {INJECTION_PRESETS}.')


@dataclass
class ModelConfig:
    stage_channels: tuple = (8, 16, 32)
    blocks_per_stage: int = 1
    d: int = None
    history_mode: str = 'gated_prev_frame'
    injection_sites: tuple = None
    cross_attention: bool = True
    attention_heads: int = 1
    pool_size: int = 8
    in_channels: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.d is None:
            self.d = settings.RONIN['EMBEDDING_DIM']
        if self.injection_sites is None:
            self.injection_sites = injection_sites_for('last_two', self.num_decoders)
        self.injection_sites = tuple(sorted(int(i) for i in self.injection_sites))

    @property
    def num_decoders(self):
        return len(self.stage_channels)

    @property
    def use_prompt(self):
        return bool(self.injection_sites)

    @property
    def size_multiple(self):
        return 2 ** (len(self.stage_channels) - 1)

    def clean(self):
        channels = self.stage_channels
        if not channels or any(c < 1 for c in channels):
            raise ValidationError('stage_channels must be positive.')
        if any(b <= a for a, b in zip(channels, channels[1:])):
            raise ValidationError(f'stage_channels must be strictly increasing, got {list(channels)}.')
        if self.blocks_per_stage < 1:
            raise ValidationError('blocks_per_stage must be >= 1.')
        if self.d < 1:
            raise ValidationError('Prompt dimension d must be >= 1.')
        if self.history_mode not in HISTORY_MODES:
            raise ValidationError(f'history_mode must be one of {HISTORY_MODES}.')
        if len(set(self.injection_sites)) != len(self.injection_sites) or any(
            not 0 <= site < self.num_decoders for site in self.injection_sites
        ):
            raise ValidationError(
                f'injection_sites must be distinct decoder indices in [0, {self.num_decoders}).'
            )
        if self.attention_heads < 1 or channels[-1] % self.attention_heads:
            raise ValidationError('attention_heads must divide the latent channel count.')
        if self.pool_size < 1:
            raise ValidationError('pool_size must be >= 1.')

    def to_dict(self):
        data = asdict(self)
        data['stage_channels'] = list(self.stage_channels)
        data['injection_sites'] = list(self.injection_sites)
        return data

    @classmethod
    def from_dict(cls, payload):
        from .serializers import ModelConfigSerializer

        serializer = ModelConfigSerializer(data=payload)
        if not serializer.is_valid():
            raise ValidationError(f'Invalid model config: {serializer.errors}')
        config = cls(**serializer.validated_data)
        config.clean()
        return config
