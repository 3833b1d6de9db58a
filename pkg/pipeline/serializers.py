from django.conf import settings
from rest_framework import serializers

from degrade.protocols import available_protocols
from restoration.config import INJECTION_PRESETS

ANALYSES = ('evaluate', 'identity', 'oracle', 'perturb', 'alignment', 'export')


def _seed():
    return settings.RONIN['SEED']


class SynthRunSerializer(serializers.Serializer):
    protocol = serializers.CharField()
    src = serializers.CharField(required=False, allow_null=True, default=None)
    out = serializers.CharField()
    seed = serializers.IntegerField(min_value=0, default=_seed)
    t = serializers.IntegerField(min_value=1, default=6)
    probability = serializers.FloatField(min_value=0.0, max_value=1.0, required=False, allow_null=True, default=None)
    procedural = serializers.IntegerField(min_value=0, default=0)
    jobs = serializers.IntegerField(min_value=1, default=1)
    video_fallback = serializers.BooleanField(required=False, allow_null=True, default=None)

    def validate_protocol(self, value):
        if not value.endswith('.json') and value not in available_protocols():
            raise serializers.ValidationError(f'Unknown protocol; choose from {available_protocols()}.')
        return value

    def validate(self, attrs):
        if not attrs['src'] and not attrs['procedural']:
            raise serializers.ValidationError('Give --src or --procedural N.')
        return attrs


class GroundRunSerializer(serializers.Serializer):
    dataset = serializers.CharField()
    out = serializers.CharField()
    client = serializers.CharField(default='mock')
    encoder = serializers.CharField(default='mock')
    candidates = serializers.ListField(child=serializers.CharField(), allow_empty=False,
                                       default=lambda: list(settings.RONIN['CANDIDATE_DEGRADATIONS']))
    dim = serializers.IntegerField(min_value=1, default=lambda: settings.RONIN['EMBEDDING_DIM'])
    encoder_seed = serializers.IntegerField(min_value=0, default=_seed)
    jobs = serializers.IntegerField(min_value=1, default=lambda: settings.RONIN['GROUNDING_MAX_IN_FLIGHT'])
    count_terms = serializers.ListField(child=serializers.CharField(), default=list)

    def validate_client(self, value):
        if value != 'mock' and not value.startswith('socket:'):
            raise serializers.ValidationError("Use 'mock' or 'socket:<addr>'.")
        return value

    validate_encoder = validate_client


class TrainRunSerializer(serializers.Serializer):
    dataset = serializers.CharField()
    store = serializers.CharField(required=False, allow_null=True, default=None)
    out = serializers.CharField()
    iters = serializers.IntegerField(min_value=0, default=500)
    seed = serializers.IntegerField(min_value=0, default=_seed)
    injection = serializers.ChoiceField(choices=INJECTION_PRESETS, default='last_two')
    no_prompt = serializers.BooleanField(default=False)
    no_history = serializers.BooleanField(default=False)
    stages = serializers.ListField(child=serializers.IntegerField(min_value=1), allow_empty=False,
                                   default=lambda: [8, 16, 32])
    batch_size = serializers.IntegerField(min_value=1, default=2)
    crop = serializers.IntegerField(min_value=1, default=64)
    window = serializers.IntegerField(min_value=1, default=4)
    lr0 = serializers.FloatField(default=4e-4)
    lr_min = serializers.FloatField(default=1e-7)
    warmup = serializers.IntegerField(min_value=0, default=0)
    lambda1 = serializers.FloatField(min_value=0.0, default=1.0)
    lambda2 = serializers.FloatField(min_value=0.0, default=0.01)
    augment = serializers.BooleanField(default=True)
    clip_grad = serializers.FloatField(required=False, allow_null=True, default=None)
    checkpoint_every = serializers.IntegerField(min_value=1, default=lambda: settings.RONIN['CHECKPOINT_EVERY'])

    def validate(self, attrs):
        if not attrs['no_prompt'] and not attrs['store']:
            raise serializers.ValidationError('Training with prompts needs --store (or pass --no-prompt).')
        if not attrs['lr0'] > attrs['lr_min'] > 0:
            raise serializers.ValidationError('Learning rates must satisfy lr0 > lr_min > 0.')
        if attrs['warmup'] > attrs['iters']:
            raise serializers.ValidationError('--warmup cannot exceed --iters.')
        return attrs


class EvalRunSerializer(serializers.Serializer):
    dataset = serializers.CharField()
    out = serializers.CharField()
    checkpoint = serializers.CharField(required=False, allow_null=True, default=None)
    store = serializers.CharField(required=False, allow_null=True, default=None)
    analysis = serializers.ListField(child=serializers.ChoiceField(choices=ANALYSES), allow_empty=False,
                                     default=lambda: ['evaluate'])
    noise_sigma = serializers.FloatField(min_value=0.0, default=1.0)
    seed = serializers.IntegerField(min_value=0, default=_seed)
    jobs = serializers.IntegerField(min_value=1, default=1)

    def validate(self, attrs):
        analyses = set(attrs['analysis'])
        if analyses - {'identity'} and not attrs['checkpoint']:
            raise serializers.ValidationError('--checkpoint is required for every analysis except identity.')
        if analyses & {'oracle', 'alignment'} and not attrs['store']:
            raise serializers.ValidationError('oracle and alignment need --store.')
        return attrs
