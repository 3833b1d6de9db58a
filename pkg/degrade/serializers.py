from django.core.exceptions import ValidationError as DjangoValidationError
from rest_framework import serializers

from .schedule import REQUIRED_PARAMS, DegradationKind, DegradationSpec


def _check_spec(kind, params):
    try:
        DegradationSpec(kind=kind, params=params).clean()
    except DjangoValidationError as exc:
        raise serializers.ValidationError(exc.messages)


class DegradationSpecSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=DegradationKind.choices)
    params = serializers.DictField()

    def validate(self, attrs):
        _check_spec(attrs['kind'], attrs['params'])
        return attrs


class FrameMetadataSerializer(serializers.Serializer):
    frame_index = serializers.IntegerField(min_value=0)
    segment_index = serializers.IntegerField(min_value=0)
    specs = DegradationSpecSerializer(many=True)
    seed_path = serializers.ListField(child=serializers.IntegerField(min_value=0))
    video_backend = serializers.CharField(allow_null=True, required=False)


class ProtocolSerializer(serializers.Serializer):
    name = serializers.CharField(max_length=64)
    candidates = serializers.ListField(
        child=serializers.ChoiceField(choices=DegradationKind.choices), allow_empty=False
    )
    probability = serializers.FloatField(min_value=0.0, max_value=1.0)
    per_clip = serializers.BooleanField(default=False)
    ranges = serializers.DictField(child=serializers.DictField())

    def validate_probability(self, value):
        if value <= 0:
            raise serializers.ValidationError("Inclusion probability must be in (0, 1].")
        return value

    def validate_candidates(self, value):
        if len(set(value)) != len(value):
            raise serializers.ValidationError("Candidates must not repeat.")
        return value

    def validate(self, attrs):
        missing = [kind for kind in attrs['candidates'] if kind not in attrs['ranges']]
        if missing:
            raise serializers.ValidationError({'ranges': f"Missing parameter ranges for {missing}."})
        for kind, rules in attrs['ranges'].items():
            if kind not in DegradationKind.values:
                raise serializers.ValidationError({'ranges': f"Unknown degradation kind {kind!r}."})
            if set(rules) != {REQUIRED_PARAMS[kind]}:
                raise serializers.ValidationError(
                    {'ranges': f"{kind} takes exactly the parameter {REQUIRED_PARAMS[kind]!r}."}
                )
            for name, rule in rules.items():
                if 'uniform' in rule:
                    bounds = rule['uniform']
                    if len(bounds) != 2 or bounds[0] > bounds[1]:
                        raise serializers.ValidationError(
                            {'ranges': f"{kind}.{name} uniform range must be [low, high]."}
                        )
                    values = bounds
                elif 'choice' in rule:
                    values = rule['choice']
                    if not values:
                        raise serializers.ValidationError({'ranges': f"{kind}.{name} has no choices."})
                else:
                    raise serializers.ValidationError(
                        {'ranges': f"{kind}.{name} must be a 'uniform' or 'choice' rule."}
                    )
                for value in values:
                    _check_spec(kind, {name: value})
        return attrs
