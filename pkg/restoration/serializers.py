from rest_framework import serializers

from .config import HISTORY_MODES


class ModelConfigSerializer(serializers.Serializer):
    stage_channels = serializers.ListField(child=serializers.IntegerField(min_value=1), allow_empty=False)
    blocks_per_stage = serializers.IntegerField(min_value=1, default=1)
    d = serializers.IntegerField(min_value=1, required=False)
    history_mode = serializers.ChoiceField(choices=HISTORY_MODES, default='gated_prev_frame')
    injection_sites = serializers.ListField(child=serializers.IntegerField(min_value=0), required=False)
    cross_attention = serializers.BooleanField(default=True)
    attention_heads = serializers.IntegerField(min_value=1, default=1)
    pool_size = serializers.IntegerField(min_value=1, default=8)
    in_channels = serializers.IntegerField(min_value=1, default=3)

    def validate_stage_channels(self, value):
        if any(b <= a for a, b in zip(value, value[1:])):
            raise serializers.ValidationError('Stage widths must be strictly increasing.')
        return value

    def validate(self, attrs):
        sites = attrs.get('injection_sites')
        if sites is not None and any(site >= len(attrs['stage_channels']) for site in sites):
            raise serializers.ValidationError({'injection_sites': 'Index past the last decoder.'})
        return attrs
