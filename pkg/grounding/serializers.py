from rest_framework import serializers

from .prompting import INTENSITIES


class TextResponseSerializer(serializers.Serializer):
    text = serializers.CharField(allow_blank=True, trim_whitespace=False)


class EmbeddingResponseSerializer(serializers.Serializer):
    embedding = serializers.ListField(child=serializers.FloatField(), allow_empty=False)


class StoreHeaderSerializer(serializers.Serializer):
    format = serializers.ChoiceField(choices=['ronin-embedding-store'])
    version = serializers.IntegerField(min_value=1, max_value=1)
    d = serializers.IntegerField(min_value=1)
    encoder_id = serializers.CharField()
    count = serializers.IntegerField(min_value=0)
    index_sha256 = serializers.RegexField(r'^[0-9a-f]{64}$')
    embeddings_sha256 = serializers.RegexField(r'^[0-9a-f]{64}$')


class DetectedSerializer(serializers.ListField):
    child = serializers.CharField()

    def to_internal_value(self, data):
        value = super().to_internal_value(data)
        if len(value) != 2 or value[1] not in INTENSITIES:
            raise serializers.ValidationError('Expected [degradation_name, moderate|severe].')
        return value


class StoreRecordSerializer(serializers.Serializer):
    video_id = serializers.CharField()
    frame_index = serializers.IntegerField(min_value=0)
    path = serializers.CharField()
    description = serializers.CharField(trim_whitespace=False)
    detected = serializers.ListField(child=DetectedSerializer())
    labels = serializers.ListField(child=serializers.CharField(), required=False, default=list)
    encoder_id = serializers.CharField()
    content_hash = serializers.CharField(max_length=64, allow_blank=True)
    parse_errors = serializers.IntegerField(min_value=0, default=0)
    offset = serializers.IntegerField(min_value=0)
    length = serializers.IntegerField(min_value=1)

    def validate(self, attrs):
        for name, _ in attrs['detected']:
            if name not in attrs['description']:
                raise serializers.ValidationError(
                    {'detected': f"{name!r} is not mentioned in the description."}
                )
        return attrs
