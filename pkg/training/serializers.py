from rest_framework import serializers


class LossConfigSerializer(serializers.Serializer):
    lambda1 = serializers.FloatField(min_value=0.0, default=1.0)
    lambda2 = serializers.FloatField(min_value=0.0, default=0.01)


class TrainConfigSerializer(serializers.Serializer):
    total_iters = serializers.IntegerField(min_value=0, default=500)
    batch_size = serializers.IntegerField(min_value=1, default=2)
    crop = serializers.IntegerField(min_value=1, default=64)
    window = serializers.IntegerField(min_value=1, default=4)
    lr0 = serializers.FloatField(default=4e-4)
    lr_min = serializers.FloatField(default=1e-7)
    warmup_iters = serializers.IntegerField(min_value=0, default=0)
    betas = serializers.ListField(child=serializers.FloatField(min_value=0.0, max_value=1.0),
                                  min_length=2, max_length=2, default=[0.9, 0.999])
    eps = serializers.FloatField(min_value=0.0, default=1e-8)
    seed = serializers.IntegerField(min_value=0, required=False, allow_null=True)
    augment = serializers.BooleanField(default=True)
    clip_grad = serializers.FloatField(required=False, allow_null=True)
    checkpoint_every = serializers.IntegerField(min_value=1, required=False, allow_null=True)
    log_every = serializers.IntegerField(min_value=1, required=False, allow_null=True)

    def validate_clip_grad(self, value):
        if value is not None and value <= 0:
            raise serializers.ValidationError('Gradient clipping norm must be positive.')
        return value

    def validate(self, attrs):
        if not attrs['lr0'] > attrs['lr_min'] > 0:
            raise serializers.ValidationError('Learning rates must satisfy lr0 > lr_min > 0.')
        return attrs
