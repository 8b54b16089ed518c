from rest_framework import serializers

from .services.generator import TraceGenConfig, TraceMode


class TraceGenConfigSerializer(serializers.Serializer):
    """
    Generator settings; knobs left out fall back to TRACEGEN_DEFAULT_*.
    """
    experts = serializers.IntegerField(min_value=1)
    iterations = serializers.IntegerField(min_value=1)
    mode = serializers.ChoiceField(choices=[m.value for m in TraceMode], default=TraceMode.WALK.value)
    tokens_per_batch = serializers.IntegerField(min_value=0, required=False)
    volatility = serializers.FloatField(min_value=0, required=False)
    spike_probability = serializers.FloatField(min_value=0, max_value=1, required=False)
    seed = serializers.IntegerField(min_value=0, required=False)
    initial_spread = serializers.FloatField(min_value=0, required=False)

    def create(self, validated_data):
        data = dict(validated_data)
        return TraceGenConfig.with_defaults(
            experts=data.pop('experts'),
            iterations=data.pop('iterations'),
            mode=data.pop('mode'),
            **data,
        )

    def to_representation(self, instance):
        if isinstance(instance, TraceGenConfig):
            return instance.to_dict()
        return super().to_representation(instance)
