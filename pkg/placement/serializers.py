from rest_framework import serializers

from .services.policies import PolicyConfig, PolicyKind


class PolicyConfigSerializer(serializers.Serializer):
    """
    One replication policy, e.g. {"kind": "interval", "interval": 10}.
    """
    kind = serializers.ChoiceField(choices=[k.value for k in PolicyKind])
    interval = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    inter_rank_only = serializers.BooleanField(default=False)

    def validate(self, attrs):
        if attrs['kind'] == PolicyKind.INTERVAL.value and attrs.get('interval') is None:
            raise serializers.ValidationError({'interval': 'interval policy requires an interval >= 1'})
        if attrs['kind'] != PolicyKind.INTERVAL.value:
            attrs['interval'] = None
        return attrs

    def create(self, validated_data):
        return PolicyConfig(
            kind=PolicyKind(validated_data['kind']),
            interval=validated_data.get('interval'),
            inter_rank_only=validated_data.get('inter_rank_only', False),
        )

    def to_representation(self, instance):
        if isinstance(instance, PolicyConfig):
            return instance.to_dict()
        return super().to_representation(instance)

