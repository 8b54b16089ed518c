from rest_framework import serializers

from .exceptions import InvalidSpec
from .types import ClusterSpec, validate_cluster


class ClusterSpecSerializer(serializers.Serializer):
    """
    Flat JSON form of a ClusterSpec (snake_case, bytes and bytes/second).
    """
    nodes = serializers.IntegerField(min_value=1)
    slots_per_rank = serializers.IntegerField(min_value=1)
    expert_classes = serializers.IntegerField(min_value=1)
    bw_pci = serializers.FloatField()
    bw_net = serializers.FloatField()
    grad_bytes = serializers.IntegerField()
    weight_bytes = serializers.IntegerField()
    optimizer_bytes = serializers.IntegerField()
    tokens_per_batch = serializers.IntegerField(min_value=0)
    capacity_factor = serializers.FloatField(default=1.0)

    def validate(self, attrs):
        try:
            validate_cluster(ClusterSpec(**attrs))
        except InvalidSpec as e:
            field = _field_of(str(e))
            raise serializers.ValidationError({field: str(e)})
        return attrs

    def create(self, validated_data):
        return ClusterSpec(**validated_data)

    def to_representation(self, instance):
        if isinstance(instance, ClusterSpec):
            return instance.to_dict()
        return super().to_representation(instance)


def _field_of(message):
    """Map an invariant message back to the field it concerns"""
    if 'E <= s*N' in message:
        return 'expert_classes'
    invariant = message.rsplit(':', 1)[-1].strip()
    return invariant.split(' ', 1)[0]


class PlacementSerializer(serializers.Serializer):
    slot_assignment = serializers.ListField(child=serializers.IntegerField(min_value=0))
    replica_counts = serializers.ListField(child=serializers.IntegerField(min_value=1))
    slots_per_rank = serializers.IntegerField(min_value=1)
    ranks = serializers.SerializerMethodField()

    def get_ranks(self, obj):
        s = obj.slots_per_rank
        return [list(obj.slot_assignment[rank * s:(rank + 1) * s]) for rank in range(obj.nodes)]
