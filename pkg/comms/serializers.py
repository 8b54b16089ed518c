import math

from rest_framework import serializers

from cluster.serializers import PlacementSerializer
from cluster.types import GB

from .services.comm_plan import CommPlan, plan_byte_totals
from .services.cost_model import CostReport, Variant


class CostReportSerializer(serializers.Serializer):
    variant = serializers.ChoiceField(choices=[v.value for v in Variant])
    mem_footprint_bytes = serializers.IntegerField()
    data_grad_bytes = serializers.IntegerField()
    data_weight_bytes = serializers.IntegerField()
    t_grad_static = serializers.FloatField()
    t_weight_static = serializers.FloatField()
    t_grad_dynamic = serializers.FloatField()
    t_weight_dynamic = serializers.FloatField()
    # null when the static baseline moves nothing over the network
    overhead_ratio = serializers.FloatField(allow_null=True)

    def to_representation(self, instance):
        data = super().to_representation(instance)
        if isinstance(instance, CostReport):
            data['variant'] = instance.variant.value
            data['mem_footprint_gb'] = instance.mem_footprint_bytes / GB
            if not math.isfinite(instance.overhead_ratio):
                data['overhead_ratio'] = None
        return data


class TransferTupleSerializer(serializers.Serializer):
    src_rank = serializers.IntegerField()
    dst_rank = serializers.IntegerField()
    expert_class = serializers.IntegerField()
    bytes = serializers.IntegerField()
    link = serializers.SerializerMethodField()

    def get_link(self, obj):
        return obj.link.value


class CommPlanSerializer(serializers.Serializer):
    """
    Inspection dump of one iteration's plan: all-reduce groups, transfer
    tuples and per-rank byte totals.
    """

    def to_representation(self, instance: CommPlan):
        totals = plan_byte_totals(instance)
        return {
            'placement': PlacementSerializer(instance.placement).data,
            'next_placement': PlacementSerializer(instance.next_placement).data,
            'allreduce': [
                {
                    'expert_class': entry.expert_class,
                    'group': list(entry.group),
                    'representatives': {str(rank): slot for rank, slot in entry.representatives.items()},
                    'intra_reduce': {str(rank): list(slots) for rank, slots in entry.intra_reduce.items()},
                    'divisor': entry.divisor,
                }
                for entry in instance.allreduce.per_class
            ],
            'grad_gather': TransferTupleSerializer(instance.grad_gather, many=True).data,
            'weight_scatter': TransferTupleSerializer(instance.weight_scatter, many=True).data,
            'per_rank': [
                {
                    'rank': r.rank,
                    'grad_pci_bytes': r.grad_pci_bytes,
                    'grad_net_bytes': r.grad_net_bytes,
                    'grad_hbm_bytes': r.grad_hbm_bytes,
                    'gather_net_bytes': r.gather_net_bytes,
                    'weight_pci_bytes': r.weight_pci_bytes,
                    'weight_net_bytes': r.weight_net_bytes,
                    'weight_hbm_bytes': r.weight_hbm_bytes,
                }
                for r in totals.per_rank
            ],
            'grad_volume': totals.grad_volume,
            'weight_volume': totals.weight_volume,
            'gather_net_bytes': totals.gather_net_bytes,
        }
