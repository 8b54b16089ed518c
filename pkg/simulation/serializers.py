from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from rest_framework import serializers

from cluster.serializers import ClusterSpecSerializer
from cluster.types import PRESETS, ClusterSpec
from placement.serializers import PolicyConfigSerializer
from placement.services.policies import PolicyConfig
from traces.serializers import TraceGenConfigSerializer
from traces.services.generator import TraceGenConfig

from .services.simulator import SimulationOptions


@dataclass(frozen=True)
class RunConfig:
    cluster: ClusterSpec
    policies: List[PolicyConfig]
    trace_path: Optional[Path]
    generator: Optional[TraceGenConfig]
    out_dir: Optional[Path]
    options: SimulationOptions


class RunConfigSerializer(serializers.Serializer):
    """
    `simulate` config file, e.g.

        {"cluster": {...} | "preset": "paper-example",
         "policies": [{"kind": "static"}, {"kind": "interval", "interval": 10}],
         "trace": {"path": "trace.csv"} | {"generator": {"mode": "spiky", "iterations": 200}},
         "out_dir": "output", "include_metadata_latency": false}

    Generator settings default `experts` and `tokens_per_batch` to the
    cluster's. A relative trace path resolves against `base_dir` from the
    serializer context.
    """
    preset = serializers.ChoiceField(choices=sorted(PRESETS), required=False)
    cluster = serializers.DictField(required=False)
    policies = PolicyConfigSerializer(many=True, allow_empty=False)
    trace = serializers.DictField()
    out_dir = serializers.CharField(required=False, allow_blank=False)
    include_metadata_latency = serializers.BooleanField(required=False, allow_null=True, default=None)
    compute_base_seconds = serializers.FloatField(min_value=0, required=False, allow_null=True, default=None)
    metadata_seconds = serializers.FloatField(min_value=0, required=False, allow_null=True, default=None)
    check_plans = serializers.BooleanField(required=False, allow_null=True, default=None)

    def validate(self, attrs):
        if 'preset' not in attrs and 'cluster' not in attrs:
            raise serializers.ValidationError({'cluster': 'either cluster or preset is required'})
        cluster_data = {}
        if 'preset' in attrs:
            cluster_data.update(PRESETS[attrs['preset']].to_dict())
        cluster_data.update(attrs.get('cluster') or {})
        cluster = ClusterSpecSerializer(data=cluster_data)
        if not cluster.is_valid():
            raise serializers.ValidationError({'cluster': cluster.errors})
        attrs['cluster_spec'] = cluster.save()

        trace = attrs['trace']
        sources = [k for k in ('path', 'generator') if trace.get(k) is not None]
        if len(sources) != 1:
            raise serializers.ValidationError({'trace': 'exactly one of trace.path or trace.generator is required'})
        if 'generator' in sources:
            generator_data = dict(trace['generator'])
            generator_data.setdefault('experts', attrs['cluster_spec'].expert_classes)
            generator_data.setdefault('tokens_per_batch', attrs['cluster_spec'].tokens_per_batch)
            generator = TraceGenConfigSerializer(data=generator_data)
            if not generator.is_valid():
                raise serializers.ValidationError({'trace': {'generator': generator.errors}})
            attrs['generator_config'] = generator.save()
        else:
            path = Path(trace['path'])
            if not path.is_absolute():
                path = Path(self.context.get('base_dir', '.')) / path
            attrs['trace_path'] = path
        return attrs

    def create(self, validated_data):
        out_dir = validated_data.get('out_dir')
        return RunConfig(
            cluster=validated_data['cluster_spec'],
            policies=[PolicyConfigSerializer().create(p) for p in validated_data['policies']],
            trace_path=validated_data.get('trace_path'),
            generator=validated_data.get('generator_config'),
            out_dir=Path(out_dir) if out_dir else None,
            options=SimulationOptions.from_settings(
                compute_base_seconds=validated_data.get('compute_base_seconds'),
                metadata_seconds=validated_data.get('metadata_seconds'),
                include_metadata_latency=validated_data.get('include_metadata_latency'),
                check_plans=validated_data.get('check_plans'),
            ),
        )

