"""
Closed-form memory, data-volume and communication-time model.

Times are per rank and per phase with the PCIe and network legs serialized.
`static` is uniform replication with each class's optimizer sharded over its
replicas; `dynamic` is the decoupled design with every class's optimizer
sharded over all N nodes. The `hbm-only` variant keeps the optimizer in
accelerator memory, i.e. BW_pci -> infinity.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List

from cluster.exceptions import InvalidK
from cluster.types import ClusterSpec

logger = logging.getLogger(__name__)


class Variant(str, Enum):
    OFFLOADED = 'offloaded'
    HBM_ONLY = 'hbm-only'


@dataclass(frozen=True)
class PhaseTimes:
    t_grad: float
    t_weight: float

    @property
    def total(self) -> float:
        return self.t_grad + self.t_weight


@dataclass(frozen=True)
class CostReport:
    variant: Variant
    mem_footprint_bytes: int
    data_grad_bytes: int
    data_weight_bytes: int
    t_grad_static: float
    t_weight_static: float
    t_grad_dynamic: float
    t_weight_dynamic: float
    overhead_ratio: float


def mem_footprint(spec: ClusterSpec) -> int:
    """E*O: (E/r)*r*O for the static design, (E/N)*N*O for the decoupled one"""
    return spec.expert_classes * spec.optimizer_bytes


def data_volume(spec: ClusterSpec) -> Dict[str, int]:
    total_slots = spec.total_slots
    return {
        'grad': total_slots * spec.grad_bytes,
        'weight': total_slots * spec.weight_bytes,
    }


def _pci_term(spec: ClusterSpec, size: int, variant: Variant) -> float:
    if variant == Variant.HBM_ONLY:
        return 0.0
    return (spec.expert_classes / spec.nodes) * (size / spec.bw_pci)


def comm_time_static(spec: ClusterSpec, variant: Variant = Variant.OFFLOADED) -> PhaseTimes:
    # (E/N)(X/BW_pci) + ((sN - E)/N)(X/BW_net); r = sN/E need not be integral
    remote = (spec.total_slots - spec.expert_classes) / spec.nodes

    def phase(size):
        return _pci_term(spec, size, variant) + remote * (size / spec.bw_net)

    return PhaseTimes(t_grad=phase(spec.grad_bytes), t_weight=phase(spec.weight_bytes))


def comm_time_dynamic(spec: ClusterSpec, variant: Variant = Variant.OFFLOADED) -> PhaseTimes:
    # (E/N)(X/BW_pci) + ((sN - s)/N)(X/BW_net), independent of r_i
    remote = (spec.total_slots - spec.slots_per_rank) / spec.nodes

    def phase(size):
        return _pci_term(spec, size, variant) + remote * (size / spec.bw_net)

    return PhaseTimes(t_grad=phase(spec.grad_bytes), t_weight=phase(spec.weight_bytes))


def overhead_ratio(spec: ClusterSpec, variant: Variant = Variant.OFFLOADED) -> float:
    """Relative extra communication of the decoupled design over the static one"""
    E, s = spec.expert_classes, spec.slots_per_rank
    if E == s:
        return 0.0
    if variant == Variant.HBM_ONLY:
        denominator = spec.total_slots - E
    else:
        denominator = spec.total_slots - E * (1 - spec.bw_net / spec.bw_pci)
    if denominator == 0:
        # static baseline moves nothing over the network
        return math.inf
    return (E - s) / denominator


def k_partition_bound(spec: ClusterSpec, k: int) -> PhaseTimes:
    """
    Upper bound on per-rank time when the cluster is split into k groups, each
    sharding the optimizer of E/k classes over its N/k nodes.
    """
    if k < 1 or spec.nodes % k or spec.expert_classes % k:
        raise InvalidK(f"k = {k} must be >= 1 and divide N = {spec.nodes} and E = {spec.expert_classes}")
    remote = k * (spec.total_slots - spec.slots_per_rank) / spec.nodes

    def phase(size):
        return (spec.expert_classes / spec.nodes) * (size / spec.bw_pci) + remote * (size / spec.bw_net)

    return PhaseTimes(t_grad=phase(spec.grad_bytes), t_weight=phase(spec.weight_bytes))


def valid_partition_counts(spec: ClusterSpec, candidates: List[int]) -> List[int]:
    return [k for k in candidates if k >= 1 and spec.nodes % k == 0 and spec.expert_classes % k == 0]


def migration_cost(expert_count_moved: int, spec: ClusterSpec, include_optimizer: bool = True,
                   include_weights: bool = True) -> float:
    """Seconds to move whole experts over the network"""
    per_expert = 0
    if include_weights:
        per_expert += spec.weight_bytes
    if include_optimizer:
        per_expert += spec.optimizer_bytes
    return expert_count_moved * per_expert / spec.bw_net


def cost_report(spec: ClusterSpec, variant: Variant = Variant.OFFLOADED) -> CostReport:
    static = comm_time_static(spec, variant)
    dynamic = comm_time_dynamic(spec, variant)
    volume = data_volume(spec)
    logger.debug(f"Cost report for N={spec.nodes} s={spec.slots_per_rank} E={spec.expert_classes} ({variant.value})")
    return CostReport(
        variant=variant,
        mem_footprint_bytes=mem_footprint(spec),
        data_grad_bytes=volume['grad'],
        data_weight_bytes=volume['weight'],
        t_grad_static=static.t_grad,
        t_weight_static=static.t_weight,
        t_grad_dynamic=dynamic.t_grad,
        t_weight_dynamic=dynamic.t_weight,
        overhead_ratio=overhead_ratio(spec, variant),
    )
