"""
Top-1 token routing over a (possibly non-uniform) expert placement.

Tokens are fungible counts: class i's tokens are spread round-robin over its
r_i slots in ascending slot order, each slot keeps at most slot_capacity of
them and the remainder is dropped.
"""

import logging
import math
from dataclasses import dataclass
from typing import Tuple

from django.conf import settings

from cluster.exceptions import InvariantViolation, ShapeMismatch
from cluster.types import ClusterSpec, ExpertPlacement, PopularityVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoutingOutcome:
    assigned: Tuple[int, ...]
    instance_loads: Tuple[int, ...]
    dropped: Tuple[int, ...]
    survival_rate: float
    popularity_allreduce_bytes: int

    @property
    def total_assigned(self) -> int:
        return sum(self.assigned)

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped)


def slot_capacity(spec: ClusterSpec) -> int:
    """Per-slot token cap: floor(cf * tokens / (s*N)), at least 1"""
    return max(1, math.floor(spec.capacity_factor * spec.tokens_per_batch / spec.total_slots))


def class_capacity(placement: ExpertPlacement, spec: ClusterSpec, class_id: int) -> int:
    return slot_capacity(spec) * placement.replica_counts[class_id]


def route(popularity: PopularityVector, placement: ExpertPlacement, spec: ClusterSpec) -> RoutingOutcome:
    counts = popularity.counts
    if len(counts) != spec.expert_classes or placement.expert_classes != spec.expert_classes:
        raise ShapeMismatch(
            f"popularity has {len(counts)} entries, placement {placement.expert_classes} classes, "
            f"spec E = {spec.expert_classes}"
        )
    if placement.total_slots != spec.total_slots:
        raise ShapeMismatch(f"placement has {placement.total_slots} slots, spec s*N = {spec.total_slots}")

    capacity = slot_capacity(spec)
    loads = [0] * placement.total_slots
    dropped = [0] * spec.expert_classes

    for class_id, slots in placement.class_slots().items():
        tokens = counts[class_id]
        base, extra = divmod(tokens, len(slots))
        for k, slot in enumerate(slots):
            share = base + (1 if k < extra else 0)
            kept = min(share, capacity)
            loads[slot] = kept
            dropped[class_id] += share - kept
        if dropped[class_id] != max(0, tokens - len(slots) * capacity):
            raise InvariantViolation(
                f"class {class_id}: per-instance drops {dropped[class_id]} disagree with "
                f"balanced-assignment identity"
            )

    total = sum(counts)
    survival = 1.0 if total == 0 else 1.0 - sum(dropped) / total
    return RoutingOutcome(
        assigned=tuple(counts),
        instance_loads=tuple(loads),
        dropped=tuple(dropped),
        survival_rate=survival,
        popularity_allreduce_bytes=spec.nodes * spec.expert_classes * settings.ROUTER_SCALAR_BYTES,
    )
