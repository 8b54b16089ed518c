"""
Replication policies compared by the simulator.

- static: uniform replication r = s*N/E for the whole run
- interval(i): recompute every i iterations; moved instances drag their
  optimizer state along, so rebalancing pays a migration
- per-iteration: recompute every iteration from the previous popularity;
  the updated weights land on the new slots during the regular weight scatter,
  so no migration is charged
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

from cluster.exceptions import InvalidConfig, MissingPopularity
from cluster.types import ClusterSpec, ExpertPlacement, PopularityVector

from .scheduler import SchedulerInput, compute_placement, contiguous_assignment, placement_churn, replica_counts

logger = logging.getLogger(__name__)


class PolicyKind(str, Enum):
    STATIC = 'static'
    INTERVAL = 'interval'
    PER_ITERATION = 'per-iteration'


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind
    interval: Optional[int] = None
    inter_rank_only: bool = False

    @property
    def label(self) -> str:
        if self.kind == PolicyKind.INTERVAL:
            name = f"interval-{self.interval}"
        else:
            name = self.kind.value
        return f"{name}-inter-rank" if self.inter_rank_only else name

    def static_replicas(self, spec: ClusterSpec) -> float:
        """r = s*N/E; real-valued when E does not divide s*N"""
        return spec.total_slots / spec.expert_classes

    def to_dict(self):
        return {
            'kind': self.kind.value,
            'interval': self.interval,
            'inter_rank_only': self.inter_rank_only,
        }


@dataclass(frozen=True)
class PlacementDecision:
    placement: ExpertPlacement
    migrated_slots: int
    rebalanced: bool


def validate_policy(policy: PolicyConfig, spec: ClusterSpec) -> PolicyConfig:
    if policy.kind == PolicyKind.INTERVAL and (policy.interval is None or policy.interval < 1):
        raise InvalidConfig(f"interval policy needs interval >= 1, got {policy.interval}")
    if policy.inter_rank_only:
        if spec.expert_classes < spec.slots_per_rank:
            raise InvalidConfig(
                f"inter_rank_only needs E >= s ({spec.expert_classes} < {spec.slots_per_rank})"
            )
        if policy.kind == PolicyKind.STATIC and spec.total_slots % spec.expert_classes:
            raise InvalidConfig(
                f"static inter_rank_only needs E | s*N ({spec.expert_classes} does not divide {spec.total_slots})"
            )
    return policy


def spread_assignment(counts: Sequence[int], spec: ClusterSpec) -> List[int]:
    """
    Lay classes out local-slot-major so that a class with r_i <= N instances
    never lands twice on the same rank.
    """
    order = [
        rank * spec.slots_per_rank + local
        for local in range(spec.slots_per_rank)
        for rank in range(spec.nodes)
    ]
    slots = [0] * spec.total_slots
    for position, class_id in zip(order, contiguous_assignment(counts)):
        slots[position] = class_id
    return slots


def inter_rank_counts(popularity: Sequence[int], spec: ClusterSpec) -> List[int]:
    """Scheduler counts with every r_i capped at N, surplus handed to the largest deficits"""
    counts = replica_counts(popularity, spec.nodes, spec.slots_per_rank)
    total = sum(popularity) or len(popularity)
    weights = popularity if sum(popularity) else [1] * len(popularity)
    goal = [(p / total) * spec.nodes * spec.slots_per_rank for p in weights]
    surplus = 0
    for i, count in enumerate(counts):
        if count > spec.nodes:
            surplus += count - spec.nodes
            counts[i] = spec.nodes
    diff = [c - g for c, g in zip(counts, goal)]
    while surplus:
        open_classes = [k for k in range(len(counts)) if counts[k] < spec.nodes]
        i = min(open_classes, key=lambda k: (diff[k], k))
        counts[i] += 1
        diff[i] += 1
        surplus -= 1
    return counts


def _build(counts: Sequence[int], spec: ClusterSpec, inter_rank_only: bool) -> ExpertPlacement:
    if inter_rank_only:
        slots = spread_assignment(counts, spec)
    else:
        slots = contiguous_assignment(counts)
    return ExpertPlacement(
        slot_assignment=tuple(slots),
        replica_counts=tuple(counts),
        slots_per_rank=spec.slots_per_rank,
    )


def uniform_placement(spec: ClusterSpec, inter_rank_only: bool = False) -> ExpertPlacement:
    uniform = [1] * spec.expert_classes
    if inter_rank_only:
        return _build(inter_rank_counts(uniform, spec), spec, True)
    return compute_placement(SchedulerInput.for_spec(PopularityVector(0, tuple(uniform)), spec))


def scheduled_placement(policy: PolicyConfig, popularity: PopularityVector, spec: ClusterSpec) -> ExpertPlacement:
    if policy.inter_rank_only:
        return _build(inter_rank_counts(popularity.counts, spec), spec, True)
    return compute_placement(SchedulerInput.for_spec(popularity, spec))


def next_placement(policy: PolicyConfig, t: int, prev_popularity: Optional[PopularityVector],
                   prev_placement: Optional[ExpertPlacement], spec: ClusterSpec) -> PlacementDecision:
    """Placement for iteration t given what was observed at t-1"""
    if policy.kind == PolicyKind.STATIC and prev_placement is not None:
        return PlacementDecision(placement=prev_placement, migrated_slots=0, rebalanced=False)
    if t == 0 or policy.kind == PolicyKind.STATIC:
        placement = uniform_placement(spec, policy.inter_rank_only)
        return PlacementDecision(placement=placement, migrated_slots=0, rebalanced=False)

    if prev_placement is None:
        raise MissingPopularity(f"iteration {t}: previous placement required")

    if policy.kind == PolicyKind.INTERVAL and t % policy.interval != 0:
        return PlacementDecision(placement=prev_placement, migrated_slots=0, rebalanced=False)

    if prev_popularity is None:
        raise MissingPopularity(f"iteration {t}: {policy.label} needs the previous popularity")

    placement = scheduled_placement(policy, prev_popularity, spec)
    churn = placement_churn(prev_placement, placement)
    if policy.kind == PolicyKind.INTERVAL:
        logger.debug(f"{policy.label}: rebalanced at iteration {t}, {churn} slots moved")
    return PlacementDecision(placement=placement, migrated_slots=churn, rebalanced=True)


def migration_bytes_per_rank(prev: ExpertPlacement, next_placement: ExpertPlacement, spec: ClusterSpec):
    """
    Network bytes landing on each rank when churned slots fetch weights plus
    an O / r_new share of their new class's optimizer state.
    """
    per_rank = defaultdict(float)
    for slot, (old, new) in enumerate(zip(prev.slot_assignment, next_placement.slot_assignment)):
        if old != new:
            share = spec.optimizer_bytes / next_placement.replica_counts[new]
            per_rank[spec.rank_of(slot)] += spec.weight_bytes + share
    return dict(per_rank)


def migration_time(policy: PolicyConfig, prev: Optional[ExpertPlacement],
                   next_placement: ExpertPlacement, spec: ClusterSpec) -> float:
    """Seconds spent migrating state at this transition (0 unless interval)"""
    if policy.kind != PolicyKind.INTERVAL or prev is None:
        return 0.0
    per_rank = migration_bytes_per_rank(prev, next_placement, spec)
    if not per_rank:
        return 0.0
    return max(per_rank.values()) / spec.bw_net
