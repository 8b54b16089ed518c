"""
Expert Placement Scheduler.

Replica counts follow the previous iteration's popularity: every class gets
a share of the N·s slots proportional to its token count, at least one
instance each, followed by a rounding correction. Instances of a class are
laid out contiguously so a class spans a consecutive range of ranks.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from cluster.exceptions import InvalidInput, ShapeMismatch
from cluster.types import ClusterSpec, ExpertPlacement, PopularityVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SchedulerInput:
    popularity: PopularityVector
    world_size: int
    slots_per_rank: int
    expert_classes: int

    @classmethod
    def for_spec(cls, popularity: PopularityVector, spec: ClusterSpec) -> 'SchedulerInput':
        return cls(
            popularity=popularity,
            world_size=spec.nodes,
            slots_per_rank=spec.slots_per_rank,
            expert_classes=spec.expert_classes,
        )


def replica_counts(popularity: Sequence[int], world_size: int, slots_per_rank: int) -> List[int]:
    """
    Instance count per class over world_size * slots_per_rank slots.

    Ties in argmax/argmin go to the lowest index. While over-allocated, a
    class already at one instance only has its diff lowered and never changes
    which class is trimmed next, so those steps are skipped: only classes with
    more than one instance compete for the next decrement.
    """
    E = len(popularity)
    total_slots = world_size * slots_per_rank
    if E > total_slots:
        raise InvalidInput(f"E = {E} exceeds N*s = {total_slots}")
    popularity = np.asarray(popularity, dtype=np.int64)
    if popularity.sum() == 0:
        popularity = np.ones(E, dtype=np.int64)

    goal = (popularity / popularity.sum()) * world_size * slots_per_rank
    counts = np.floor(np.maximum(goal, 1.0))
    diff = counts - goal

    for _ in range(int(counts.sum()) - total_slots):
        i = int(np.argmax(np.where(counts > 1, diff, -np.inf)))
        counts[i] -= 1
        diff[i] -= 1
    for _ in range(total_slots - int(counts.sum())):
        i = int(np.argmin(diff))
        counts[i] += 1
        diff[i] += 1
    return [int(c) for c in counts]


def contiguous_assignment(counts: Sequence[int]) -> List[int]:
    slots = []
    for class_id, count in enumerate(counts):
        slots.extend([class_id] * count)
    return slots


def compute_placement(scheduler_input: SchedulerInput) -> ExpertPlacement:
    """Next iteration's placement from the captured popularity"""
    popularity = scheduler_input.popularity.counts
    if len(popularity) != scheduler_input.expert_classes:
        raise ShapeMismatch(
            f"popularity has {len(popularity)} entries, expected E = {scheduler_input.expert_classes}"
        )
    if sum(popularity) == 0:
        logger.warning(
            f"Iteration {scheduler_input.popularity.iteration}: zero popularity, using uniform placement"
        )
    counts = replica_counts(popularity, scheduler_input.world_size, scheduler_input.slots_per_rank)
    return ExpertPlacement(
        slot_assignment=tuple(contiguous_assignment(counts)),
        replica_counts=tuple(counts),
        slots_per_rank=scheduler_input.slots_per_rank,
    )


def placement_churn(prev: ExpertPlacement, next_placement: ExpertPlacement) -> int:
    """Number of global slots whose class changes between two placements"""
    if prev.total_slots != next_placement.total_slots or prev.expert_classes != next_placement.expert_classes:
        raise ShapeMismatch(
            f"placements differ in shape: {prev.total_slots}/{prev.expert_classes} "
            f"vs {next_placement.total_slots}/{next_placement.expert_classes}"
        )
    return sum(1 for a, b in zip(prev.slot_assignment, next_placement.slot_assignment) if a != b)
