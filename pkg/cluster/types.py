"""
Core domain types: the static cluster description, expert placements and
expert-popularity traces.

All types are frozen dataclasses; byte quantities are Python ints and times
are float seconds. Global slot j lives on rank j // s at local slot j % s.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .exceptions import InvalidPlacement, InvalidSpec, ShapeMismatch

logger = logging.getLogger(__name__)

GB = 10 ** 9


@dataclass(frozen=True)
class ClusterSpec:
    """
    Static cluster description, one rank per node with `slots_per_rank`
    expert slots each.
    """
    nodes: int
    slots_per_rank: int
    expert_classes: int
    bw_pci: float
    bw_net: float
    grad_bytes: int
    weight_bytes: int
    optimizer_bytes: int
    tokens_per_batch: int
    capacity_factor: float = 1.0

    @property
    def total_slots(self) -> int:
        return self.slots_per_rank * self.nodes

    def rank_of(self, slot: int) -> int:
        return slot // self.slots_per_rank

    def rank_slots(self, rank: int) -> range:
        start = rank * self.slots_per_rank
        return range(start, start + self.slots_per_rank)

    def to_dict(self) -> Dict:
        return {
            'nodes': self.nodes,
            'slots_per_rank': self.slots_per_rank,
            'expert_classes': self.expert_classes,
            'bw_pci': self.bw_pci,
            'bw_net': self.bw_net,
            'grad_bytes': self.grad_bytes,
            'weight_bytes': self.weight_bytes,
            'optimizer_bytes': self.optimizer_bytes,
            'tokens_per_batch': self.tokens_per_batch,
            'capacity_factor': self.capacity_factor,
        }


def validate_cluster(spec: ClusterSpec) -> ClusterSpec:
    """Return `spec` unchanged if every invariant holds, else raise InvalidSpec"""
    checks = [
        (spec.nodes >= 1, 'nodes >= 1'),
        (spec.slots_per_rank >= 1, 'slots_per_rank >= 1'),
        (spec.expert_classes >= 1, 'expert_classes >= 1'),
        (spec.expert_classes <= spec.slots_per_rank * spec.nodes, 'E <= s*N'),
        (spec.bw_pci > 0, 'bw_pci > 0'),
        (spec.bw_net > 0, 'bw_net > 0'),
        (spec.grad_bytes > 0, 'grad_bytes > 0'),
        (spec.weight_bytes > 0, 'weight_bytes > 0'),
        (spec.optimizer_bytes > 0, 'optimizer_bytes > 0'),
        (spec.tokens_per_batch >= 0, 'tokens_per_batch >= 0'),
        (spec.capacity_factor > 0, 'capacity_factor > 0'),
    ]
    for holds, invariant in checks:
        if not holds:
            raise InvalidSpec(f"violated invariant: {invariant}")
    return spec


# GPT3-175B-sized experts (G = W = 3.375 GB, O = 27 GB), 64 classes,
# 2048 nodes with 2 slots each, 64 GB/s PCIe and 400 Gbps network.
PRESETS = {
    'paper-example': ClusterSpec(
        nodes=2048,
        slots_per_rank=2,
        expert_classes=64,
        bw_pci=64 * GB,
        bw_net=50 * GB,
        grad_bytes=3_375_000_000,
        weight_bytes=3_375_000_000,
        optimizer_bytes=27 * GB,
        tokens_per_batch=32768,
        capacity_factor=1.0,
    ),
}


@dataclass(frozen=True)
class ExpertPlacement:
    """Assignment of expert classes to the s·N global slots"""
    slot_assignment: Tuple[int, ...]
    replica_counts: Tuple[int, ...]
    slots_per_rank: int

    @property
    def total_slots(self) -> int:
        return len(self.slot_assignment)

    @property
    def expert_classes(self) -> int:
        return len(self.replica_counts)

    @property
    def nodes(self) -> int:
        return self.total_slots // self.slots_per_rank

    def rank_of(self, slot: int) -> int:
        return slot // self.slots_per_rank

    def slots_of(self, class_id: int) -> List[int]:
        return [j for j, c in enumerate(self.slot_assignment) if c == class_id]

    def class_slots(self) -> Dict[int, List[int]]:
        """Slots per class in ascending slot order"""
        grouped: Dict[int, List[int]] = {c: [] for c in range(self.expert_classes)}
        for j, c in enumerate(self.slot_assignment):
            grouped[c].append(j)
        return grouped

    def hosting_ranks(self, class_id: int) -> List[int]:
        return sorted({self.rank_of(j) for j in self.slots_of(class_id)})

    def local_counts(self, rank: int) -> Counter:
        """r_{i|rank}: instances of each class hosted on `rank`"""
        start = rank * self.slots_per_rank
        return Counter(self.slot_assignment[start:start + self.slots_per_rank])


def placement_from_slots(slot_assignment: Sequence[int], spec: ClusterSpec) -> ExpertPlacement:
    """
    Build an ExpertPlacement from a per-slot class list, deriving the replica
    counts r_i and checking that every class is reachable.
    """
    if len(slot_assignment) != spec.total_slots:
        raise InvalidPlacement(
            f"slot_assignment has {len(slot_assignment)} entries, expected s*N = {spec.total_slots}"
        )
    counts = [0] * spec.expert_classes
    for j, class_id in enumerate(slot_assignment):
        if not 0 <= class_id < spec.expert_classes:
            raise InvalidPlacement(f"slot {j}: class id {class_id} out of range [0, {spec.expert_classes})")
        counts[class_id] += 1
    for class_id, count in enumerate(counts):
        if count < 1:
            raise InvalidPlacement(f"class {class_id} absent (r_i >= 1 violated)")
    return ExpertPlacement(
        slot_assignment=tuple(int(c) for c in slot_assignment),
        replica_counts=tuple(counts),
        slots_per_rank=spec.slots_per_rank,
    )


@dataclass(frozen=True)
class PopularityVector:
    """Per-class token counts assigned by the router at one iteration"""
    iteration: int
    counts: Tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)


def popularity_for(spec: ClusterSpec, counts: Sequence[int], iteration: int = 0) -> PopularityVector:
    """Validate `counts` against `spec` and wrap them"""
    if len(counts) != spec.expert_classes:
        raise ShapeMismatch(f"popularity has {len(counts)} entries, expected E = {spec.expert_classes}")
    if any(c < 0 for c in counts):
        raise ShapeMismatch("popularity entries must be >= 0")
    if sum(counts) > spec.tokens_per_batch:
        logger.warning(
            f"Iteration {iteration}: {sum(counts)} routed tokens exceed tokens_per_batch {spec.tokens_per_batch}"
        )
    return PopularityVector(iteration=iteration, counts=tuple(int(c) for c in counts))


@dataclass(frozen=True)
class Trace:
    """Ordered per-iteration popularity rows, iterations 0..T-1"""
    expert_classes: int
    tokens_per_batch: int
    rows: Tuple[PopularityVector, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for t, row in enumerate(self.rows):
            if row.iteration != t:
                raise ShapeMismatch(f"trace row {t} carries iteration {row.iteration}")
            if len(row.counts) != self.expert_classes:
                raise ShapeMismatch(
                    f"trace row {t} has {len(row.counts)} entries, expected {self.expert_classes}"
                )

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, t: int) -> PopularityVector:
        return self.rows[t]

    @classmethod
    def from_counts(cls, rows: Sequence[Sequence[int]], tokens_per_batch: int,
                    expert_classes: Optional[int] = None) -> 'Trace':
        if expert_classes is None:
            expert_classes = len(rows[0]) if rows else 0
        return cls(
            expert_classes=expert_classes,
            tokens_per_batch=tokens_per_batch,
            rows=tuple(
                PopularityVector(iteration=t, counts=tuple(int(c) for c in row))
                for t, row in enumerate(rows)
            ),
        )


def with_overrides(spec: ClusterSpec, **changes) -> ClusterSpec:
    """Copy of `spec` with fields replaced, re-validated"""
    return validate_cluster(replace(spec, **changes))
