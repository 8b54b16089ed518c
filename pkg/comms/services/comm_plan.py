"""
Communication plans for one iteration.

Covers the locality-enhanced all-reduce of expert gradients (intra-rank add
into a representative slot, inter-rank all-reduce among representatives,
normalize, copy back), the registry of consecutive-rank groups, the
collection of gradient shards into the N optimizer partitions and the scatter
of updated weight shards onto the next placement.

Shard k of an X-byte instance holds X // N bytes plus one if k < X % N, so the
N shards of an instance always add up to X exactly.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Sequence, Tuple

import numpy as np

from cluster.exceptions import InvalidSpec, ShapeMismatch
from cluster.types import ClusterSpec, ExpertPlacement

logger = logging.getLogger(__name__)


class LinkKind(str, Enum):
    LOCAL_PCI = 'local-pci'
    LOCAL_HBM = 'local-hbm'
    NETWORK = 'network'


@dataclass(frozen=True)
class TransferTuple:
    src_rank: int
    dst_rank: int
    expert_class: int
    bytes: int
    link: LinkKind

    def to_dict(self):
        return {
            'src_rank': self.src_rank,
            'dst_rank': self.dst_rank,
            'expert_class': self.expert_class,
            'bytes': self.bytes,
            'link': self.link.value,
        }


@dataclass(frozen=True)
class ClassAllReduce:
    expert_class: int
    representatives: Dict[int, int]
    intra_reduce: Dict[int, Tuple[int, ...]]
    group: Tuple[int, ...]
    divisor: int

    @property
    def broadcast(self) -> Dict[int, Tuple[int, ...]]:
        # the representative copies the normalized result back to the slots it reduced
        return self.intra_reduce


@dataclass(frozen=True)
class AllReducePlan:
    per_class: Tuple[ClassAllReduce, ...]


@dataclass(frozen=True)
class GroupRegistry:
    """
    All intervals [a..b] of consecutive ranks with 0 <= a < b < N. Intervals
    are generated on demand; membership is a range check.
    """
    nodes: int

    def __len__(self) -> int:
        return self.nodes * (self.nodes - 1) // 2

    def __iter__(self) -> Iterator[Tuple[int, int]]:
        for length in range(2, self.nodes + 1):
            for start in range(self.nodes - length + 1):
                yield (start, start + length - 1)

    def __contains__(self, ranks) -> bool:
        ranks = sorted(set(ranks))
        if len(ranks) < 2:
            return False
        contiguous = ranks[-1] - ranks[0] + 1 == len(ranks)
        return contiguous and ranks[0] >= 0 and ranks[-1] < self.nodes


def build_group_registry(nodes: int) -> GroupRegistry:
    if nodes < 1:
        raise InvalidSpec(f"registry needs N >= 1, got {nodes}")
    return GroupRegistry(nodes=nodes)


def shard_bytes(total: int, partitions: int, index: int) -> int:
    base, remainder = divmod(total, partitions)
    return base + (1 if index < remainder else 0)


def _require_shardable(spec: ClusterSpec):
    if spec.grad_bytes < spec.nodes or spec.weight_bytes < spec.nodes:
        raise InvalidSpec(
            f"grad_bytes and weight_bytes must be >= N = {spec.nodes} to shard over every partition"
        )


def plan_allreduce(placement: ExpertPlacement, spec: ClusterSpec) -> AllReducePlan:
    per_class = []
    for class_id, slots in placement.class_slots().items():
        by_rank: Dict[int, List[int]] = {}
        for slot in slots:
            by_rank.setdefault(spec.rank_of(slot), []).append(slot)
        representatives = {rank: local[0] for rank, local in by_rank.items()}
        intra = {rank: tuple(local[1:]) for rank, local in by_rank.items()}
        per_class.append(ClassAllReduce(
            expert_class=class_id,
            representatives=representatives,
            intra_reduce=intra,
            group=tuple(sorted(by_rank)),
            divisor=len(slots),
        ))
    return AllReducePlan(per_class=tuple(per_class))


def simulate_allreduce(plan: AllReducePlan, instance_values: Mapping[int, Sequence[float]]) -> Dict[int, np.ndarray]:
    """
    Run the plan on per-slot vectors; every hosting slot ends with the mean of
    its class's instance vectors.
    """
    result: Dict[int, np.ndarray] = {}
    for entry in plan.per_class:
        slots = [s for rank in entry.group for s in (entry.representatives[rank], *entry.intra_reduce[rank])]
        missing = [s for s in slots if s not in instance_values]
        if missing:
            raise ShapeMismatch(f"class {entry.expert_class}: no values for slots {missing}")
        lengths = {len(instance_values[s]) for s in slots}
        if len(lengths) != 1:
            raise ShapeMismatch(f"class {entry.expert_class}: vector lengths differ {sorted(lengths)}")

        partial = {}
        for rank in entry.group:
            acc = np.array(instance_values[entry.representatives[rank]], dtype=np.float64)
            for slot in entry.intra_reduce[rank]:
                acc = acc + np.asarray(instance_values[slot], dtype=np.float64)
            partial[rank] = acc
        reduced = sum(partial[rank] for rank in entry.group) / entry.divisor
        for rank in entry.group:
            result[entry.representatives[rank]] = reduced.copy()
            for slot in entry.broadcast[rank]:
                result[slot] = reduced.copy()
    return result


def gradient_source(hosting_ranks: Sequence[int], rank: int) -> int:
    """Local replica when there is one, else round-robin over the hosting ranks"""
    if rank in hosting_ranks:
        return rank
    candidates = sorted(hosting_ranks)
    return candidates[rank % len(candidates)]


def plan_grad_gather(placement: ExpertPlacement, spec: ClusterSpec) -> List[TransferTuple]:
    _require_shardable(spec)
    hosting = {c: placement.hosting_ranks(c) for c in range(spec.expert_classes)}
    tuples = []
    for dst in range(spec.nodes):
        shard = shard_bytes(spec.grad_bytes, spec.nodes, dst)
        for class_id in range(spec.expert_classes):
            src = gradient_source(hosting[class_id], dst)
            tuples.append(TransferTuple(
                src_rank=src,
                dst_rank=dst,
                expert_class=class_id,
                bytes=shard,
                link=LinkKind.LOCAL_PCI if src == dst else LinkKind.NETWORK,
            ))
    return tuples


def plan_weight_scatter(next_placement: ExpertPlacement, spec: ClusterSpec) -> List[TransferTuple]:
    """
    Every slot of the next placement receives one shard from each optimizer
    partition. The shard a rank holds for a class lands once over PCIe; further
    local slots of that class get an HBM copy.
    """
    _require_shardable(spec)
    tuples = []
    for rank in range(spec.nodes):
        seen = set()
        for slot in spec.rank_slots(rank):
            class_id = next_placement.slot_assignment[slot]
            duplicate = class_id in seen
            seen.add(class_id)
            for src in range(spec.nodes):
                if src != rank:
                    link = LinkKind.NETWORK
                else:
                    link = LinkKind.LOCAL_HBM if duplicate else LinkKind.LOCAL_PCI
                tuples.append(TransferTuple(
                    src_rank=src,
                    dst_rank=rank,
                    expert_class=class_id,
                    bytes=shard_bytes(spec.weight_bytes, spec.nodes, src),
                    link=link,
                ))
    return tuples


@dataclass(frozen=True)
class CommPlan:
    spec: ClusterSpec
    placement: ExpertPlacement
    next_placement: ExpertPlacement
    allreduce: AllReducePlan
    grad_gather: Tuple[TransferTuple, ...]
    weight_scatter: Tuple[TransferTuple, ...]


@dataclass(frozen=True)
class RankBytes:
    rank: int
    grad_pci_bytes: int
    grad_net_bytes: int
    grad_hbm_bytes: int
    gather_net_bytes: int
    weight_pci_bytes: int
    weight_net_bytes: int
    weight_hbm_bytes: int

    def grad_seconds(self, spec: ClusterSpec) -> float:
        return self.grad_pci_bytes / spec.bw_pci + self.grad_net_bytes / spec.bw_net

    def weight_seconds(self, spec: ClusterSpec) -> float:
        return self.weight_pci_bytes / spec.bw_pci + self.weight_net_bytes / spec.bw_net


@dataclass(frozen=True)
class ByteTotals:
    per_rank: Tuple[RankBytes, ...]
    grad_volume: int
    weight_volume: int
    gather_net_bytes: int

    def max_grad_seconds(self, spec: ClusterSpec) -> float:
        return max(r.grad_seconds(spec) for r in self.per_rank)

    def max_weight_seconds(self, spec: ClusterSpec) -> float:
        return max(r.weight_seconds(spec) for r in self.per_rank)


def build_comm_plan(placement: ExpertPlacement, next_placement: ExpertPlacement, spec: ClusterSpec) -> CommPlan:
    """Plan for an iteration trained on `placement` that materializes `next_placement`"""
    return CommPlan(
        spec=spec,
        placement=placement,
        next_placement=next_placement,
        allreduce=plan_allreduce(placement, spec),
        grad_gather=tuple(plan_grad_gather(placement, spec)),
        weight_scatter=tuple(plan_weight_scatter(next_placement, spec)),
    )


def plan_byte_totals(plan: CommPlan) -> ByteTotals:
    """
    Exact per-rank bytes by link class, charged at the optimizer partition rank.

    Grad phase at rank d: every gathered shard lands over PCIe. Every slot the
    all-reduce plan reduces contributes one shard to d's partition, over the
    network from other ranks and in HBM from d itself. Weight phase at rank p:
    one PCIe landing per class, then p's shards travel to every slot of the
    next placement.
    """
    spec = plan.spec
    E = spec.expert_classes
    gather_pci = [0] * spec.nodes
    gather_net = [0] * spec.nodes
    for t in plan.grad_gather:
        gather_pci[t.dst_rank] += t.bytes
        if t.link == LinkKind.NETWORK:
            gather_net[t.dst_rank] += t.bytes

    weight_net = [0] * spec.nodes
    weight_hbm = [0] * spec.nodes
    for t in plan.weight_scatter:
        if t.link == LinkKind.NETWORK:
            weight_net[t.src_rank] += t.bytes
        else:
            weight_hbm[t.src_rank] += t.bytes

    # reduced slots per rank, counted from the plan
    contributors = [0] * spec.nodes
    for entry in plan.allreduce.per_class:
        for rank in entry.group:
            contributors[rank] += 1 + len(entry.intra_reduce[rank])
    reduced = sum(contributors)

    per_rank = []
    for rank in range(spec.nodes):
        grad_shard = shard_bytes(spec.grad_bytes, spec.nodes, rank)
        weight_shard = shard_bytes(spec.weight_bytes, spec.nodes, rank)
        per_rank.append(RankBytes(
            rank=rank,
            grad_pci_bytes=gather_pci[rank],
            grad_net_bytes=(reduced - contributors[rank]) * grad_shard,
            grad_hbm_bytes=contributors[rank] * grad_shard,
            gather_net_bytes=gather_net[rank],
            weight_pci_bytes=E * weight_shard,
            weight_net_bytes=weight_net[rank],
            weight_hbm_bytes=weight_hbm[rank],
        ))
    return ByteTotals(
        per_rank=tuple(per_rank),
        grad_volume=sum(r.grad_net_bytes + r.grad_hbm_bytes for r in per_rank),
        weight_volume=sum(t.bytes for t in plan.weight_scatter),
        gather_net_bytes=sum(gather_net),
    )
