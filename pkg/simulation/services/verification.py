"""
Oracle suite behind `manage.py verify`.

Every check compares the library against an independent oracle (a literal
numpy transcription of the placement listing, a direct mean, brute-force
tuple sums) or against the published worked-example figures. Budgets come
from the VERIFY_* settings.
"""

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from django.conf import settings

from cluster.exceptions import ReplicationError
from cluster.types import GB, PRESETS, ClusterSpec, ExpertPlacement, PopularityVector, placement_from_slots
from comms.services import comm_plan, cost_model
from placement.services import scheduler
from placement.services.policies import PolicyConfig, PolicyKind
from simulation.services import simulator
from traces.services.generator import TraceGenConfig, TraceMode, generate

logger = logging.getLogger(__name__)


class CheckFailed(Exception):
    pass


def expect(condition, message):
    if not condition:
        raise CheckFailed(message)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def to_dict(self):
        return {'name': self.name, 'passed': self.passed, 'detail': self.detail, 'seconds': self.seconds}


def listing_oracle(popularity: Sequence[int], world_size: int, slots_per_rank: int) -> List[int]:
    """
    Placement listing transcribed line by line in numpy. A zero popularity
    vector is replaced by ones first, as the scheduler does. The running
    total stands in for re-summing exp_counts on every pass.
    """
    popularity = np.asarray(popularity, dtype=np.int64)
    E = len(popularity)
    G, S = world_size, slots_per_rank
    if popularity.sum() == 0:
        popularity = np.ones(E, dtype=np.int64)

    goal = (popularity / popularity.sum()) * G * S
    exp_counts = np.maximum(goal, [1] * E)
    exp_counts = np.floor(exp_counts)

    diff = exp_counts - goal
    allocated = int(exp_counts.sum())
    while allocated > G * S:
        i = np.argmax(diff)
        if exp_counts[i] > 1:
            exp_counts[i] -= 1
            allocated -= 1
        diff[i] -= 1
    while allocated < G * S:
        i = np.argmin(diff)
        exp_counts[i] += 1
        allocated += 1
        diff[i] += 1
    return [int(c) for c in exp_counts]


def mean_oracle(values: Sequence[Sequence[float]]) -> np.ndarray:
    return np.mean(np.asarray(values, dtype=np.float64), axis=0)


def fuzz_popularity(rng: np.random.Generator, E: int) -> List[int]:
    shape = rng.integers(4)
    if shape == 0:
        counts = rng.integers(0, 1000, E)
    elif shape == 1:
        counts = np.floor(rng.exponential(200.0, E) ** 2)
    elif shape == 2:
        counts = np.zeros(E, dtype=np.int64)
        counts[rng.integers(E)] = rng.integers(1, 100000)
    else:
        counts = np.zeros(E, dtype=np.int64)
    return [int(c) for c in counts]


def fuzz_factorization(rng: np.random.Generator, E: int, max_slots: int):
    """(world_size, slots_per_rank) with E <= N*s <= max_slots"""
    total = int(rng.integers(E, max_slots + 1))
    divisors = [d for d in range(1, total + 1) if total % d == 0]
    slots_per_rank = int(divisors[rng.integers(len(divisors))])
    return total // slots_per_rank, slots_per_rank


def fuzz_spec(rng: np.random.Generator, max_nodes: int = 8, max_slots: int = 4) -> ClusterSpec:
    nodes = int(rng.integers(1, max_nodes + 1))
    slots = int(rng.integers(1, max_slots + 1))
    return ClusterSpec(
        nodes=nodes,
        slots_per_rank=slots,
        expert_classes=int(rng.integers(1, nodes * slots + 1)),
        bw_pci=64 * GB,
        bw_net=50 * GB,
        grad_bytes=int(rng.integers(nodes, 10 ** 9)),
        weight_bytes=int(rng.integers(nodes, 10 ** 9)),
        optimizer_bytes=int(rng.integers(1, 10 ** 10)),
        tokens_per_batch=4096,
    )


def fuzz_placement(rng: np.random.Generator, spec: ClusterSpec) -> ExpertPlacement:
    """Uniformly shuffled slot assignment with every class present"""
    slots = list(range(spec.expert_classes))
    slots += [int(c) for c in rng.integers(0, spec.expert_classes, spec.total_slots - spec.expert_classes)]
    rng.shuffle(slots)
    return placement_from_slots(slots, spec)


def scheduled_fuzz_placement(rng: np.random.Generator, spec: ClusterSpec) -> ExpertPlacement:
    popularity = PopularityVector(0, tuple(fuzz_popularity(rng, spec.expert_classes)))
    return scheduler.compute_placement(scheduler.SchedulerInput.for_spec(popularity, spec))


@contextmanager
def quiet_logger(name: str, level: int = logging.ERROR):
    """Raise a logger's level for the duration of the block"""
    target = logging.getLogger(name)
    previous = target.level
    target.setLevel(level)
    try:
        yield target
    finally:
        target.setLevel(previous)


def source_balance_ok(tuples, placement: ExpertPlacement) -> bool:
    for class_id in range(placement.expert_classes):
        hosting = placement.hosting_ranks(class_id)
        picks = {rank: 0 for rank in hosting}
        for t in tuples:
            if t.expert_class == class_id and t.src_rank != t.dst_rank:
                picks[t.src_rank] += 1
        if picks and max(picks.values()) - min(picks.values()) > 1:
            return False
    return True


class VerificationSuite:
    CHECKS = (
        ('golden-analytic-numbers', 'check_golden_numbers'),
        ('scheduler-oracle', 'check_scheduler_oracle'),
        ('volume-invariance', 'check_volume_invariance'),
        ('allreduce-and-registry', 'check_allreduce'),
        ('gradient-gather', 'check_gradient_gather'),
        ('drop-ordering', 'check_drop_ordering'),
        ('latency-spikes', 'check_latency_spikes'),
        ('k-partition-bound', 'check_k_partition_bound'),
    )

    def __init__(self, seed: Optional[int] = None):
        self.seed = settings.VERIFY_SEED if seed is None else seed
        self.scheduler_cases = settings.VERIFY_SCHEDULER_CASES
        self.volume_specs = settings.VERIFY_VOLUME_SPECS
        self.volume_placements = settings.VERIFY_VOLUME_PLACEMENTS
        self.allreduce_cases = settings.VERIFY_ALLREDUCE_CASES
        self.gather_cases = settings.VERIFY_GATHER_CASES
        self.trace_iterations = settings.VERIFY_TRACE_ITERATIONS
        self.trace_seeds = list(settings.VERIFY_TRACE_SEEDS)
        self._policy_reports = None

    def rng(self, offset: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed + offset))

    @classmethod
    def check_names(cls) -> List[str]:
        return [name for name, _ in cls.CHECKS]

    @property
    def checks(self) -> Dict[str, Callable[[], str]]:
        return {name: getattr(self, method) for name, method in self.CHECKS}

    def run(self, names: Optional[Sequence[str]] = None) -> List[CheckResult]:
        with quiet_logger(scheduler.__name__):
            return self._run(names)

    def _run(self, names: Optional[Sequence[str]]) -> List[CheckResult]:
        results = []
        for name, check in self.checks.items():
            if names and name not in names:
                continue
            started = time.perf_counter()
            try:
                detail = check()
                passed = True
            except CheckFailed as e:
                detail, passed = str(e), False
            except ReplicationError as e:
                detail, passed = f"{type(e).__name__}: {e}", False
            elapsed = time.perf_counter() - started
            results.append(CheckResult(name=name, passed=passed, detail=detail, seconds=elapsed))
            log = logger.info if passed else logger.error
            log(f"verify {name}: {'PASS' if passed else 'FAIL'} ({elapsed:.2f}s) {detail}")
        return results

    def check_golden_numbers(self) -> str:
        spec = PRESETS['paper-example']
        mem = cost_model.mem_footprint(spec)
        expect(mem == 1728 * GB, f"mem_footprint {mem} != 1728 GB")
        volume = cost_model.data_volume(spec)
        expect(volume['grad'] == 13824 * GB and volume['weight'] == 13824 * GB, f"data_volume {volume}")
        static = cost_model.comm_time_static(spec).total
        dynamic = cost_model.comm_time_dynamic(spec).total
        expect(abs(static - 0.26908) <= 1e-4, f"static total {static:.6f}s != 0.26908s")
        expect(abs(dynamic - 0.27316) <= 1e-4, f"dynamic total {dynamic:.6f}s != 0.27316s")
        offloaded = 100 * cost_model.overhead_ratio(spec, cost_model.Variant.OFFLOADED)
        hbm_only = 100 * cost_model.overhead_ratio(spec, cost_model.Variant.HBM_ONLY)
        expect(abs(offloaded - 1.519) <= 0.01, f"offloaded overhead {offloaded:.4f}% != 1.519%")
        expect(abs(hbm_only - 1.538) <= 0.01, f"hbm-only overhead {hbm_only:.4f}% != 1.538%")
        weights = cost_model.migration_cost(1, spec, include_optimizer=False)
        optimizer = cost_model.migration_cost(1, spec, include_optimizer=True, include_weights=False)
        expect(abs(weights - 0.0675) <= 1e-6, f"weight migration {weights}s != 0.0675s")
        expect(abs(optimizer - 0.54) <= 1e-6, f"optimizer migration {optimizer}s != 0.54s")
        return f"T_static {static:.5f}s, T_dynamic {dynamic:.5f}s, overhead {offloaded:.3f}%/{hbm_only:.3f}%"

    def check_scheduler_oracle(self) -> str:
        rng = self.rng(2)
        for case in range(self.scheduler_cases):
            E = int(rng.integers(1, 65))
            world_size, slots_per_rank = fuzz_factorization(rng, E, 256)
            popularity = fuzz_popularity(rng, E)
            counts = scheduler.replica_counts(popularity, world_size, slots_per_rank)
            expected = listing_oracle(popularity, world_size, slots_per_rank)
            expect(counts == expected, f"case {case}: pop={popularity} G={world_size} S={slots_per_rank}: {counts} != {expected}")
            expect(sum(counts) == world_size * slots_per_rank and min(counts) >= 1, f"case {case}: counts {counts}")
            slots = scheduler.contiguous_assignment(counts)
            expect(all(a <= b for a, b in zip(slots, slots[1:])), f"case {case}: assignment not contiguous")
        return f"{self.scheduler_cases} cases match the listing"

    def check_volume_invariance(self) -> str:
        rng = self.rng(3)
        for _ in range(self.volume_specs):
            spec = fuzz_spec(rng)
            for _ in range(self.volume_placements):
                placement = fuzz_placement(rng, spec)
                next_placement = fuzz_placement(rng, spec)
                plan = comm_plan.build_comm_plan(placement, next_placement, spec)
                totals = comm_plan.plan_byte_totals(plan)
                expect(
                    totals.grad_volume == spec.total_slots * spec.grad_bytes,
                    f"grad volume {totals.grad_volume} != sNG {spec.total_slots * spec.grad_bytes} for {spec}",
                )
                gathered = sum(t.bytes for t in plan.grad_gather)
                expect(
                    gathered == spec.expert_classes * spec.grad_bytes,
                    f"gathered {gathered} != E*G {spec.expert_classes * spec.grad_bytes} for {spec}",
                )
                scattered = sum(t.bytes for t in plan.weight_scatter)
                expect(
                    scattered == totals.weight_volume == spec.total_slots * spec.weight_bytes,
                    f"weight volume {scattered} != sNW {spec.total_slots * spec.weight_bytes} for {spec}",
                )
        return f"{self.volume_specs} specs x {self.volume_placements} placements"

    def check_allreduce(self) -> str:
        rng = self.rng(4)
        worst = 0.0
        for case in range(self.allreduce_cases):
            spec = fuzz_spec(rng)
            if rng.integers(2):
                placement = fuzz_placement(rng, spec)
            else:
                placement = scheduled_fuzz_placement(rng, spec)
            length = int(rng.integers(1, 9))
            values = {j: rng.normal(0.0, 100.0, length) for j in range(spec.total_slots)}
            result = comm_plan.simulate_allreduce(comm_plan.plan_allreduce(placement, spec), values)
            for class_id, slots in placement.class_slots().items():
                expected = mean_oracle([values[j] for j in slots])
                # relative to the largest input magnitude; the mean itself may cancel to ~0
                scale = max(float(np.max(np.abs([values[j] for j in slots]))), 1e-300)
                for j in slots:
                    error = float(np.max(np.abs(result[j] - expected))) / scale
                    worst = max(worst, error)
                    expect(error <= 1e-12, f"case {case}: slot {j} relative error {error:.3g}")

        for nodes in range(2, 65):
            registry = comm_plan.build_group_registry(nodes)
            expect(len(registry) == nodes * (nodes - 1) // 2, f"registry N={nodes} has {len(registry)} groups")
            if nodes <= 16:
                expect(sum(1 for _ in registry) == len(registry), f"registry N={nodes} enumerates wrongly")
            for slots_per_rank in (1, 2, 4):
                for _ in range(4):
                    spec = ClusterSpec(nodes, slots_per_rank, int(rng.integers(1, nodes * slots_per_rank + 1)),
                                       64 * GB, 50 * GB, 10 ** 6, 10 ** 6, 10 ** 7, 4096)
                    plan = comm_plan.plan_allreduce(scheduled_fuzz_placement(rng, spec), spec)
                    for entry in plan.per_class:
                        if len(entry.group) > 1:
                            expect(
                                entry.group in registry,
                                f"N={nodes}: class {entry.expert_class} group {entry.group} not registered",
                            )
        return f"{self.allreduce_cases} cases, worst relative error {worst:.2e}"

    def check_gradient_gather(self) -> str:
        rng = self.rng(5)
        for case in range(self.gather_cases):
            spec = fuzz_spec(rng, max_nodes=16)
            placement = scheduled_fuzz_placement(rng, spec)
            tuples = comm_plan.plan_grad_gather(placement, spec)
            per_dst = [0] * spec.nodes
            for t in tuples:
                per_dst[t.dst_rank] += 1
                if t.dst_rank in placement.hosting_ranks(t.expert_class):
                    expect(t.src_rank == t.dst_rank, f"case {case}: rank {t.dst_rank} hosts {t.expert_class} but fetches remotely")
            expect(all(n == spec.expert_classes for n in per_dst), f"case {case}: tuples per destination {per_dst}")
            expect(source_balance_ok(tuples, placement), f"case {case}: unbalanced remote sources")
        return f"{self.gather_cases} placements"

    def policy_reports(self) -> Dict[int, Dict[str, simulator.SimReport]]:
        if self._policy_reports is None:
            spec = ClusterSpec(
                nodes=16, slots_per_rank=4, expert_classes=16,
                bw_pci=64 * GB, bw_net=50 * GB,
                grad_bytes=3_375_000_000, weight_bytes=3_375_000_000, optimizer_bytes=27 * GB,
                tokens_per_batch=settings.TRACEGEN_DEFAULT_TOKENS_PER_BATCH, capacity_factor=1.0,
            )
            policies = [
                PolicyConfig(PolicyKind.PER_ITERATION),
                PolicyConfig(PolicyKind.INTERVAL, interval=10),
                PolicyConfig(PolicyKind.INTERVAL, interval=50),
                PolicyConfig(PolicyKind.INTERVAL, interval=100),
                PolicyConfig(PolicyKind.STATIC),
            ]
            options = simulator.SimulationOptions()
            self._policy_reports = {}
            for seed in self.trace_seeds:
                trace = generate(TraceGenConfig.with_defaults(
                    experts=16, iterations=self.trace_iterations, mode=TraceMode.SPIKY.value,
                    tokens_per_batch=spec.tokens_per_batch, seed=seed,
                ))
                self._policy_reports[seed] = {p.label: simulator.run(trace, spec, p, options) for p in policies}
        return self._policy_reports

    def check_drop_ordering(self) -> str:
        summary = []
        for seed, reports in self.policy_reports().items():
            drop = {label: 100.0 - r.aggregates['survival_pct'] for label, r in reports.items()}
            per, i10, i50, i100, static = (
                drop['per-iteration'], drop['interval-10'], drop['interval-50'], drop['interval-100'], drop['static']
            )
            expect(per < i10, f"seed {seed}: per-iteration {per:.2f}% not below interval-10 {i10:.2f}%")
            expect(i10 <= i50 + 1.0, f"seed {seed}: interval-10 {i10:.2f}% above interval-50 {i50:.2f}%")
            expect(i50 <= i100 + 1.0, f"seed {seed}: interval-50 {i50:.2f}% above interval-100 {i100:.2f}%")
            expect(i100 < static, f"seed {seed}: interval-100 {i100:.2f}% not below static {static:.2f}%")
            expect(static - per >= 10.0, f"seed {seed}: static-vs-per-iteration margin {static - per:.2f}pp < 10pp")
            summary.append(f"seed {seed}: {per:.1f}/{i10:.1f}/{i50:.1f}/{i100:.1f}/{static:.1f}% dropped")
        return '; '.join(summary)

    def check_latency_spikes(self) -> str:
        for seed, reports in self.policy_reports().items():
            per = reports['per-iteration']
            expect(all(r.migration_s == 0 for r in per.records), f"seed {seed}: per-iteration charged migration")
            expect(per.aggregates['max_latency_ratio'] == 1.0, f"seed {seed}: per-iteration latency not constant")
            for label in ('interval-10', 'interval-50', 'interval-100'):
                records = reports[label].records
                steady = max(r.total_s for r in records if not r.rebalanced)
                for r in records:
                    if r.rebalanced and r.churn > 0:
                        expect(r.total_s > steady, f"seed {seed}: {label} t={r.iteration} churn {r.churn} without spike")
            means = [reports[label].aggregates['mean_latency_s'] for label in ('interval-10', 'interval-50', 'interval-100')]
            expect(means[0] >= means[1] >= means[2], f"seed {seed}: interval mean latencies {means} not ordered")
        return f"{len(self.trace_seeds)} traces"

    def check_k_partition_bound(self) -> str:
        spec = PRESETS['paper-example']
        dynamic = cost_model.comm_time_dynamic(spec)
        bounds = [cost_model.k_partition_bound(spec, k) for k in (1, 2, 4, 8)]
        expect(math.isclose(bounds[0].t_grad, dynamic.t_grad, rel_tol=1e-12), 'k=1 grad bound != dynamic')
        expect(math.isclose(bounds[0].t_weight, dynamic.t_weight, rel_tol=1e-12), 'k=1 weight bound != dynamic')
        totals = [b.total for b in bounds]
        expect(all(a <= b for a, b in zip(totals, totals[1:])), f"bound not non-decreasing in k: {totals}")
        return 'k in 1,2,4,8: ' + ', '.join(f"{t:.4f}s" for t in totals)
