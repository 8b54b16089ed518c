import json
import math
from dataclasses import replace
from io import StringIO

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from cluster.exceptions import InvalidK, InvalidSpec, ShapeMismatch
from cluster.tests import small_spec
from cluster.types import GB, PRESETS, PopularityVector, placement_from_slots, with_overrides
from comms.serializers import CommPlanSerializer
from comms.services import cost_model
from comms.services.comm_plan import (
    AllReducePlan,
    LinkKind,
    build_comm_plan,
    build_group_registry,
    gradient_source,
    plan_allreduce,
    plan_byte_totals,
    plan_grad_gather,
    plan_weight_scatter,
    shard_bytes,
    simulate_allreduce,
)
from placement.services.scheduler import SchedulerInput, compute_placement
from simulation.services.verification import source_balance_ok

WORKED_EXAMPLE = PRESETS['paper-example']


@st.composite
def spec_and_placement(draw, max_nodes=6, max_slots=3):
    nodes = draw(st.integers(1, max_nodes))
    slots = draw(st.integers(1, max_slots))
    experts = draw(st.integers(1, nodes * slots))
    spec = small_spec(nodes=nodes, slots=slots, experts=experts, grad_bytes=draw(st.integers(nodes, 5000)),
                      weight_bytes=draw(st.integers(nodes, 5000)))
    extra = draw(st.lists(st.integers(0, experts - 1), min_size=spec.total_slots - experts,
                          max_size=spec.total_slots - experts))
    assignment = draw(st.permutations(list(range(experts)) + extra))
    return spec, placement_from_slots(assignment, spec)


class GroupRegistryTest(SimpleTestCase):
    def test_sizes(self):
        self.assertEqual(len(build_group_registry(1)), 0)
        self.assertEqual(len(build_group_registry(4)), 6)
        self.assertEqual(len(build_group_registry(2048)), 2_096_128)

    def test_enumeration_matches_length(self):
        registry = build_group_registry(5)
        groups = list(registry)
        self.assertEqual(len(groups), len(registry))
        self.assertEqual(len(set(groups)), len(groups))
        self.assertIn((0, 4), groups)

    def test_membership(self):
        registry = build_group_registry(8)
        self.assertIn([2, 3, 4], registry)
        self.assertNotIn([2, 4], registry)
        self.assertNotIn([3], registry)
        self.assertNotIn([7, 8], registry)

    def test_empty_cluster(self):
        with self.assertRaises(InvalidSpec):
            build_group_registry(0)


class AllReduceTest(SimpleTestCase):
    def test_plan_shape(self):
        spec = small_spec(nodes=2, slots=2, experts=2)
        plan = plan_allreduce(placement_from_slots([0, 0, 0, 1], spec), spec)
        first, second = plan.per_class
        self.assertEqual(first.group, (0, 1))
        self.assertEqual(first.representatives, {0: 0, 1: 2})
        self.assertEqual(first.intra_reduce, {0: (1,), 1: ()})
        self.assertEqual(first.divisor, 3)
        self.assertEqual(second.group, (1,))
        self.assertEqual(second.divisor, 1)

    def test_every_instance_gets_the_mean(self):
        spec = small_spec(nodes=2, slots=2, experts=1)
        plan = plan_allreduce(placement_from_slots([0, 0, 0, 0], spec), spec)
        result = simulate_allreduce(plan, {0: [1.0], 1: [3.0], 2: [5.0], 3: [7.0]})
        for slot in range(4):
            np.testing.assert_allclose(result[slot], [4.0])

    def test_missing_values(self):
        spec = small_spec(nodes=2, slots=2, experts=1)
        plan = plan_allreduce(placement_from_slots([0, 0, 0, 0], spec), spec)
        with self.assertRaises(ShapeMismatch):
            simulate_allreduce(plan, {0: [1.0], 1: [3.0], 2: [5.0]})

    @hypothesis_settings(max_examples=150, deadline=None)
    @given(spec_and_placement(), st.integers(0, 2 ** 32 - 1))
    def test_matches_direct_mean(self, case, seed):
        spec, placement = case
        rng = np.random.default_rng(seed)
        values = {slot: rng.normal(size=5) for slot in range(spec.total_slots)}
        result = simulate_allreduce(plan_allreduce(placement, spec), values)
        for class_id, slots in placement.class_slots().items():
            expected = np.mean([values[s] for s in slots], axis=0)
            for slot in slots:
                np.testing.assert_allclose(result[slot], expected, rtol=1e-9, atol=1e-12)


class GradientGatherTest(SimpleTestCase):
    def test_round_robin_source(self):
        self.assertEqual(gradient_source([1, 3, 5], 7), 3)
        self.assertEqual(gradient_source([1, 3, 5], 3), 3)
        self.assertEqual(gradient_source([1, 3, 5], 0), 1)

    def test_one_tuple_per_rank_and_class(self):
        spec = small_spec(nodes=4, slots=2, experts=3, grad_bytes=1001)
        placement = placement_from_slots([0, 0, 0, 0, 1, 1, 2, 2], spec)
        tuples = plan_grad_gather(placement, spec)
        self.assertEqual(len(tuples), 4 * 3)
        self.assertEqual(sum(t.bytes for t in tuples if t.expert_class == 0), 1001)
        self.assertTrue(all((t.link == LinkKind.LOCAL_PCI) == (t.src_rank == t.dst_rank) for t in tuples))

    def test_sizes_too_small_to_shard(self):
        spec = small_spec(nodes=4, slots=1, experts=2, grad_bytes=3)
        with self.assertRaises(InvalidSpec):
            plan_grad_gather(placement_from_slots([0, 0, 1, 1], spec), spec)

    @hypothesis_settings(max_examples=150, deadline=None)
    @given(st.data())
    def test_scheduled_placements_balance_sources(self, data):
        nodes = data.draw(st.integers(1, 8))
        slots = data.draw(st.integers(1, 4))
        experts = data.draw(st.integers(1, nodes * slots))
        spec = small_spec(nodes=nodes, slots=slots, experts=experts)
        counts = data.draw(st.lists(st.integers(0, 1000), min_size=experts, max_size=experts))
        placement = compute_placement(SchedulerInput.for_spec(PopularityVector(0, tuple(counts)), spec))
        self.assertTrue(source_balance_ok(plan_grad_gather(placement, spec), placement))


class WeightScatterTest(SimpleTestCase):
    def test_two_node_example(self):
        spec = small_spec(nodes=2, slots=2, experts=2)
        tuples = plan_weight_scatter(placement_from_slots([0, 0, 1, 1], spec), spec)
        self.assertEqual(len(tuples), 8)
        self.assertEqual(sum(t.bytes for t in tuples), 4 * spec.weight_bytes)
        links = [t.link for t in tuples if t.dst_rank == 0 and t.src_rank == 0]
        self.assertEqual(links, [LinkKind.LOCAL_PCI, LinkKind.LOCAL_HBM])
        self.assertEqual(sum(1 for t in tuples if t.link == LinkKind.NETWORK), 4)

    def test_shards_add_up(self):
        self.assertEqual(sum(shard_bytes(1003, 4, k) for k in range(4)), 1003)
        self.assertEqual([shard_bytes(1003, 4, k) for k in range(4)], [251, 251, 251, 250])


class PlanTotalsTest(SimpleTestCase):
    @hypothesis_settings(max_examples=200, deadline=None)
    @given(spec_and_placement(), st.data())
    def test_volume_invariance(self, case, data):
        spec, placement = case
        extra = data.draw(st.lists(st.integers(0, spec.expert_classes - 1),
                                   min_size=spec.total_slots - spec.expert_classes,
                                   max_size=spec.total_slots - spec.expert_classes))
        upcoming = placement_from_slots(data.draw(st.permutations(list(range(spec.expert_classes)) + extra)), spec)
        plan = build_comm_plan(placement, upcoming, spec)
        totals = plan_byte_totals(plan)
        self.assertEqual(totals.grad_volume, spec.total_slots * spec.grad_bytes)
        self.assertEqual(sum(t.bytes for t in plan.grad_gather), spec.expert_classes * spec.grad_bytes)
        self.assertEqual(totals.weight_volume, spec.total_slots * spec.weight_bytes)

    def test_grad_volume_counts_planned_contributions(self):
        spec = small_spec(nodes=2, slots=2, experts=2)
        placement = placement_from_slots([0, 0, 0, 1], spec)
        plan = build_comm_plan(placement, placement, spec)
        first = plan.allreduce.per_class[0]
        without_intra = replace(first, intra_reduce={rank: () for rank in first.group})
        broken = replace(plan, allreduce=AllReducePlan(per_class=(without_intra,) + plan.allreduce.per_class[1:]))
        totals = plan_byte_totals(broken)
        self.assertEqual(totals.grad_volume, 3 * spec.grad_bytes)
        self.assertEqual(totals.per_rank[0].grad_hbm_bytes, 1 * shard_bytes(spec.grad_bytes, 2, 0))

    @hypothesis_settings(max_examples=150, deadline=None)
    @given(spec_and_placement())
    def test_matches_dynamic_model(self, case):
        spec, placement = case
        spec = with_overrides(spec, grad_bytes=spec.nodes * 1000, weight_bytes=spec.nodes * 700)
        totals = plan_byte_totals(build_comm_plan(placement, placement, spec))
        dynamic = cost_model.comm_time_dynamic(spec)
        self.assertAlmostEqual(totals.max_grad_seconds(spec), dynamic.t_grad, delta=dynamic.t_grad * 1e-9)
        self.assertAlmostEqual(totals.max_weight_seconds(spec), dynamic.t_weight, delta=dynamic.t_weight * 1e-9)

    def test_serializer_dump(self):
        spec = small_spec(nodes=2, slots=2, experts=2)
        placement = placement_from_slots([0, 0, 0, 1], spec)
        data = CommPlanSerializer(build_comm_plan(placement, placement, spec)).data
        self.assertEqual(len(data['allreduce']), 2)
        self.assertEqual(data['allreduce'][0]['representatives'], {'0': 0, '1': 2})
        self.assertEqual(data['grad_volume'], 4 * spec.grad_bytes)
        self.assertEqual(data['placement']['ranks'], [[0, 0], [0, 1]])
        self.assertEqual(data['next_placement']['replica_counts'], [3, 1])
        self.assertEqual({t['link'] for t in data['weight_scatter']}, {'local-pci', 'local-hbm', 'network'})
        json.dumps(data)


class CostModelTest(SimpleTestCase):
    def test_worked_example(self):
        self.assertEqual(cost_model.mem_footprint(WORKED_EXAMPLE), 1728 * GB)
        self.assertEqual(cost_model.data_volume(WORKED_EXAMPLE), {'grad': 13_824 * GB, 'weight': 13_824 * GB})
        self.assertAlmostEqual(cost_model.comm_time_static(WORKED_EXAMPLE).total, 0.2690771484375, places=12)
        self.assertAlmostEqual(cost_model.comm_time_dynamic(WORKED_EXAMPLE).total, 0.2731640625, places=12)
        self.assertAlmostEqual(cost_model.overhead_ratio(WORKED_EXAMPLE), 62 / 4082, places=12)
        self.assertAlmostEqual(cost_model.overhead_ratio(WORKED_EXAMPLE, cost_model.Variant.HBM_ONLY), 62 / 4032, places=12)
        self.assertAlmostEqual(cost_model.migration_cost(1, WORKED_EXAMPLE, include_optimizer=False), 0.0675)
        self.assertAlmostEqual(cost_model.migration_cost(1, WORKED_EXAMPLE, include_weights=False), 0.54)

    def test_one_class_per_slot_has_no_overhead(self):
        spec = with_overrides(WORKED_EXAMPLE, nodes=1, slots_per_rank=4, expert_classes=4)
        self.assertEqual(cost_model.overhead_ratio(spec), 0.0)

    def test_no_replication_hbm_only_is_infinite(self):
        spec = with_overrides(WORKED_EXAMPLE, nodes=2, slots_per_rank=2, expert_classes=4)
        self.assertEqual(cost_model.overhead_ratio(spec, cost_model.Variant.HBM_ONLY), math.inf)

    def test_k_partition(self):
        self.assertEqual(cost_model.k_partition_bound(WORKED_EXAMPLE, 1), cost_model.comm_time_dynamic(WORKED_EXAMPLE))
        self.assertLess(cost_model.k_partition_bound(WORKED_EXAMPLE, 2).total, cost_model.k_partition_bound(WORKED_EXAMPLE, 4).total)
        with self.assertRaises(InvalidK):
            cost_model.k_partition_bound(WORKED_EXAMPLE, 3)
        with self.assertRaises(InvalidK):
            cost_model.k_partition_bound(WORKED_EXAMPLE, 0)
        self.assertEqual(cost_model.valid_partition_counts(WORKED_EXAMPLE, [1, 2, 3, 64, 128]), [1, 2, 64])

    def test_report(self):
        report = cost_model.cost_report(WORKED_EXAMPLE)
        self.assertEqual(report.variant, cost_model.Variant.OFFLOADED)
        self.assertEqual(report.mem_footprint_bytes, 1728 * GB)
        self.assertAlmostEqual(report.t_grad_dynamic + report.t_weight_dynamic, 0.2731640625)

    @hypothesis_settings(max_examples=300, deadline=None)
    @given(st.data())
    def test_overhead_identity(self, data):
        nodes = data.draw(st.integers(1, 4096))
        slots = data.draw(st.integers(1, 8))
        experts = data.draw(st.integers(slots + 1, max(slots + 1, min(nodes * slots, 512))))
        if experts > nodes * slots:
            return
        spec = with_overrides(
            WORKED_EXAMPLE, nodes=nodes, slots_per_rank=slots, expert_classes=experts,
            bw_pci=data.draw(st.floats(1.0, 200.0)) * GB, bw_net=data.draw(st.floats(1.0, 200.0)) * GB,
        )
        static = cost_model.comm_time_static(spec)
        dynamic = cost_model.comm_time_dynamic(spec)
        ratio = cost_model.overhead_ratio(spec)
        self.assertAlmostEqual(dynamic.total / static.total - 1, ratio, delta=1e-9 * max(1.0, ratio))
        self.assertGreaterEqual(cost_model.overhead_ratio(spec, cost_model.Variant.HBM_ONLY), ratio)


class CostModelCommandTest(SimpleTestCase):
    def call(self, *args):
        out = StringIO()
        call_command('costmodel', *args, stdout=out)
        return out.getvalue()

    def test_worked_example_table(self):
        output = self.call('--preset', 'paper-example')
        for expected in ('1,728 GB', '13,824 GB', '27,648 GB', '0.2691 s', '0.2732 s',
                         '1.52 %', '1.54 %', '0.0675 s', '0.54 s'):
            self.assertIn(expected, output)

    def test_explicit_shape(self):
        output = self.call('--nodes', '2048', '--slots', '2', '--experts', '64', '--bw-pci', '64', '--bw-net', '50')
        self.assertIn('0.2691 s', output)

    def test_k_sweep(self):
        output = self.call('--preset', 'paper-example', '--k-sweep')
        rows = [line.split() for line in output.splitlines() if line.strip() and line.split()[0].isdigit()]
        self.assertEqual([int(row[0]) for row in rows], [1, 2, 4, 8, 16, 32, 64])

    def test_degenerate_cluster(self):
        output = self.call('--nodes', '1', '--slots', '1', '--experts', '1', '--k-sweep')
        self.assertIn('0.00 %', output)

    def test_json(self):
        payload = json.loads(self.call('--preset', 'paper-example', '--json'))
        self.assertEqual(payload['variant'], 'offloaded')
        self.assertEqual(payload['mem_footprint_gb'], 1728.0)

    def test_json_unbounded_overhead_is_null(self):
        output = self.call('--nodes', '2', '--slots', '1', '--experts', '2', '--variant', 'hbm-only', '--json')
        self.assertNotIn('Infinity', output)
        payload = json.loads(output)
        self.assertIsNone(payload['overhead_ratio'])
        self.assertEqual(payload['variant'], 'hbm-only')

    def test_shape_required_without_preset(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('--nodes', '4')
        self.assertEqual(ctx.exception.returncode, 1)

    def test_invalid_spec(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('--nodes', '1', '--slots', '1', '--experts', '2')
        self.assertEqual(ctx.exception.returncode, 1)
