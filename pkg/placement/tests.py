import json
from io import StringIO

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from cluster.exceptions import InvalidConfig, InvalidInput, MissingPopularity, ShapeMismatch
from cluster.tests import small_spec
from cluster.types import PRESETS, PopularityVector, placement_from_slots, with_overrides
from placement.serializers import PolicyConfigSerializer
from placement.services.policies import (
    PolicyConfig,
    PolicyKind,
    inter_rank_counts,
    migration_time,
    next_placement,
    uniform_placement,
    validate_policy,
)
from placement.services.router import class_capacity, route, slot_capacity
from placement.services.scheduler import SchedulerInput, compute_placement, placement_churn, replica_counts
from simulation.services.verification import listing_oracle


def schedule(popularity, nodes, slots):
    spec = small_spec(nodes=nodes, slots=slots, experts=len(popularity))
    return compute_placement(SchedulerInput.for_spec(PopularityVector(0, tuple(popularity)), spec))


@st.composite
def scheduler_cases(draw):
    experts = draw(st.integers(1, 64))
    total = draw(st.integers(experts, 256))
    slots = draw(st.sampled_from([d for d in range(1, total + 1) if total % d == 0]))
    popularity = draw(st.lists(st.integers(0, 10 ** 6), min_size=experts, max_size=experts))
    return popularity, total // slots, slots


class SchedulerTest(SimpleTestCase):
    def test_uniform_popularity(self):
        placement = schedule([10, 10, 10, 10], nodes=4, slots=2)
        self.assertEqual(placement.replica_counts, (2, 2, 2, 2))
        self.assertEqual(placement.slot_assignment, (0, 0, 1, 1, 2, 2, 3, 3))

    def test_under_allocation_goes_to_smallest_diff(self):
        self.assertEqual(replica_counts([60, 20, 15, 5], 4, 2), [5, 1, 1, 1])

    def test_over_allocation_converges_to_minimum(self):
        self.assertEqual(replica_counts([1, 1, 1, 97], 2, 2), [1, 1, 1, 1])

    def test_single_dominant_class_matches_listing(self):
        for experts, world_size, slots in [(64, 32, 2), (64, 64, 4), (17, 17, 1), (40, 16, 16)]:
            for hot in (0, experts // 2, experts - 1):
                popularity = [0] * experts
                popularity[hot] = 100_000
                counts = replica_counts(popularity, world_size, slots)
                self.assertEqual(counts, listing_oracle(popularity, world_size, slots))
                self.assertEqual(counts[hot], world_size * slots - experts + 1)

    def test_zero_popularity_is_uniform(self):
        with self.assertLogs('placement.services.scheduler', level='WARNING'):
            placement = schedule([0, 0, 0, 0], nodes=4, slots=2)
        self.assertEqual(placement.replica_counts, (2, 2, 2, 2))

    def test_too_many_classes(self):
        with self.assertRaises(InvalidInput):
            replica_counts([1, 1, 1], 1, 2)

    def test_shape_mismatch(self):
        spec = small_spec(nodes=2, slots=2, experts=2)
        with self.assertRaises(ShapeMismatch):
            compute_placement(SchedulerInput.for_spec(PopularityVector(0, (1, 2, 3)), spec))

    @hypothesis_settings(max_examples=500, deadline=None)
    @given(scheduler_cases())
    def test_matches_listing_oracle(self, case):
        popularity, world_size, slots = case
        counts = replica_counts(popularity, world_size, slots)
        self.assertEqual(counts, listing_oracle(popularity, world_size, slots))
        self.assertEqual(sum(counts), world_size * slots)
        self.assertGreaterEqual(min(counts), 1)

    @hypothesis_settings(max_examples=200, deadline=None)
    @given(scheduler_cases(), st.integers(2, 50))
    def test_scale_invariant(self, case, factor):
        popularity, world_size, slots = case
        scaled = [p * factor for p in popularity]
        self.assertEqual(replica_counts(scaled, world_size, slots), replica_counts(popularity, world_size, slots))

    @hypothesis_settings(max_examples=200, deadline=None)
    @given(scheduler_cases())
    def test_assignment_is_contiguous(self, case):
        popularity, world_size, slots = case
        placement = schedule(popularity, world_size, slots)
        self.assertEqual(list(placement.slot_assignment), sorted(placement.slot_assignment))


class ChurnTest(SimpleTestCase):
    def setUp(self):
        self.spec = small_spec(nodes=2, slots=2, experts=2)

    def churn(self, a, b):
        return placement_churn(placement_from_slots(a, self.spec), placement_from_slots(b, self.spec))

    def test_identical(self):
        self.assertEqual(self.churn([0, 0, 1, 1], [0, 0, 1, 1]), 0)

    def test_one_slot(self):
        self.assertEqual(self.churn([0, 0, 1, 1], [0, 1, 1, 1]), 1)

    def test_all_slots(self):
        self.assertEqual(self.churn([0, 0, 1, 1], [1, 1, 0, 0]), 4)

    def test_shape_mismatch(self):
        other = small_spec(nodes=3, slots=2, experts=2)
        with self.assertRaises(ShapeMismatch):
            placement_churn(placement_from_slots([0, 0, 1, 1], self.spec),
                            placement_from_slots([0, 0, 1, 1, 1, 1], other))


class RouterTest(SimpleTestCase):
    def test_slot_capacity(self):
        self.assertEqual(slot_capacity(small_spec(nodes=16, slots=4, experts=4, tokens_per_batch=4096)), 64)
        self.assertEqual(slot_capacity(small_spec(nodes=16, slots=4, experts=4, tokens_per_batch=100)), 1)
        spec = small_spec(nodes=16, slots=4, experts=4, tokens_per_batch=4096, capacity_factor=2.0)
        self.assertEqual(slot_capacity(spec), 128)

    def test_class_capacity_matches_static_formula(self):
        spec = small_spec(nodes=16, slots=4, experts=16, tokens_per_batch=4096)
        placement = uniform_placement(spec)
        for class_id in range(16):
            self.assertEqual(class_capacity(placement, spec, class_id), 4096 // 16)

    def test_empty_batch(self):
        spec = small_spec(nodes=2, slots=2, experts=2, tokens_per_batch=16)
        outcome = route(PopularityVector(0, (0, 0)), placement_from_slots([0, 0, 1, 1], spec), spec)
        self.assertEqual(outcome.instance_loads, (0, 0, 0, 0))
        self.assertEqual(outcome.total_dropped, 0)
        self.assertEqual(outcome.survival_rate, 1.0)

    def test_round_robin_and_cap(self):
        spec = small_spec(nodes=2, slots=2, experts=2, tokens_per_batch=16)
        outcome = route(PopularityVector(0, (10, 2)), placement_from_slots([0, 0, 1, 1], spec), spec)
        self.assertEqual(outcome.instance_loads, (4, 4, 1, 1))
        self.assertEqual(outcome.dropped, (2, 0))
        self.assertAlmostEqual(outcome.survival_rate, 10 / 12)
        self.assertEqual(outcome.popularity_allreduce_bytes, 2 * 2 * 8)

    def test_exact_proportional_placement_drops_nothing(self):
        spec = small_spec(nodes=4, slots=2, experts=4, tokens_per_batch=800)
        popularity = PopularityVector(0, (500, 100, 100, 100))
        placement = compute_placement(SchedulerInput.for_spec(popularity, spec))
        self.assertEqual(placement.replica_counts, (5, 1, 1, 1))
        self.assertEqual(route(popularity, placement, spec).total_dropped, 0)

    def test_shape_mismatch(self):
        spec = small_spec(nodes=2, slots=2, experts=2)
        with self.assertRaises(ShapeMismatch):
            route(PopularityVector(0, (1, 2, 3)), placement_from_slots([0, 0, 1, 1], spec), spec)

    @hypothesis_settings(max_examples=300, deadline=None)
    @given(st.data())
    def test_conservation_and_identity(self, data):
        nodes = data.draw(st.integers(1, 8))
        slots = data.draw(st.integers(1, 4))
        experts = data.draw(st.integers(1, nodes * slots))
        spec = small_spec(nodes=nodes, slots=slots, experts=experts,
                          tokens_per_batch=data.draw(st.integers(0, 5000)))
        counts = data.draw(st.lists(st.integers(0, 3000), min_size=experts, max_size=experts))
        placement = schedule(data.draw(st.lists(st.integers(0, 100), min_size=experts, max_size=experts)),
                             nodes, slots)
        outcome = route(PopularityVector(0, tuple(counts)), placement, spec)
        capacity = slot_capacity(spec)
        self.assertEqual(sum(outcome.instance_loads) + outcome.total_dropped, sum(counts))
        self.assertTrue(all(load <= capacity for load in outcome.instance_loads))
        for class_id, tokens in enumerate(counts):
            expected = max(0, tokens - placement.replica_counts[class_id] * capacity)
            self.assertEqual(outcome.dropped[class_id], expected)
        self.assertGreaterEqual(outcome.survival_rate, 0.0)
        self.assertLessEqual(outcome.survival_rate, 1.0)

    @hypothesis_settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2000), st.integers(1, 6))
    def test_more_replicas_never_drop_more(self, tokens, extra):
        spec = small_spec(nodes=8, slots=1, experts=2, tokens_per_batch=800)
        fewer = placement_from_slots([0] * (7 - extra) + [1] * (1 + extra), spec)
        more = placement_from_slots([0] * (8 - extra) + [1] * extra, spec)
        popularity = PopularityVector(0, (tokens, 0))
        self.assertLessEqual(route(popularity, more, spec).dropped[0], route(popularity, fewer, spec).dropped[0])


class PolicyTest(SimpleTestCase):
    def setUp(self):
        self.spec = small_spec(nodes=4, slots=2, experts=4)

    def test_labels(self):
        self.assertEqual(PolicyConfig(PolicyKind.STATIC).label, 'static')
        self.assertEqual(PolicyConfig(PolicyKind.INTERVAL, interval=10).label, 'interval-10')
        self.assertEqual(PolicyConfig(PolicyKind.PER_ITERATION, inter_rank_only=True).label, 'per-iteration-inter-rank')

    def test_static_is_constant(self):
        policy = PolicyConfig(PolicyKind.STATIC)
        first = next_placement(policy, 0, None, None, self.spec)
        popularity = PopularityVector(0, (60, 20, 15, 5))
        for t in range(1, 5):
            decision = next_placement(policy, t, popularity, first.placement, self.spec)
            self.assertEqual(decision.placement, first.placement)
            self.assertEqual(decision.migrated_slots, 0)
        self.assertEqual(first.placement.replica_counts, (2, 2, 2, 2))
        self.assertAlmostEqual(policy.static_replicas(self.spec), 2.0)

    def test_per_iteration_follows_previous_popularity(self):
        policy = PolicyConfig(PolicyKind.PER_ITERATION)
        start = next_placement(policy, 0, None, None, self.spec)
        decision = next_placement(policy, 1, PopularityVector(0, (60, 20, 15, 5)), start.placement, self.spec)
        self.assertEqual(decision.placement.replica_counts, (5, 1, 1, 1))
        self.assertTrue(decision.rebalanced)
        self.assertEqual(migration_time(policy, start.placement, decision.placement, self.spec), 0.0)

    def test_interval_off_schedule_keeps_placement(self):
        policy = PolicyConfig(PolicyKind.INTERVAL, interval=10)
        start = next_placement(policy, 0, None, None, self.spec)
        decision = next_placement(policy, 7, PopularityVector(6, (60, 20, 15, 5)), start.placement, self.spec)
        self.assertIs(decision.placement, start.placement)
        self.assertFalse(decision.rebalanced)
        rebalance = next_placement(policy, 10, PopularityVector(9, (60, 20, 15, 5)), start.placement, self.spec)
        self.assertTrue(rebalance.rebalanced)
        self.assertEqual(rebalance.migrated_slots, placement_churn(start.placement, rebalance.placement))

    def test_missing_popularity(self):
        policy = PolicyConfig(PolicyKind.PER_ITERATION)
        start = next_placement(policy, 0, None, None, self.spec)
        with self.assertRaises(MissingPopularity):
            next_placement(policy, 1, None, start.placement, self.spec)

    def test_interval_migration_figures(self):
        spec = with_overrides(PRESETS['paper-example'], nodes=2, slots_per_rank=1, expert_classes=2)
        policy = PolicyConfig(PolicyKind.INTERVAL, interval=10)
        prev = placement_from_slots([0, 1], spec)
        swapped = placement_from_slots([1, 0], spec)
        self.assertAlmostEqual(migration_time(policy, prev, swapped, spec), 0.6075, places=9)
        self.assertEqual(migration_time(policy, prev, prev, spec), 0.0)

    def test_invalid_interval(self):
        with self.assertRaises(InvalidConfig):
            validate_policy(PolicyConfig(PolicyKind.INTERVAL, interval=0), self.spec)

    def test_static_inter_rank_needs_divisible_slots(self):
        spec = small_spec(nodes=4, slots=2, experts=3)
        with self.assertRaises(InvalidConfig):
            validate_policy(PolicyConfig(PolicyKind.STATIC, inter_rank_only=True), spec)

    @hypothesis_settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_inter_rank_only_never_doubles_up(self, data):
        nodes = data.draw(st.integers(1, 8))
        slots = data.draw(st.integers(1, 4))
        experts = data.draw(st.integers(slots, nodes * slots))
        spec = small_spec(nodes=nodes, slots=slots, experts=experts)
        popularity = data.draw(st.lists(st.integers(0, 1000), min_size=experts, max_size=experts))
        counts = inter_rank_counts(popularity, spec)
        self.assertEqual(sum(counts), spec.total_slots)
        self.assertTrue(all(1 <= c <= nodes for c in counts))

        policy = PolicyConfig(PolicyKind.PER_ITERATION, inter_rank_only=True)
        start = next_placement(policy, 0, None, None, spec)
        decision = next_placement(policy, 1, PopularityVector(0, tuple(popularity)), start.placement, spec)
        for placement in (start.placement, decision.placement):
            for rank in range(nodes):
                self.assertTrue(all(n == 1 for n in placement.local_counts(rank).values()))

    @hypothesis_settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.lists(st.lists(st.integers(0, 500), min_size=4, max_size=4), min_size=2, max_size=30))
    def test_interval_changes_only_on_schedule(self, interval, rows):
        policy = PolicyConfig(PolicyKind.INTERVAL, interval=interval)
        placement, prev = None, None
        for t, counts in enumerate(rows):
            decision = next_placement(policy, t, prev, placement, self.spec)
            if placement is not None and t % interval != 0:
                self.assertEqual(decision.placement, placement)
            placement, prev = decision.placement, PopularityVector(t, tuple(counts))


class PolicyConfigSerializerTest(SimpleTestCase):
    def test_interval_requires_interval(self):
        serializer = PolicyConfigSerializer(data={'kind': 'interval'})
        self.assertFalse(serializer.is_valid())
        self.assertIn('interval', serializer.errors)

    def test_create(self):
        serializer = PolicyConfigSerializer(data={'kind': 'interval', 'interval': 50})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.save(), PolicyConfig(PolicyKind.INTERVAL, interval=50))


class PlacementCommandTest(SimpleTestCase):
    def call(self, *args):
        out = StringIO()
        call_command('placement', *args, stdout=out)
        return out.getvalue()

    def test_worked_example(self):
        output = self.call('--popularity', '60,20,15,5', '--nodes', '4', '--slots', '2', '--experts', '4')
        self.assertIn('replica counts: 5,1,1,1', output)
        self.assertIn('slot assignment: 0,0,0,0,0,1,2,3', output)

    def test_json_output(self):
        output = self.call('--popularity', '60,20,15,5', '--nodes', '4', '--slots', '2', '--json')
        data = json.loads(output)
        self.assertEqual(data['replica_counts'], [5, 1, 1, 1])
        self.assertEqual(data['slot_assignment'], [0, 0, 0, 0, 0, 1, 2, 3])
        self.assertEqual(data['ranks'], [[0, 0], [0, 0], [0, 1], [2, 3]])
        self.assertEqual(data['slots_per_rank'], 2)

    def test_uniform(self):
        output = self.call('--popularity', '7,7,7,7', '--nodes', '4', '--slots', '2')
        self.assertIn('replica counts: 2,2,2,2', output)

    def test_zero_popularity(self):
        output = self.call('--popularity', '0,0,0,0', '--nodes', '4', '--slots', '2')
        self.assertIn('replica counts: 2,2,2,2', output)

    def test_length_mismatch(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('--popularity', '1,2,3', '--nodes', '4', '--slots', '2', '--experts', '4')
        self.assertEqual(ctx.exception.returncode, 1)
