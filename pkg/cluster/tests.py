from io import StringIO

from django.conf import settings
from django.core.management import call_command
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from cluster.exceptions import InvalidPlacement, InvalidSpec, ParseError, ShapeMismatch
from cluster.serializers import ClusterSpecSerializer
from cluster.types import GB, PRESETS, ClusterSpec, Trace, placement_from_slots, popularity_for, validate_cluster


def small_spec(nodes=2, slots=2, experts=2, **changes):
    values = dict(
        nodes=nodes, slots_per_rank=slots, expert_classes=experts,
        bw_pci=64 * GB, bw_net=50 * GB,
        grad_bytes=1000, weight_bytes=1000, optimizer_bytes=8000,
        tokens_per_batch=4096,
    )
    values.update(changes)
    return ClusterSpec(**values)


class ValidateClusterTest(SimpleTestCase):
    def test_worked_example_preset_is_valid(self):
        spec = PRESETS['paper-example']
        self.assertEqual(validate_cluster(spec), spec)
        self.assertEqual(spec.total_slots, 4096)

    def test_minimal_cluster(self):
        spec = small_spec(nodes=1, slots=1, experts=1)
        self.assertIs(validate_cluster(spec), spec)

    def test_more_classes_than_slots(self):
        with self.assertRaisesMessage(InvalidSpec, 'E <= s*N'):
            validate_cluster(small_spec(nodes=2, slots=2, experts=5))

    def test_non_positive_bandwidth(self):
        with self.assertRaisesMessage(InvalidSpec, 'bw_net > 0'):
            validate_cluster(small_spec(bw_net=0))

    def test_idempotent(self):
        spec = small_spec(nodes=4, slots=3, experts=7)
        self.assertEqual(validate_cluster(validate_cluster(spec)), spec)

    def test_rank_layout(self):
        spec = small_spec(nodes=3, slots=2, experts=3)
        self.assertEqual(spec.rank_of(5), 2)
        self.assertEqual(list(spec.rank_slots(1)), [2, 3])


class PlacementFromSlotsTest(SimpleTestCase):
    def setUp(self):
        self.spec = small_spec(nodes=2, slots=2, experts=2)

    def test_uniform(self):
        self.assertEqual(placement_from_slots([0, 0, 1, 1], self.spec).replica_counts, (2, 2))

    def test_counting(self):
        placement = placement_from_slots([0, 0, 0, 1], self.spec)
        self.assertEqual(placement.replica_counts, (3, 1))
        self.assertEqual(placement.hosting_ranks(0), [0, 1])
        self.assertEqual(placement.local_counts(1), {0: 1, 1: 1})

    def test_absent_class(self):
        with self.assertRaisesMessage(InvalidPlacement, 'class 1 absent'):
            placement_from_slots([0, 0, 0, 0], self.spec)

    def test_out_of_range(self):
        with self.assertRaises(InvalidPlacement):
            placement_from_slots([0, 1, 2, 1], self.spec)

    def test_wrong_length(self):
        with self.assertRaises(InvalidPlacement):
            placement_from_slots([0, 1, 1], self.spec)

    @hypothesis_settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_recount_invariants(self, data):
        nodes = data.draw(st.integers(1, 8))
        slots = data.draw(st.integers(1, 4))
        experts = data.draw(st.integers(1, nodes * slots))
        spec = small_spec(nodes=nodes, slots=slots, experts=experts)
        assignment = data.draw(st.permutations(
            list(range(experts)) + data.draw(st.lists(
                st.integers(0, experts - 1), min_size=spec.total_slots - experts, max_size=spec.total_slots - experts
            ))
        ))
        placement = placement_from_slots(assignment, spec)
        self.assertEqual(sum(placement.replica_counts), spec.total_slots)
        self.assertGreaterEqual(min(placement.replica_counts), 1)
        for class_id, count in enumerate(placement.replica_counts):
            self.assertEqual(count, assignment.count(class_id))


class PopularityAndTraceTest(SimpleTestCase):
    def test_popularity_length_mismatch(self):
        with self.assertRaises(ShapeMismatch):
            popularity_for(small_spec(), [1, 2, 3])

    def test_popularity_over_budget_warns(self):
        with self.assertLogs('cluster.types', level='WARNING'):
            popularity_for(small_spec(tokens_per_batch=10), [6, 6])

    def test_trace_rows_must_be_consecutive(self):
        trace = Trace.from_counts([[1, 2], [3, 4]], tokens_per_batch=7)
        self.assertEqual(len(trace), 2)
        self.assertEqual(trace[1].counts, (3, 4))
        with self.assertRaises(ShapeMismatch):
            Trace.from_counts([[1, 2], [3]], tokens_per_batch=7, expert_classes=2)

    def test_parse_error_carries_line(self):
        error = ParseError('negative token count', line=4)
        self.assertEqual(error.line, 4)
        self.assertEqual(str(error), 'line 4: negative token count')


class ClusterSpecSerializerTest(SimpleTestCase):
    def test_round_trip(self):
        spec = PRESETS['paper-example']
        serializer = ClusterSpecSerializer(data=spec.to_dict())
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.save(), spec)
        self.assertEqual(ClusterSpecSerializer(spec).data, spec.to_dict())

    def test_invariant_error_names_field(self):
        data = small_spec().to_dict()
        data['expert_classes'] = 9
        serializer = ClusterSpecSerializer(data=data)
        self.assertFalse(serializer.is_valid())
        self.assertIn('expert_classes', serializer.errors)


class ProjectSettingsTest(SimpleTestCase):
    def test_no_auth_or_database(self):
        self.assertNotIn('django.contrib.auth', settings.INSTALLED_APPS)
        self.assertEqual(settings.DATABASES, {})

    def test_system_checks_pass(self):
        call_command('check', stdout=StringIO())
