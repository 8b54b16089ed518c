import csv
import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from cluster.exceptions import ShapeMismatch
from cluster.types import PRESETS, Trace, with_overrides
from comms.services import cost_model
from placement.services.policies import PolicyConfig, PolicyKind
from simulation.serializers import RunConfigSerializer
from simulation.services.simulator import (
    CSV_COLUMNS,
    SimulationOptions,
    compare,
    format_comparison,
    run,
    write_reports,
)
from simulation.services.verification import listing_oracle
from simulation.tasks import run_policy_simulation
from traces.services.generator import TraceGenConfig, TraceMode, generate
from traces.services.trace_io import save_trace

STATIC = PolicyConfig(PolicyKind.STATIC)
PER_ITERATION = PolicyConfig(PolicyKind.PER_ITERATION)


def desk_spec(**changes):
    values = dict(nodes=4, slots_per_rank=2, expert_classes=4, tokens_per_batch=800)
    values.update(changes)
    return with_overrides(PRESETS['paper-example'], **values)


def skewed_trace(iterations=5):
    return Trace.from_counts([[500, 100, 100, 100]] * iterations, tokens_per_batch=800)


class RunTest(SimpleTestCase):
    def setUp(self):
        self.spec = desk_spec()
        self.options = SimulationOptions()

    def test_static_drops_every_iteration(self):
        report = run(skewed_trace(), self.spec, STATIC, self.options)
        self.assertEqual([r.dropped for r in report.records], [300] * 5)
        self.assertEqual(report.aggregates['total_dropped'], 1500)
        self.assertAlmostEqual(report.aggregates['survival_pct'], 62.5)
        self.assertEqual(report.aggregates['rebalance_count'], 0)
        self.assertIsNone(report.aggregates['mean_rebalance_latency_s'])
        static = cost_model.comm_time_static(self.spec)
        self.assertTrue(all(r.total_s == static.t_grad + static.t_weight for r in report.records))

    def test_per_iteration_adapts_after_one_step(self):
        report = run(skewed_trace(), self.spec, PER_ITERATION, self.options)
        self.assertEqual([r.dropped for r in report.records], [300, 0, 0, 0, 0])
        self.assertEqual(report.records[0].replica_counts, (2, 2, 2, 2))
        self.assertEqual(report.records[1].replica_counts, (5, 1, 1, 1))
        self.assertTrue(all(r.migration_s == 0 for r in report.records))
        self.assertEqual(report.aggregates['max_latency_ratio'], 1.0)
        dynamic = cost_model.comm_time_dynamic(self.spec)
        self.assertEqual(report.records[0].comm_grad_s, dynamic.t_grad)

    def test_interval_spikes_on_rebalance(self):
        report = run(skewed_trace(), self.spec, PolicyConfig(PolicyKind.INTERVAL, interval=2), self.options)
        records = report.records
        self.assertEqual([r.rebalanced for r in records], [False, False, True, False, True])
        self.assertGreater(records[2].churn, 0)
        self.assertGreater(records[2].migration_s, 0)
        self.assertEqual(records[4].churn, 0)
        self.assertEqual(records[4].migration_s, 0)
        self.assertGreater(records[2].total_s, records[1].total_s)
        self.assertEqual(report.aggregates['rebalance_count'], 2)
        self.assertGreater(report.aggregates['max_latency_ratio'], 1.0)

    def test_replica_counts_follow_previous_popularity(self):
        trace = generate(TraceGenConfig(experts=4, iterations=30, tokens_per_batch=800, mode=TraceMode.SPIKY, seed=4))
        report = run(trace, self.spec, PER_ITERATION, self.options)
        for t in range(1, len(trace)):
            expected = listing_oracle(list(trace[t - 1].counts), self.spec.nodes, self.spec.slots_per_rank)
            self.assertEqual(list(report.records[t].replica_counts), expected)

    def test_metadata_and_compute_terms(self):
        options = SimulationOptions(compute_base_seconds=0.1, metadata_seconds=0.01, include_metadata_latency=True)
        per = run(skewed_trace(2), self.spec, PER_ITERATION, options).records[0]
        static = run(skewed_trace(2), self.spec, STATIC, options).records[0]
        self.assertAlmostEqual(per.metadata_s, 0.01 + 4 * 4 * 8 / self.spec.bw_net)
        self.assertEqual(static.metadata_s, 0.0)
        self.assertEqual(per.compute_s, 0.1)
        self.assertAlmostEqual(per.total_s, per.comm_grad_s + per.comm_weight_s + per.metadata_s + 0.1)

    def test_plan_check_passes(self):
        options = SimulationOptions(check_plans=True)
        report = run(skewed_trace(3), self.spec, PER_ITERATION, options)
        self.assertEqual(len(report.records), 3)

    def test_expert_count_mismatch(self):
        trace = Trace.from_counts([[1, 2, 3]], tokens_per_batch=6)
        with self.assertRaises(ShapeMismatch):
            run(trace, self.spec, STATIC, self.options)

    def test_survival_never_drops_below_zero(self):
        trace = Trace.from_counts([[0, 0, 0, 0], [8000, 0, 0, 0]], tokens_per_batch=8000)
        report = run(trace, self.spec, STATIC, self.options)
        self.assertEqual(report.records[0].survival, 1.0)
        self.assertGreaterEqual(report.records[1].survival, 0.0)


class CompareTest(SimpleTestCase):
    def setUp(self):
        self.spec = desk_spec()
        self.trace = generate(TraceGenConfig(experts=4, iterations=12, tokens_per_batch=800, mode=TraceMode.SPIKY, seed=2))

    def test_identical_policies_get_distinct_labels(self):
        reports = compare(self.trace, self.spec, [STATIC, STATIC], SimulationOptions())
        self.assertEqual(list(reports), ['static', 'static#2'])
        self.assertEqual(reports['static'].records, reports['static#2'].records)

    def test_needs_a_policy(self):
        with self.assertRaises(ShapeMismatch):
            compare(self.trace, self.spec, [], SimulationOptions())

    @override_settings(SIMULATION_DISPATCH='celery')
    def test_celery_dispatch_matches_inline(self):
        policies = [PER_ITERATION, PolicyConfig(PolicyKind.INTERVAL, interval=3), STATIC]
        with mock.patch('simulation.tasks.run_policy_simulation') as task:
            task.delay.side_effect = lambda *args: run_policy_simulation.apply(args=args)
            dispatched = compare(self.trace, self.spec, policies, SimulationOptions())
        self.assertEqual(task.delay.call_count, 3)
        with self.settings(SIMULATION_DISPATCH='inline'):
            inline = compare(self.trace, self.spec, policies, SimulationOptions())
        self.assertEqual(list(dispatched), ['per-iteration', 'interval-3', 'static'])
        self.assertEqual(dispatched, inline)

    def test_reports_on_disk(self):
        reports = compare(self.trace, self.spec, [STATIC, PER_ITERATION], SimulationOptions())
        with tempfile.TemporaryDirectory() as tmp:
            written = write_reports(reports, Path(tmp) / 'out')
            self.assertEqual(sorted(p.name for p in written),
                             ['per-iteration.csv', 'per-iteration.json', 'static.csv', 'static.json'])
            with open(Path(tmp) / 'out' / 'static.csv', newline='', encoding='utf-8') as file:
                rows = list(csv.reader(file))
            self.assertEqual(rows[0], CSV_COLUMNS)
            self.assertEqual(len(rows), 13)
            payload = json.loads((Path(tmp) / 'out' / 'per-iteration.json').read_text(encoding='utf-8'))
            self.assertEqual(payload['label'], 'per-iteration')
            self.assertEqual(len(payload['records']), 12)

        table = format_comparison(reports)
        self.assertIn('static', table)
        self.assertIn('per-iteration', table)


class RunConfigSerializerTest(SimpleTestCase):
    def test_preset_with_overrides_and_generator(self):
        serializer = RunConfigSerializer(data={
            'preset': 'paper-example',
            'cluster': {'nodes': 4, 'slots_per_rank': 2, 'expert_classes': 4, 'tokens_per_batch': 800},
            'policies': [{'kind': 'static'}, {'kind': 'interval', 'interval': 10}],
            'trace': {'generator': {'mode': 'spiky', 'iterations': 20}},
        })
        self.assertTrue(serializer.is_valid(), serializer.errors)
        config = serializer.save()
        self.assertEqual(config.cluster.nodes, 4)
        self.assertEqual(config.generator.experts, 4)
        self.assertEqual(config.generator.tokens_per_batch, 800)
        self.assertEqual(config.policies[1], PolicyConfig(PolicyKind.INTERVAL, interval=10))

    def test_relative_trace_path(self):
        serializer = RunConfigSerializer(
            data={'preset': 'paper-example', 'policies': [{'kind': 'static'}], 'trace': {'path': 'trace.csv'}},
            context={'base_dir': '/data/runs'},
        )
        self.assertTrue(serializer.is_valid(), serializer.errors)
        self.assertEqual(serializer.save().trace_path, Path('/data/runs/trace.csv'))

    def test_needs_one_trace_source(self):
        serializer = RunConfigSerializer(data={
            'preset': 'paper-example', 'policies': [{'kind': 'static'}],
            'trace': {'path': 'a.csv', 'generator': {'iterations': 5}},
        })
        self.assertFalse(serializer.is_valid())
        self.assertIn('trace', serializer.errors)

    def test_invalid_cluster(self):
        serializer = RunConfigSerializer(data={
            'cluster': {'nodes': 1, 'slots_per_rank': 1, 'expert_classes': 2},
            'policies': [{'kind': 'static'}], 'trace': {'path': 'a.csv'},
        })
        self.assertFalse(serializer.is_valid())
        self.assertIn('cluster', serializer.errors)


class SimulateCommandTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.out = self.dir / 'out'

    def tearDown(self):
        self.tmp.cleanup()

    def write_config(self, **changes):
        config = {
            'preset': 'paper-example',
            'cluster': {'nodes': 4, 'slots_per_rank': 2, 'expert_classes': 4, 'tokens_per_batch': 800},
            'policies': [{'kind': 'static'}, {'kind': 'per-iteration'}],
            'trace': {'path': 'trace.csv'},
        }
        config.update(changes)
        path = self.dir / 'run.json'
        path.write_text(json.dumps(config), encoding='utf-8')
        return path

    def call(self, config_path):
        stdout = StringIO()
        call_command('simulate', str(config_path), '--out', str(self.out), stdout=stdout)
        return stdout.getvalue()

    def test_writes_reports(self):
        save_trace(skewed_trace(), self.dir / 'trace.csv')
        output = self.call(self.write_config())
        self.assertIn('Wrote 4 report files for 2 policies', output)
        self.assertEqual(sorted(p.name for p in self.out.iterdir()),
                         ['per-iteration.csv', 'per-iteration.json', 'static.csv', 'static.json'])
        static = json.loads((self.out / 'static.json').read_text(encoding='utf-8'))
        self.assertEqual(static['aggregates']['total_dropped'], 1500)

    def test_generated_trace(self):
        output = self.call(self.write_config(trace={'generator': {'mode': 'walk', 'iterations': 15, 'seed': 3}}))
        self.assertIn('per-iteration', output)
        self.assertTrue((self.out / 'static.csv').exists())

    def test_missing_trace(self):
        with self.assertRaises(CommandError) as ctx:
            self.call(self.write_config())
        self.assertEqual(ctx.exception.returncode, 1)

    def test_expert_count_mismatch(self):
        save_trace(Trace.from_counts([[1, 2, 3]], tokens_per_batch=6), self.dir / 'trace.csv')
        with self.assertRaises(CommandError) as ctx:
            self.call(self.write_config())
        self.assertEqual(ctx.exception.returncode, 1)

    def test_undecodable_trace(self):
        (self.dir / 'trace.csv').write_bytes(b'iter,e0,e1,e2,e3\n0,\xff\xfe,1,1,1\n')
        with self.assertRaises(CommandError) as ctx:
            self.call(self.write_config())
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertIn('line 2', str(ctx.exception))

    def test_trace_rows_are_checked_against_the_cluster_budget(self):
        save_trace(Trace.from_counts([[500, 400, 0, 0]], tokens_per_batch=900), self.dir / 'trace.csv')
        with self.assertRaises(CommandError) as ctx:
            self.call(self.write_config())
        self.assertEqual(ctx.exception.returncode, 1)

    def test_invalid_config(self):
        with self.assertRaises(CommandError) as ctx:
            self.call(self.write_config(policies=[]))
        self.assertEqual(ctx.exception.returncode, 1)

    def test_unreadable_config(self):
        with self.assertRaises(CommandError) as ctx:
            self.call(self.dir / 'missing.json')
        self.assertEqual(ctx.exception.returncode, 1)


@override_settings(
    VERIFY_SCHEDULER_CASES=50,
    VERIFY_VOLUME_SPECS=2,
    VERIFY_VOLUME_PLACEMENTS=5,
    VERIFY_ALLREDUCE_CASES=20,
    VERIFY_GATHER_CASES=20,
)
class VerifyCommandTest(SimpleTestCase):
    def call(self, *args):
        stdout = StringIO()
        call_command('verify', *args, stdout=stdout)
        return stdout.getvalue()

    def test_analytic_checks_pass(self):
        output = self.call('--only', 'golden-analytic-numbers', 'k-partition-bound')
        self.assertIn('golden-analytic-numbers', output)
        self.assertIn('All 2 checks passed', output)

    def test_fuzz_checks_pass(self):
        output = self.call('--only', 'scheduler-oracle', 'volume-invariance', 'allreduce-and-registry',
                           'gradient-gather', '--seed', '7')
        self.assertIn('All 4 checks passed', output)

    @override_settings(VERIFY_GATHER_CASES=40)
    def test_fuzzed_zero_popularity_stays_quiet(self):
        with self.assertNoLogs('placement.services.scheduler', level='WARNING'):
            output = self.call('--only', 'gradient-gather', '--seed', '7')
        self.assertIn('All 1 checks passed', output)

    def test_injected_fault_fails(self):
        with mock.patch('comms.services.cost_model.overhead_ratio', return_value=0.5):
            with self.assertRaises(CommandError) as ctx:
                self.call('--only', 'golden-analytic-numbers')
        self.assertEqual(ctx.exception.returncode, 2)

    def test_unknown_check(self):
        with self.assertRaises(CommandError):
            self.call('--only', 'no-such-check')
