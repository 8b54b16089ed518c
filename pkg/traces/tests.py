import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from cluster.exceptions import InvalidConfig, ParseError, SchemaError
from cluster.types import Trace
from traces.serializers import TraceGenConfigSerializer
from traces.services.generator import (
    TraceGenConfig,
    TraceMode,
    generate,
    lag1_autocorrelation,
    max_flip_ratio,
    multinomial_counts,
    validate_config,
)
from traces.services.trace_io import load_trace, save_trace


class GeneratorTest(SimpleTestCase):
    def test_rows_sum_to_batch(self):
        trace = generate(TraceGenConfig(experts=6, iterations=40, tokens_per_batch=1000, mode=TraceMode.SPIKY))
        self.assertEqual(len(trace), 40)
        self.assertTrue(all(row.total == 1000 for row in trace.rows))
        self.assertEqual(trace.tokens_per_batch, 1000)

    def test_uniform_mode_is_flat(self):
        trace = generate(TraceGenConfig(experts=4, iterations=50, tokens_per_batch=4000, mode=TraceMode.UNIFORM))
        for row in trace.rows:
            self.assertTrue(all(abs(c - 1000) < 200 for c in row.counts), row.counts)

    def test_empty_batches(self):
        trace = generate(TraceGenConfig(experts=3, iterations=5, tokens_per_batch=0))
        self.assertTrue(all(row.counts == (0, 0, 0) for row in trace.rows))

    def test_same_seed_same_trace(self):
        config = TraceGenConfig(experts=8, iterations=30, tokens_per_batch=2048, mode=TraceMode.SPIKY, seed=7)
        self.assertEqual(generate(config), generate(config))

    def test_different_seed_different_trace(self):
        a = generate(TraceGenConfig(experts=8, iterations=10, tokens_per_batch=2048, seed=1))
        b = generate(TraceGenConfig(experts=8, iterations=10, tokens_per_batch=2048, seed=2))
        self.assertNotEqual(a, b)

    def test_walk_is_autocorrelated(self):
        trace = generate(TraceGenConfig(experts=4, iterations=300, tokens_per_batch=32768, seed=0))
        means = np.mean([row.counts for row in trace.rows], axis=0)
        top = int(np.argmax(means))
        self.assertGreater(lag1_autocorrelation(trace)[top], 0.5)

    def test_spiky_trace_flips(self):
        config = TraceGenConfig(
            experts=32, iterations=200, tokens_per_batch=32768, mode=TraceMode.SPIKY,
            spike_probability=0.2, initial_spread=3.0, seed=0,
        )
        self.assertGreaterEqual(max_flip_ratio(generate(config)), 16)

    def test_flip_ratio_floors_zero_counts(self):
        trace = generate(TraceGenConfig(experts=2, iterations=3, tokens_per_batch=0))
        self.assertEqual(max_flip_ratio(trace), 1.0)

    def test_invalid_configs(self):
        with self.assertRaises(InvalidConfig):
            validate_config(TraceGenConfig(experts=4, iterations=0, tokens_per_batch=10))
        with self.assertRaises(InvalidConfig):
            validate_config(TraceGenConfig(experts=4, iterations=5, tokens_per_batch=10, spike_probability=1.5))
        with self.assertRaises(InvalidConfig):
            TraceGenConfig.with_defaults(experts=4, iterations=5, mode='sawtooth')

    def test_defaults_from_settings(self):
        with self.settings(TRACEGEN_DEFAULT_TOKENS_PER_BATCH=512, TRACEGEN_DEFAULT_SEED=9):
            config = TraceGenConfig.with_defaults(experts=4, iterations=5, volatility=None)
        self.assertEqual(config.tokens_per_batch, 512)
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.mode, TraceMode.WALK)

    @hypothesis_settings(max_examples=200, deadline=None)
    @given(st.integers(0, 10 ** 6), st.lists(st.floats(0, 10), min_size=1, max_size=20), st.integers(0, 2 ** 32 - 1))
    def test_multinomial_conserves_tokens(self, tokens, weights, seed):
        weights = np.array(weights)
        if weights.sum() == 0:
            weights = np.ones_like(weights)
        probabilities = weights / weights.sum()
        counts = multinomial_counts(np.random.Generator(np.random.PCG64(seed)), tokens, probabilities)
        self.assertEqual(sum(counts), tokens)
        self.assertTrue(all(c >= 0 for c in counts))


class TraceFileTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        path = self.dir / 'trace.csv'
        path.write_text(text, encoding='utf-8')
        return path

    def test_round_trip(self):
        trace = generate(TraceGenConfig(experts=5, iterations=12, tokens_per_batch=777, seed=3))
        path = save_trace(trace, self.dir / 'nested' / 'trace.csv')
        self.assertEqual(path.read_text(encoding='utf-8').splitlines()[0], 'iter,e0,e1,e2,e3,e4')
        self.assertEqual(load_trace(path), trace)

    def test_underfull_trace_round_trips_with_its_budget(self):
        trace = Trace.from_counts([[3, 1], [2, 2]], tokens_per_batch=10)
        path = save_trace(trace, self.dir / 'underfull.csv')
        self.assertEqual(load_trace(path, tokens_per_batch=trace.tokens_per_batch), trace)
        self.assertEqual(load_trace(path).tokens_per_batch, 4)

    def test_same_config_same_bytes(self):
        config = TraceGenConfig(experts=6, iterations=25, tokens_per_batch=4096, mode=TraceMode.SPIKY, seed=11)
        first = save_trace(generate(config), self.dir / 'a.csv')
        second = save_trace(generate(config), self.dir / 'b.csv')
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_batch_size_defaults_to_largest_row(self):
        trace = load_trace(self.write('iter,e0,e1\n0,3,4\n1,10,0\n'))
        self.assertEqual(trace.tokens_per_batch, 10)
        self.assertEqual(load_trace(self.write('iter,e0,e1\n0,3,4\n'), tokens_per_batch=64).tokens_per_batch, 64)

    def test_row_above_budget(self):
        with self.assertRaises(ParseError) as ctx:
            load_trace(self.write('iter,e0,e1\n0,3,4\n1,10,0\n'), tokens_per_batch=8)
        self.assertEqual(ctx.exception.line, 3)

    def test_undecodable_bytes(self):
        path = self.dir / 'trace.csv'
        path.write_bytes(b'iter,e0,e1\n0,\xff\xfe,1\n')
        with self.assertRaises(ParseError) as ctx:
            load_trace(path)
        self.assertEqual(ctx.exception.line, 2)

    def test_bad_header(self):
        with self.assertRaises(SchemaError):
            load_trace(self.write('iteration,a,b\n0,1,2\n'))

    def test_empty_file(self):
        with self.assertRaises(SchemaError):
            load_trace(self.write(''))

    def test_negative_count(self):
        with self.assertRaises(ParseError) as ctx:
            load_trace(self.write('iter,e0,e1\n0,1,2\n1,-1,2\n'))
        self.assertEqual(ctx.exception.line, 3)

    def test_out_of_sequence(self):
        with self.assertRaisesMessage(ParseError, 'out of sequence'):
            load_trace(self.write('iter,e0,e1\n0,1,2\n2,1,2\n'))

    def test_non_integer(self):
        with self.assertRaises(ParseError):
            load_trace(self.write('iter,e0,e1\n0,1,2.5\n'))

    def test_wrong_width(self):
        with self.assertRaisesMessage(ParseError, 'line 2'):
            load_trace(self.write('iter,e0,e1\n0,1\n'))

    def test_header_only(self):
        with self.assertRaises(ParseError):
            load_trace(self.write('iter,e0,e1\n'))


class TraceGenConfigSerializerTest(SimpleTestCase):
    def test_fills_defaults(self):
        serializer = TraceGenConfigSerializer(data={'experts': 4, 'iterations': 10, 'mode': 'spiky', 'seed': 5})
        self.assertTrue(serializer.is_valid(), serializer.errors)
        config = serializer.save()
        self.assertEqual(config.mode, TraceMode.SPIKY)
        self.assertEqual(config.seed, 5)
        self.assertEqual(config.tokens_per_batch, 32768)

    def test_rejects_probability_above_one(self):
        serializer = TraceGenConfigSerializer(data={'experts': 4, 'iterations': 10, 'spike_probability': 2})
        self.assertFalse(serializer.is_valid())
        self.assertIn('spike_probability', serializer.errors)


class TraceGenCommandTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name) / 'walk.csv'

    def tearDown(self):
        self.tmp.cleanup()

    def test_writes_csv(self):
        stdout = StringIO()
        call_command('tracegen', '--experts', '4', '--iterations', '20', '--tokens-per-batch', '1000',
                     '--seed', '2', '--out', str(self.out), stdout=stdout)
        self.assertIn('Wrote 20 iterations x 4 experts', stdout.getvalue())
        self.assertIn('flip ratio', stdout.getvalue())
        trace = load_trace(self.out)
        self.assertEqual(len(trace), 20)
        self.assertEqual(trace.tokens_per_batch, 1000)

    def test_invalid_knob(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('tracegen', '--experts', '4', '--iterations', '20', '--spike-probability', '2',
                         '--out', str(self.out), stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, 1)
