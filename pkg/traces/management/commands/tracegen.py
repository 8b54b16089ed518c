from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from cluster.exceptions import ReplicationError
from traces.services.generator import TraceGenConfig, TraceMode, generate, max_flip_ratio
from traces.services.trace_io import save_trace


class Command(BaseCommand):
    help = 'Generate a seeded synthetic expert-popularity trace and write it as CSV'

    def add_arguments(self, parser):
        parser.add_argument('--experts', type=int, required=True, help='Number of expert classes E')
        parser.add_argument('--iterations', type=int, required=True, help='Number of iterations T')
        parser.add_argument(
            '--mode',
            type=str,
            choices=[m.value for m in TraceMode],
            default=TraceMode.WALK.value,
            help='Trace shape (default: walk)'
        )
        parser.add_argument('--tokens-per-batch', type=int, help='Tokens routed per iteration')
        parser.add_argument('--volatility', type=float, help='Random-walk step scale')
        parser.add_argument('--spike-probability', type=float, help='Per-iteration swap probability (spiky)')
        parser.add_argument('--initial-spread', type=float, help='Scale of the initial log-weights')
        parser.add_argument('--seed', type=int, help=f'RNG seed (default: {settings.TRACEGEN_DEFAULT_SEED})')
        parser.add_argument('--out', type=str, required=True, help='Path of the CSV to write')

    def handle(self, *args, **options):
        try:
            config = TraceGenConfig.with_defaults(
                experts=options['experts'],
                iterations=options['iterations'],
                mode=options['mode'],
                tokens_per_batch=options['tokens_per_batch'],
                volatility=options['volatility'],
                spike_probability=options['spike_probability'],
                initial_spread=options['initial_spread'],
                seed=options['seed'],
            )
            trace = generate(config)
            path = save_trace(trace, options['out'])
        except (ReplicationError, OSError) as e:
            raise CommandError(str(e), returncode=1)

        self.stdout.write(
            self.style.SUCCESS(
                f'Wrote {len(trace)} iterations x {trace.expert_classes} experts to {path}'
            )
        )
        self.stdout.write(f'  max 3-iteration flip ratio: {max_flip_ratio(trace):.1f}x')
