import json
import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from cluster.exceptions import InvariantViolation, ReplicationError
from simulation.serializers import RunConfigSerializer
from simulation.services.simulator import compare, format_comparison, write_reports
from traces.services.generator import generate
from traces.services.trace_io import load_trace

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Replay a popularity trace under one or more replication policies and write the reports'

    def add_arguments(self, parser):
        parser.add_argument('config', type=str, help='Path to the JSON run config')
        parser.add_argument('--out', type=str, help='Output directory (overrides the config and SIMULATION_OUTPUT_DIR)')

    def load_config(self, path):
        try:
            with open(path, 'r', encoding='utf-8') as file:
                data = json.load(file)
        except OSError as e:
            raise CommandError(f'Cannot read config {path}: {e.strerror or e}', returncode=1)
        except json.JSONDecodeError as e:
            raise CommandError(f'Config {path} is not valid JSON: {e}', returncode=1)

        serializer = RunConfigSerializer(data=data, context={'base_dir': Path(path).resolve().parent})
        if not serializer.is_valid():
            raise CommandError(f'Invalid config {path}: {json.dumps(serializer.errors)}', returncode=1)
        return serializer.save()

    def handle(self, *args, **options):
        run_config = self.load_config(options['config'])
        out_dir = options['out'] or run_config.out_dir or settings.SIMULATION_OUTPUT_DIR

        try:
            if run_config.trace_path is not None:
                trace = load_trace(run_config.trace_path, tokens_per_batch=run_config.cluster.tokens_per_batch)
            else:
                trace = generate(run_config.generator)
            reports = compare(trace, run_config.cluster, run_config.policies, run_config.options)
            written = write_reports(reports, out_dir)
        except InvariantViolation as e:
            logger.error(f'Simulation aborted: {str(e)}')
            raise CommandError(f'Internal invariant violated: {e}', returncode=2)
        except OSError as e:
            raise CommandError(f'I/O error on {e.filename or out_dir}: {e.strerror or e}', returncode=1)
        except ReplicationError as e:
            raise CommandError(f'{type(e).__name__}: {e}', returncode=1)

        self.stdout.write(format_comparison(reports))
        self.stdout.write(
            self.style.SUCCESS(f'Wrote {len(written)} report files for {len(reports)} policies to {out_dir}')
        )
