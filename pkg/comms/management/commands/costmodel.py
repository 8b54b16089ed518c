import json

from django.core.management.base import BaseCommand, CommandError

from cluster.exceptions import InvariantViolation, ReplicationError
from cluster.types import GB, PRESETS, ClusterSpec, validate_cluster
from comms.serializers import CostReportSerializer
from comms.services.cost_model import (
    Variant,
    comm_time_dynamic,
    comm_time_static,
    cost_report,
    data_volume,
    k_partition_bound,
    mem_footprint,
    migration_cost,
    overhead_ratio,
    valid_partition_counts,
)


def _gb(value):
    if value % GB == 0:
        return f'{value // GB:,} GB'
    return f'{value / GB:,.3f} GB'


class Command(BaseCommand):
    help = 'Print the closed-form memory, data-volume and communication-time model for a cluster'

    def add_arguments(self, parser):
        parser.add_argument('--preset', type=str, choices=sorted(PRESETS), help='Start from a named cluster spec')
        parser.add_argument('--nodes', type=int, help='Nodes N (one rank each)')
        parser.add_argument('--slots', type=int, help='Expert slots per rank s')
        parser.add_argument('--experts', type=int, help='Expert classes E')
        parser.add_argument('--bw-pci', type=float, help='Host<->accelerator bandwidth, GB/s')
        parser.add_argument('--bw-net', type=float, help='Network bandwidth, GB/s')
        parser.add_argument('--grad-gb', type=float, help='Gradient bytes per instance G, GB')
        parser.add_argument('--weight-gb', type=float, help='Weight bytes per instance W, GB')
        parser.add_argument('--optimizer-gb', type=float, help='Optimizer bytes per class O, GB')
        parser.add_argument(
            '--variant',
            type=str,
            choices=[v.value for v in Variant],
            default=Variant.OFFLOADED.value,
            help='Optimizer placement for the time rows (default: offloaded)'
        )
        parser.add_argument('--k-sweep', action='store_true', help='Also print the k-partition bound for every valid k')
        parser.add_argument('--json', action='store_true', help='Emit the cost report as JSON instead of a table')

    def build_spec(self, options):
        counts = (options['nodes'], options['slots'], options['experts'])
        if options['preset'] is None and None in counts:
            raise CommandError('--nodes, --slots and --experts are required without --preset', returncode=1)
        # byte and bandwidth figures default to the worked example
        base = PRESETS[options['preset'] or 'paper-example'].to_dict()
        overrides = {
            'nodes': options['nodes'],
            'slots_per_rank': options['slots'],
            'expert_classes': options['experts'],
            'bw_pci': options['bw_pci'] * GB if options['bw_pci'] is not None else None,
            'bw_net': options['bw_net'] * GB if options['bw_net'] is not None else None,
            'grad_bytes': round(options['grad_gb'] * GB) if options['grad_gb'] is not None else None,
            'weight_bytes': round(options['weight_gb'] * GB) if options['weight_gb'] is not None else None,
            'optimizer_bytes': round(options['optimizer_gb'] * GB) if options['optimizer_gb'] is not None else None,
        }
        base.update({k: v for k, v in overrides.items() if v is not None})
        return validate_cluster(ClusterSpec(**base))

    def handle(self, *args, **options):
        try:
            spec = self.build_spec(options)
            variant = Variant(options['variant'])
            if options['json']:
                payload = CostReportSerializer(cost_report(spec, variant)).data
                self.stdout.write(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False))
                return
            self.write_table(spec, variant)
            if options['k_sweep']:
                self.write_k_sweep(spec)
        except InvariantViolation as e:
            raise CommandError(str(e), returncode=2)
        except ReplicationError as e:
            raise CommandError(str(e), returncode=1)

    def write_table(self, spec, variant):
        static = comm_time_static(spec, variant)
        dynamic = comm_time_dynamic(spec, variant)
        volume = data_volume(spec)
        rows = [
            ('cluster', f'N={spec.nodes} s={spec.slots_per_rank} E={spec.expert_classes}'),
            ('memory footprint (E*O)', _gb(mem_footprint(spec))),
            ('grad data volume (sNG)', _gb(volume['grad'])),
            ('weight data volume (sNW)', _gb(volume['weight'])),
            ('total data volume', _gb(volume['grad'] + volume['weight'])),
            (f'T_grad static [{variant.value}]', f'{static.t_grad:.5f} s'),
            (f'T_weight static [{variant.value}]', f'{static.t_weight:.5f} s'),
            (f'T static total [{variant.value}]', f'{static.total:.4f} s'),
            (f'T_grad dynamic [{variant.value}]', f'{dynamic.t_grad:.5f} s'),
            (f'T_weight dynamic [{variant.value}]', f'{dynamic.t_weight:.5f} s'),
            (f'T dynamic total [{variant.value}]', f'{dynamic.total:.4f} s'),
            ('overhead (offloaded)', f'{100 * overhead_ratio(spec, Variant.OFFLOADED):.2f} %'),
            ('overhead (hbm-only)', f'{100 * overhead_ratio(spec, Variant.HBM_ONLY):.2f} %'),
            ('migrate 1 expert, weights', f'{migration_cost(1, spec, include_optimizer=False):.4g} s'),
            ('migrate 1 expert, optimizer', f'{migration_cost(1, spec, include_weights=False):.4g} s'),
        ]
        width = max(len(name) for name, _ in rows) + 2
        self.stdout.write(f"{'quantity':<{width}}value")
        self.stdout.write('-' * (width + 20))
        for name, value in rows:
            self.stdout.write(f'{name:<{width}}{value}')

    def write_k_sweep(self, spec):
        candidates = range(1, min(spec.nodes, spec.expert_classes) + 1)
        self.stdout.write('')
        self.stdout.write(f"{'k':>6}{'t_grad_bound s':>18}{'t_weight_bound s':>18}{'total s':>12}")
        for k in valid_partition_counts(spec, list(candidates)):
            bound = k_partition_bound(spec, k)
            self.stdout.write(f'{k:>6}{bound.t_grad:>18.5f}{bound.t_weight:>18.5f}{bound.total:>12.5f}')
