import json
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from cluster.exceptions import InvariantViolation, ReplicationError
from cluster.serializers import PlacementSerializer
from cluster.types import PRESETS, popularity_for, with_overrides
from comms.serializers import CommPlanSerializer
from comms.services.comm_plan import build_comm_plan
from placement.services.scheduler import SchedulerInput, compute_placement


class Command(BaseCommand):
    help = 'Run the expert placement scheduler once on a popularity vector'

    def add_arguments(self, parser):
        parser.add_argument('--popularity', type=str, required=True, help='Comma-separated token counts, e.g. 60,20,15,5')
        parser.add_argument('--nodes', type=int, required=True, help='Nodes N (one rank each)')
        parser.add_argument('--slots', type=int, required=True, help='Expert slots per rank s')
        parser.add_argument('--experts', type=int, help='Expert classes E (default: length of --popularity)')
        parser.add_argument(
            '--plan-out',
            type=str,
            help='Also write the communication plan of this placement as JSON (worked-example byte sizes)'
        )
        parser.add_argument('--json', action='store_true', help='Print the placement as JSON instead of a table')

    def handle(self, *args, **options):
        try:
            popularity = [int(v) for v in options['popularity'].split(',') if v.strip()]
        except ValueError:
            raise CommandError(f"--popularity must be comma-separated integers, got {options['popularity']!r}", returncode=1)

        experts = options['experts'] if options['experts'] is not None else len(popularity)
        if len(popularity) != experts:
            raise CommandError(
                f'--popularity has {len(popularity)} entries but --experts is {experts}',
                returncode=1
            )

        try:
            spec = with_overrides(
                PRESETS['paper-example'],
                nodes=options['nodes'],
                slots_per_rank=options['slots'],
                expert_classes=experts,
            )
            vector = popularity_for(spec, popularity)
            placement = compute_placement(SchedulerInput.for_spec(vector, spec))
            if options['plan_out']:
                plan = build_comm_plan(placement, placement, spec)
                path = Path(options['plan_out'])
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(CommPlanSerializer(plan).data, indent=2), encoding='utf-8')
        except InvariantViolation as e:
            raise CommandError(str(e), returncode=2)
        except (ReplicationError, OSError) as e:
            raise CommandError(str(e), returncode=1)

        if options['json']:
            self.stdout.write(json.dumps(PlacementSerializer(placement).data))
            return

        self.stdout.write(f"replica counts: {','.join(str(c) for c in placement.replica_counts)}")
        self.stdout.write(f"slot assignment: {','.join(str(c) for c in placement.slot_assignment)}")
        for rank in range(spec.nodes):
            slots = placement.slot_assignment[rank * spec.slots_per_rank:(rank + 1) * spec.slots_per_rank]
            self.stdout.write(f"  rank {rank}: {' '.join(str(c) for c in slots)}")
        if options['plan_out']:
            self.stdout.write(self.style.SUCCESS(f"Wrote communication plan to {options['plan_out']}"))
