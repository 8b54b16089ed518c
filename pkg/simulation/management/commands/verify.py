from django.core.management.base import BaseCommand, CommandError

from simulation.services.verification import VerificationSuite


class Command(BaseCommand):
    help = 'Run the built-in oracle suite and print pass/fail per property'

    def add_arguments(self, parser):
        parser.add_argument(
            '--only',
            type=str,
            nargs='+',
            choices=list(VerificationSuite.check_names()),
            help='Run only the named checks'
        )
        parser.add_argument('--seed', type=int, help='Fuzz seed (default: VERIFY_SEED)')

    def handle(self, *args, **options):
        suite = VerificationSuite(seed=options['seed'])
        results = suite.run(options['only'])

        for result in results:
            status = self.style.SUCCESS('PASS') if result.passed else self.style.ERROR('FAIL')
            self.stdout.write(f'{status} {result.name:<26} {result.seconds:7.2f}s  {result.detail}')

        failed = [r.name for r in results if not r.passed]
        if failed:
            raise CommandError(f"{len(failed)} check(s) failed: {', '.join(failed)}", returncode=2)
        self.stdout.write(self.style.SUCCESS(f'All {len(results)} checks passed'))
