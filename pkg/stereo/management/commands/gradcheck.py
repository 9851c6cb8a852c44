from django.core.management.base import CommandError

from ...gradcheck import TOLERANCE, run_suite
from ..base import RUNTIME_ERROR, StereoCommand


class Command(StereoCommand):
    help = 'Check every backward pass against central finite differences in float64.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument(
            '--skip-model', action='store_true',
            help='Leave out the end-to-end check of a one-block-per-scale model.',
        )

    def run(self, **options):
        results = run_suite(options['seed'], include_model=not options['skip_model'])
        width = max(len(r.name) for r in results)
        for r in results:
            status = self.style.SUCCESS('ok') if r.passed else self.style.ERROR('FAIL')
            self.stdout.write(f'{r.name.ljust(width)}  {r.max_relative_error:.3e}  {status}')
        failed = [r.name for r in results if not r.passed]
        if failed:
            raise CommandError(
                f'{len(failed)} gradient check(s) above {TOLERANCE:g}: {", ".join(failed)}',
                returncode=RUNTIME_ERROR,
            )
        self.stdout.write(self.style.SUCCESS(f'all {len(results)} checks below {TOLERANCE:g}'))
