from ...analysis import PUBLISHED_REFERENCE, profile
from ...model import STAGES, build_model
from ..base import StereoCommand


class Command(StereoCommand):
    help = 'Median wall-clock time per pipeline stage for one forward pass.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_model_arguments(parser)
        parser.add_argument('--height', type=int, default=544, help='Input height (default: %(default)s).')
        parser.add_argument('--width', type=int, default=960, help='Input width (default: %(default)s).')
        parser.add_argument('--repeats', type=int, default=10, help='Timed passes (default: %(default)s).')
        parser.add_argument('--warmup', type=int, default=3, help='Untimed passes, at least 3 (default: %(default)s).')

    def run(self, **options):
        self.check_size(options['height'], options['width'])
        if options['repeats'] < 1 or options['warmup'] < 3:
            self.usage_error('--repeats must be >= 1 and --warmup >= 3')
        config = self.model_config(options)
        model = build_model(config, seed=options['seed'])
        report = profile(
            model, options['height'], options['width'],
            repeats=options['repeats'], warmup=options['warmup'], seed=options['seed'],
        )
        self.stdout.write(f'LightStereo-{config.variant}  input {options["height"]}x{options["width"]}')
        self.stdout.write(report.format_table())
        stage_sum = sum(report.stages.values())
        self.stdout.write(f'stage medians sum to {stage_sum / report.total:.1%} of the total')
        ref = PUBLISHED_REFERENCE.get(config.variant)
        if ref:
            published = ', '.join(f'{s} {ref["runtime_ms"][s]:.2f}' for s in STAGES)
            self.stdout.write(f'published (ms, GPU): {published}')
