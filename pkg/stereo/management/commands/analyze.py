from ...analysis import PUBLISHED_REFERENCE, count_flops, reference_ratios
from ...model import build_model
from ..base import StereoCommand


class Command(StereoCommand):
    help = 'Count parameters and FLOPs per pipeline stage for one input size.'
    uses_seed = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_model_arguments(parser)
        parser.add_argument('--height', type=int, default=544, help='Input height (default: %(default)s).')
        parser.add_argument('--width', type=int, default=960, help='Input width (default: %(default)s).')
        parser.add_argument('--csv', help='Also write one row per layer to this CSV file.')
        parser.add_argument('--layers', action='store_true', help='List every layer in the table.')

    def run(self, **options):
        self.check_size(options['height'], options['width'])
        config = self.model_config(options)
        model = build_model(config)
        report = count_flops(model, options['height'], options['width'])

        self.stdout.write(
            f'LightStereo-{config.variant}  input {options["height"]}x{options["width"]}  '
            f'D={config.max_disparity}'
        )
        self.stdout.write(report.format_table(layers=options['layers']))
        self.stdout.write(f'params {report.params / 1e6:.3f} M  FLOPs {report.flops / 1e9:.2f} G')

        if config.variant in PUBLISHED_REFERENCE:
            ref = PUBLISHED_REFERENCE[config.variant]
            ratios = reference_ratios(config.variant, report)
            self.stdout.write(
                f'published {ref["params_m"]} M / {ref["flops_g"]} G  '
                f'ratio params {ratios["params"]:.3f}  FLOPs {ratios["flops"]:.3f}'
            )
        if options['csv']:
            with open(options['csv'], 'w', newline='') as handle:
                report.write_csv(handle)
            self.stdout.write(self.style.SUCCESS(f'wrote {len(report.records)} rows to {options["csv"]}'))
