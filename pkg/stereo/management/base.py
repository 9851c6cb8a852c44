"""
Shared plumbing for the stereo management commands.

Exit codes: 0 on success, 1 on usage errors (bad flags, bad sizes),
2 when the engine raises during execution.
"""
import logging
import sys
from functools import partial

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ..exceptions import StereoError
from ..model import VARIANTS, ModelConfig
from ..tensor_ops import set_num_threads

logger = logging.getLogger(__name__)

USAGE_ERROR = 1
RUNTIME_ERROR = 2


def _usage_error(parser, message):
    if not parser.called_from_command_line:
        raise CommandError(f'Error: {message}', returncode=USAGE_ERROR)
    parser.print_usage(sys.stderr)
    parser.exit(USAGE_ERROR, f'{parser.prog}: error: {message}\n')


class StereoCommand(BaseCommand):
    requires_system_checks = []
    uses_seed = True

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = partial(_usage_error, parser)
        return parser

    def add_arguments(self, parser):
        parser.add_argument(
            '--threads', type=int, default=settings.LIGHTSTEREO_THREADS,
            help='Kernel worker threads (default: %(default)s).',
        )
        if self.uses_seed:
            parser.add_argument(
                '--seed', type=int, default=settings.LIGHTSTEREO_SEED,
                help='Seed for weights and synthetic data (default: %(default)s).',
            )

    def add_model_arguments(self, parser, ablations=True):
        parser.add_argument(
            '--variant', choices=sorted(VARIANTS), type=str.upper, default=settings.LIGHTSTEREO_VARIANT,
            help='Model size (default: %(default)s).',
        )
        parser.add_argument(
            '--max-disp', type=int, default=settings.LIGHTSTEREO_MAX_DISPARITY,
            help='Maximum disparity in full-resolution pixels, a multiple of 4 (default: %(default)s).',
        )
        if not ablations:
            return
        parser.add_argument(
            '--blocks', type=int, nargs=3, metavar=('B4', 'B8', 'B16'),
            help='Aggregation blocks per scale, overriding the variant (default: the variant\'s).',
        )
        parser.add_argument(
            '--expansion', type=int, nargs=3, metavar=('T4', 'T8', 'T16'),
            help='Expansion factor per scale, overriding the variant (default: the variant\'s).',
        )
        parser.add_argument('--no-msca', action='store_true', help='Build the aggregator without attention.')

    def model_config(self, options):
        max_disparity = options['max_disp']
        if max_disparity < 4 or max_disparity % 4:
            self.usage_error(f'--max-disp must be a positive multiple of 4, got {max_disparity}')
        variant = options['variant']
        blocks, expansion = VARIANTS[variant]
        if options.get('blocks') or options.get('expansion'):
            config = ModelConfig.custom(
                options.get('blocks') or blocks,
                options.get('expansion') or expansion,
                max_disparity=max_disparity,
            )
        else:
            config = ModelConfig.for_variant(variant, max_disparity)
        if options.get('no_msca'):
            config = config.without_msca()
        return config

    def check_size(self, height, width):
        if height < 32 or width < 32 or height % 32 or width % 32:
            self.usage_error(f'input size {height}x{width} must be positive multiples of 32')

    def usage_error(self, message):
        raise CommandError(message, returncode=USAGE_ERROR)

    def handle(self, *args, **options):
        if options['threads'] < 1:
            self.usage_error(f'--threads must be >= 1, got {options["threads"]}')
        set_num_threads(options['threads'])
        try:
            return self.run(**options)
        except (StereoError, OSError) as exc:
            logger.debug('%s failed', type(self).__module__, exc_info=True)
            raise CommandError(str(exc), returncode=RUNTIME_ERROR) from exc

    def run(self, **options):
        raise NotImplementedError
