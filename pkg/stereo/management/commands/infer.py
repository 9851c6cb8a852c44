import logging

from ...checkpoint import load_checkpoint
from ...formats import colorize_disparity, read_image, write_pfm, write_png
from ...model import build_model, infer, pad_to_multiple
from ..base import StereoCommand

logger = logging.getLogger(__name__)


class Command(StereoCommand):
    help = 'Predict the disparity of a rectified image pair and write it as PFM.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--left', required=True, help='Left image (PNG, PPM or PGM).')
        parser.add_argument('--right', required=True, help='Right image, same size as the left one.')
        parser.add_argument(
            '--weights',
            help='LSWT checkpoint for the chosen variant (default: untrained weights drawn from --seed).',
        )
        self.add_model_arguments(parser, ablations=False)
        parser.add_argument('--out', required=True, help='Output PFM disparity map.')
        parser.add_argument('--out-vis', help='Optional false-colour PNG of the disparity.')

    def run(self, **options):
        left = read_image(options['left'])
        right = read_image(options['right'])
        if left.shape != right.shape:
            lh, lw = left.shape[:2]
            rh, rw = right.shape[:2]
            self.usage_error(f'left image is {lh}x{lw} but right image is {rh}x{rw}')

        config = self.model_config(options)
        model = build_model(config, seed=options['seed'])
        if options['weights']:
            load_checkpoint(options['weights'], model)
        else:
            logger.warning('no --weights given, predicting with untrained weights')

        left, (height, width) = pad_to_multiple(left)
        right, _ = pad_to_multiple(right)
        disparity = infer(model, left, right)[:height, :width]

        write_pfm(options['out'], disparity.values)
        if options['out_vis']:
            write_png(options['out_vis'], colorize_disparity(disparity, config.max_disparity))
        self.stdout.write(self.style.SUCCESS(
            f'wrote {height}x{width} disparity to {options["out"]} '
            f'(range {disparity.values.min():.2f}..{disparity.values.max():.2f} px)'
        ))
