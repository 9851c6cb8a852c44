from pathlib import Path

from ...formats import read_kitti_disparity, read_pfm
from ...metrics import DEFAULT_THRESHOLDS, compute_metrics
from ...regression import DisparityMap
from ..base import StereoCommand

READERS = {
    'pfm': lambda path: DisparityMap(read_pfm(path)[0]),
    'kitti': read_kitti_disparity,
}


class Command(StereoCommand):
    help = 'Compare a predicted disparity map with ground truth: EPE, bad-N rates and D1.'
    uses_seed = False

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--pred', required=True, help='Predicted disparity (.pfm, or a KITTI .png).')
        parser.add_argument('--gt', required=True, help='Ground-truth disparity.')
        parser.add_argument(
            '--format', choices=sorted(READERS), default='pfm',
            help='Ground-truth file format (default: %(default)s).',
        )
        parser.add_argument(
            '--thresholds', type=float, nargs='+', default=list(DEFAULT_THRESHOLDS),
            help='Extra bad-pixel thresholds in pixels, added to 1 2 3 (default: %(default)s).',
        )

    def run(self, **options):
        pred_format = 'kitti' if Path(options['pred']).suffix.lower() == '.png' else 'pfm'
        pred = READERS[pred_format](options['pred'])
        gt = READERS[options['format']](options['gt'])
        record = compute_metrics(pred, gt, options['thresholds'])
        for name, value in record.as_rows():
            self.stdout.write(f'{name:<12} {value:.6f}' if isinstance(value, float) else f'{name:<12} {value}')
