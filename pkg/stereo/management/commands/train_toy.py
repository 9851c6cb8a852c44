import logging

from ...checkpoint import save_checkpoint
from ...model import build_model
from ...training import TrainConfig, train_loop, write_history
from ..base import StereoCommand

logger = logging.getLogger(__name__)


class Command(StereoCommand):
    help = 'Train a small model on synthetic stereograms and report held-out EPE.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        defaults = TrainConfig()
        self.add_model_arguments(parser)
        parser.set_defaults(variant='S', max_disp=defaults.max_disparity)
        parser.add_argument('--steps', type=int, default=defaults.steps, help='Optimizer steps (default: %(default)s).')
        parser.add_argument('--batch', type=int, default=defaults.batch, help='Pairs per step (default: %(default)s).')
        parser.add_argument('--lr', type=float, help='Learning rate (default: 1e-4 x batch).')
        parser.add_argument(
            '--weight-decay', type=float, default=defaults.weight_decay,
            help='Decoupled weight decay (default: %(default)s).',
        )
        parser.add_argument(
            '--crop', type=int, nargs=2, metavar=('H', 'W'), default=list(defaults.crop),
            help='Training crop, multiples of 32 (default: %(default)s).',
        )
        parser.add_argument(
            '--train-pairs', type=int, default=defaults.train_pairs,
            help='Synthetic training pairs (default: %(default)s).',
        )
        parser.add_argument(
            '--val-pairs', type=int, default=defaults.val_pairs,
            help='Held-out pairs (default: %(default)s).',
        )
        parser.add_argument(
            '--eval-every', type=int, default=defaults.eval_every,
            help='Steps between held-out evaluations (default: %(default)s).',
        )
        parser.add_argument('--cosine', action='store_true', help='Cosine learning-rate decay to zero.')
        parser.add_argument('--history', help='Write the step,loss,epe history to this CSV file.')
        parser.add_argument('--save', help='Write the trained weights to this checkpoint.')

    def run(self, **options):
        crop = tuple(options['crop'])
        self.check_size(*crop)
        config = TrainConfig(
            steps=options['steps'],
            batch=options['batch'],
            lr=options['lr'],
            weight_decay=options['weight_decay'],
            crop=crop,
            seed=options['seed'],
            max_disparity=options['max_disp'],
            train_pairs=options['train_pairs'],
            val_pairs=options['val_pairs'],
            eval_every=options['eval_every'],
            cosine=options['cosine'],
        ).validate()
        model = build_model(self.model_config(options), seed=options['seed'])

        def report(row):
            if row.epe is not None:
                self.stdout.write(f'step {row.step:5d}  loss {row.loss:.4f}  val epe {row.epe:.3f}')
            elif options['verbosity'] > 1:
                self.stdout.write(f'step {row.step:5d}  loss {row.loss:.4f}')

        result = train_loop(model, config, on_row=report)

        if options['history']:
            with open(options['history'], 'w', newline='') as handle:
                write_history(handle, result.history)
        if options['save']:
            save_checkpoint(options['save'], result.model)
        self.stdout.write(self.style.SUCCESS(
            f'held-out EPE {result.initial_epe:.3f} -> {result.final_epe:.3f} px after {config.steps} steps'
        ))
