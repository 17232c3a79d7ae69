from bench.management.base import LabCommand, csv_list
from bench.tasks import format_table, sweep


class Command(LabCommand):
    help = 'Evaluate one policy per (architecture, alpha) and emit the trade-off table'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--alphas', type=csv_list(float), default=[10.0, 30.0, 50.0],
                            help='Comma-separated alpha values')
        parser.add_argument('--archs', type=csv_list(str), default=['transformer', 'cnn'],
                            help='Comma-separated architectures')
        parser.add_argument('--runs-dir', type=str, help='Directory holding <arch>_alpha<alpha>/ run folders')
        parser.add_argument('--out', type=str, help='Directory for sweep.csv, sweep.txt and per-run reports')
        parser.add_argument('--episodes', type=int, help='Episodes per evaluation (default: eval.episodes)')
        parser.add_argument('--train-missing', action='store_true', help='Train policies without a checkpoint')

    def run(self, **options):
        overrides = {}
        if options.get('episodes') is not None:
            overrides['eval.episodes'] = options['episodes']
        run_config = self.load_config(options, overrides)
        # reject bad archs and alphas before any evaluation starts
        for arch in options['archs']:
            run_config.with_values({'policy.arch': arch})
        for alpha in options['alphas']:
            run_config.with_values({'reward.alpha': alpha})

        runs_dir = options.get('runs_dir') or self.lab_setting('RUNS_DIR', 'runs')
        out = options.get('out') or runs_dir
        rows = sweep(options['alphas'], options['archs'], run_config, runs_dir, out,
                     train_missing=options['train_missing'])
        self.stdout.write(format_table(rows))
        self.success(f"Sweep of {len(rows)} policies written to {out}")
