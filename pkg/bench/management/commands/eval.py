import json

from django.core.management.base import CommandError

from bench.management.base import USAGE_EXIT, LabCommand
from bench.tasks import evaluate_checkpoint, run_oracle


class Command(LabCommand):
    help = 'Evaluate a checkpoint (or the privileged oracle) over seeded episodes'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', type=str, help='Agent checkpoint to evaluate')
        parser.add_argument('--oracle', action='store_true', help='Evaluate the ground-truth oracle instead')
        parser.add_argument('--episodes', type=int, help='Number of episodes (default: eval.episodes)')
        parser.add_argument('--out', type=str, help='Directory for report.json and episodes.csv')
        parser.add_argument('--workers', type=int, help='Parallel evaluation threads')

    def run(self, **options):
        if bool(options.get('checkpoint')) == bool(options.get('oracle')):
            raise CommandError('eval: give exactly one of --checkpoint or --oracle', returncode=USAGE_EXIT)
        overrides = {}
        if options.get('episodes') is not None:
            overrides['eval.episodes'] = options['episodes']
        if options.get('workers') is not None:
            overrides['eval.workers'] = options['workers']
        run_config = self.load_config(options, overrides)

        if options.get('oracle'):
            report = run_oracle(run_config, out_dir=options.get('out'))
        else:
            report = evaluate_checkpoint(options['checkpoint'], run_config, out_dir=options.get('out'))
        self.stdout.write(json.dumps(report.summary(), indent=2))
        self.success(f"Evaluated {report.n_episodes} episodes: success rate {report.success_rate:.3f}")
