from pathlib import Path

from bench.management.base import LabCommand
from bench.tasks import run_dir_name, run_training


class Command(LabCommand):
    help = 'Train a SAC re-grasp policy and write checkpoints plus the training log'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--arch', choices=['transformer', 'cnn'], default='transformer',
                            help='Policy trunk architecture')
        parser.add_argument('--alpha', type=float, default=30.0, help='Reward hyper-parameter alpha (> 0)')
        parser.add_argument('--out', type=str, help='Output directory (default: <runs dir>/<arch>_alpha<alpha>)')
        parser.add_argument('--steps', type=int, help='Override train.total_env_steps')

    def run(self, **options):
        overrides = {'policy.arch': options['arch'], 'reward.alpha': options['alpha']}
        if options.get('steps') is not None:
            overrides['train.total_env_steps'] = options['steps']
        run_config = self.load_config(options, overrides)
        out = options.get('out') or str(
            Path(self.lab_setting('RUNS_DIR', 'runs')) / run_dir_name(options['arch'], options['alpha']))

        self.stdout.write(f"Training {run_config.policy.arch} policy, alpha={run_config.reward.alpha:g}, "
                          f"seed={run_config.seed}, {run_config.train.total_env_steps} env steps -> {out}")
        result, record = run_training(run_config, out)
        self.success(f"Training run {record.pk} finished: {result.env_steps} env steps, "
                     f"{len(result.rows)} episodes, {result.updates} updates; "
                     f"checkpoint {record.checkpoint_path}")
