"""
Shared plumbing for the lab's management commands.

Argument and configuration problems exit with code 1, failures while running
(checkpoint, training, I/O) with code 2.
"""

import logging
import sys

from django.core.management.base import BaseCommand, CommandError

from grasping.exceptions import ConfigError, GraspLabError, UsageError

from bench.run_config import load_run_config
from bench.tasks import lab_setting

logger = logging.getLogger(__name__)

USAGE_EXIT = 1
RUNTIME_EXIT = 2


def csv_list(cast):
    def parse(text):
        return [cast(item.strip()) for item in text.split(',') if item.strip()]
    return parse


class LabCommand(BaseCommand):
    config_required = False

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        # argparse errors become CommandError (exit 1) instead of SystemExit(2)
        parser.called_from_command_line = False
        return parser

    def run_from_argv(self, argv):
        try:
            super().run_from_argv(argv)
        except CommandError as e:
            # raised while parsing arguments, before execute() could catch it
            self.stderr.write(f"CommandError: {e}")
            sys.exit(e.returncode)

    def add_arguments(self, parser):
        parser.add_argument('--config', type=str, required=self.config_required,
                            help='Run configuration file (key = value lines)')
        parser.add_argument('--seed', type=int, help='Override the configured master seed')

    def load_config(self, options, overrides=None):
        overrides = dict(overrides or {})
        if options.get('seed') is not None:
            overrides['seed'] = options['seed']
        return load_run_config(options.get('config'), overrides)

    def lab_setting(self, key, default=None):
        return lab_setting(key, default)

    def run(self, **options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except (ConfigError, UsageError) as e:
            message = f"{self.__module__.rsplit('.', 1)[-1]}: {str(e)}"
            logger.error(message)
            raise CommandError(message, returncode=USAGE_EXIT) from e
        except (GraspLabError, OSError) as e:
            message = f"{self.__module__.rsplit('.', 1)[-1]} failed: {str(e)}"
            logger.error(message)
            raise CommandError(message, returncode=RUNTIME_EXIT) from e

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))
        logger.info(message)
