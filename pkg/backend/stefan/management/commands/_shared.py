import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from stefan.exceptions import ConfigurationError, NumericalError
from stefan.serializers import load_config

logger = logging.getLogger('stefan')

EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_VERIFY = 4


class StefanCommand(BaseCommand):
    """Shared flags (--config, --out, --threads, --seed) and exit-code mapping."""

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help='Path to the JSON run configuration')
        parser.add_argument('--out', default=None, help='Output directory (overrides output_dir)')
        parser.add_argument('--threads', type=int, default=None,
                            help='Worker processes for sweep; other commands record it in the manifest')
        parser.add_argument('--seed', type=int, default=None, help='Seed for sampled diagnostics')

    def load(self, options):
        path = Path(options['config'])
        if not path.exists():
            raise CommandError(f"config file {path} does not exist", returncode=EXIT_VALIDATION)
        try:
            return load_config(path)
        except ConfigurationError as e:
            raise CommandError(f"invalid config ({e.key}): {e}", returncode=EXIT_VALIDATION) from e

    def threads(self, options):
        threads = options['threads'] if options['threads'] is not None else settings.STEFAN_THREADS
        if threads < 1:
            raise CommandError("--threads must be >= 1", returncode=EXIT_VALIDATION)
        return threads

    def run_guarded(self, func, *args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ConfigurationError as e:
            raise CommandError(f"invalid configuration ({e.key}): {e}", returncode=EXIT_VALIDATION) from e
        except NumericalError as e:
            raise CommandError(f"solver failure: {e}", returncode=EXIT_SOLVER) from e
