from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from degrade.exceptions import DegradationError
from evaluation.exceptions import EvaluationError
from grounding.exceptions import GroundingError
from restoration.exceptions import RestorationError
from training.exceptions import TrainingError

from .config import resolve_config
from .exceptions import RunConfigError

DOMAIN_ERRORS = (
    DegradationError, GroundingError, RestorationError, TrainingError, EvaluationError,
    RunConfigError, ValidationError, OSError,
)


class PipelineCommand(BaseCommand):
    """Resolves --config plus flags through ``serializer_class`` and calls run()."""

    serializer_class = None

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON file with run options; flags given on the command line win.')
        self.add_run_arguments(parser)

    def add_run_arguments(self, parser):
        raise NotImplementedError

    def handle(self, *args, **options):
        overrides = {name: options.get(name) for name in self.serializer_class().fields}
        try:
            config = resolve_config(self.serializer_class, options.get('config'), **overrides)
            self.run(config)
        except DOMAIN_ERRORS as exc:
            raise CommandError(f'{type(exc).__name__}: {exc}') from exc

    def run(self, config):
        raise NotImplementedError
