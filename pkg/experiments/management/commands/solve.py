import logging

from django.core.management.base import BaseCommand, CommandError

from experiments import services
from experiments.cli import (
    EXIT_NOT_CONVERGED,
    add_common_arguments,
    apply_overrides,
    config_errors,
    load_document,
    output_dir,
    validate,
    write_json,
)
from experiments.serializers import SolveRequestSerializer

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Solve one problem file and write solution.json."

    def add_arguments(self, parser):
        add_common_arguments(parser, solver=True)

    def handle(self, *args, **options):
        document = apply_overrides(load_document(options["config"]), options)
        validated = validate(SolveRequestSerializer, document)
        with config_errors():
            result = services.solve(validated)

        target = write_json(output_dir(options) / "solution.json", result)
        self.stdout.write(
            f"objective={result['objective']:.10g} kkt={result['kkt_residual']:.3e} "
            f"iters={result['iters']} -> {target}"
        )
        if not result["converged"]:
            logger.warning("solver did not converge within %d iterations", result["iters"])
            raise CommandError("solver did not converge", returncode=EXIT_NOT_CONVERGED)
