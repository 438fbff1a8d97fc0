from django.core.management.base import BaseCommand

from experiments.cli import add_common_arguments, apply_overrides, config_errors, load_document, output_dir, validate
from experiments.runner import run_experiment
from experiments.serializers import ExperimentConfigSerializer


class Command(BaseCommand):
    help = "Five-family benchmark experiment; writes metrics.csv, summary.csv, solutions/ and meta.json."

    def add_arguments(self, parser):
        add_common_arguments(parser)
        parser.add_argument("--workers", type=int, help="worker processes")

    def handle(self, *args, **options):
        document = apply_overrides(load_document(options["config"]), options, seed_sections=())
        if options["seed"] is not None:
            document["seeds"] = [options["seed"]]
        if options["lam"] is not None:
            document["lambda_grid"] = [options["lam"]]
        if options["workers"] is not None:
            document["workers"] = options["workers"]
        document["output_dir"] = str(output_dir(options))

        validated = validate(ExperimentConfigSerializer, document)
        with config_errors():
            cfg = ExperimentConfigSerializer().create(validated)
            rows = run_experiment(cfg)

        failed = sum(1 for row in rows if not row.converged)
        if failed:
            self.stdout.write(self.style.WARNING(f"{failed} run(s) did not converge"))
        self.stdout.write(self.style.SUCCESS(f"{len(rows)} rows written to {cfg.output_dir}"))
