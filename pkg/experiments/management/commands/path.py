from django.core.management.base import BaseCommand

from clustering.path import write_jsonl, write_summary_csv
from experiments import services
from experiments.cli import add_common_arguments, apply_overrides, config_errors, load_document, output_dir, validate
from experiments.serializers import PathRequestSerializer


class Command(BaseCommand):
    help = "Warm-started solution path over a geometric lambda grid; writes path.jsonl and path.csv."

    def add_arguments(self, parser):
        add_common_arguments(parser, solver=True)

    def handle(self, *args, **options):
        document = apply_overrides(load_document(options["config"]), options, seed_sections=())
        path_section = dict(document.get("path") or {})
        if options["seed"] is not None:
            path_section["pdmm"] = {**(path_section.get("pdmm") or {}), "seed": options["seed"]}
        if options["solver"]:
            path_section["solver"] = options["solver"]
        if options["lam"] is not None:
            path_section["lambda_init"] = options["lam"]
        document["path"] = path_section

        validated = validate(PathRequestSerializer, document)
        with config_errors():
            result, _ = services.path(validated)

        out = output_dir(options)
        write_jsonl(out / "path.jsonl", result)
        write_summary_csv(out / "path.csv", result)
        for lam, count in zip(result.lambdas, result.cluster_counts):
            self.stdout.write(f"lambda={lam:.6g} clusters={count}")
        self.stdout.write(self.style.SUCCESS(f"{len(result.entries)} path entries written to {out}"))
