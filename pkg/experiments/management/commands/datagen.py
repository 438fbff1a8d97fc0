from django.core.management.base import BaseCommand

from datagen.ellipses import generate, write_csv
from datagen.serializers import BenchmarkSpecSerializer, benchmark_to_dict
from experiments.cli import add_common_arguments, config_errors, load_document, output_dir, validate, write_json


class Command(BaseCommand):
    help = "Generate the ellipse benchmark; writes dataset.json, train.csv and test.csv."

    def add_arguments(self, parser):
        add_common_arguments(parser)

    def handle(self, *args, **options):
        document = load_document(options["config"])
        if options["seed"] is not None:
            document["seed"] = options["seed"]

        validated = validate(BenchmarkSpecSerializer, document)
        with config_errors():
            spec = BenchmarkSpecSerializer().create(validated)
            benchmark = generate(spec)

        out = output_dir(options)
        write_json(out / "dataset.json", {
            "spec": BenchmarkSpecSerializer(spec).data,
            **benchmark_to_dict(benchmark),
        })
        write_csv(out / "train.csv", benchmark, split="train")
        write_csv(out / "test.csv", benchmark, split="test")
        self.stdout.write(self.style.SUCCESS(
            f"{len(benchmark.user_datasets)} users in {len(benchmark.cluster_train)} clusters written to {out}"
        ))
