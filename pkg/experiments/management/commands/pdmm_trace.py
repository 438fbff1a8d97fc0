from django.core.management.base import BaseCommand

from experiments import services
from experiments.cli import add_common_arguments, apply_overrides, config_errors, load_document, output_dir, validate
from experiments.runner import pdmm_gap_experiment
from experiments.serializers import PdmmTraceRequestSerializer
from pdmm.serializers import CommLedgerSerializer


class Command(BaseCommand):
    help = "Run the randomized protocol and write the objective gap trace to trace.csv."

    def add_arguments(self, parser):
        add_common_arguments(parser)

    def handle(self, *args, **options):
        document = apply_overrides(load_document(options["config"]), options, seed_sections=("pdmm",))
        if options["lam"] is not None and document.get("problem"):
            problem = dict(document["problem"])
            problem["penalty"] = {**problem.get("penalty", {}), "lambda": options["lam"]}
            document["problem"] = problem

        validated = validate(PdmmTraceRequestSerializer, document)
        with config_errors():
            problem = services.trace_problem(validated)
            target = output_dir(options) / "trace.csv"
            result = pdmm_gap_experiment(
                problem, services.pdmm_config(validated), services.oracle_config(validated), out=target,
            )

        ledger = CommLedgerSerializer(result.ledger).data
        self.stdout.write(
            f"F*={result.f_star:.10g} final gap={result.gaps[-1]:.3e} "
            f"uplink={ledger['uplink_msgs']} downlink={ledger['downlink_msgs']} -> {target}"
        )
