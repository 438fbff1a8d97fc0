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
from experiments.serializers import CertifyRequestSerializer
from theory.serializers import RecoveryCertificateSerializer


class Command(BaseCommand):
    help = "A-posteriori recovery check of a sum-of-norms solution; writes certificate.json."

    def add_arguments(self, parser):
        add_common_arguments(parser)

    def handle(self, *args, **options):
        document = apply_overrides(load_document(options["config"]), options, seed_sections=("oracle", "sampler"))
        validated = validate(CertifyRequestSerializer, document)
        with config_errors():
            certificate = services.certify(validated)

        payload = RecoveryCertificateSerializer(certificate).data
        target = write_json(output_dir(options) / "certificate.json", payload)
        self.stdout.write(
            f"K={payload['K']} lambda={payload['lambda']:.6g} recovered={payload['recovered']} -> {target}"
        )
        if not certificate.converged:
            raise CommandError("the solution is not certified optimal", returncode=EXIT_NOT_CONVERGED)
