"""
Shared plumbing of the management commands: JSON documents, flag overrides,
validation and exit codes.
"""
import json
import logging
from contextlib import contextmanager
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError
from rest_framework.exceptions import ValidationError

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3

CONVENTION_CHOICES = ["mean-ordered", "mean-unordered", "sum-ordered", "sum-unordered"]


def add_common_arguments(parser, solver=False):
    parser.add_argument("--config", help="JSON configuration document")
    parser.add_argument("--seed", type=int, help="override every seed in the document")
    parser.add_argument("--lambda", dest="lam", type=float, help="override the penalty weight lambda")
    parser.add_argument("--convention", choices=CONVENTION_CHOICES, help="objective normalization")
    parser.add_argument("--out", help="output directory")
    if solver:
        parser.add_argument("--solver", choices=["oracle", "pdmm"], help="solver family")


def load_document(path):
    if not path:
        return {}
    try:
        with open(path) as handle:
            document = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot read {path}: {exc}", returncode=EXIT_CONFIG)
    if not isinstance(document, dict):
        raise CommandError(f"{path} must hold a JSON object", returncode=EXIT_CONFIG)
    return document


def apply_overrides(document, options, seed_sections=("oracle", "pdmm")):
    """CLI flags win over the document."""
    document = dict(document)
    if options.get("lam") is not None:
        penalty = dict(document.get("penalty") or {"kind": "sum_of_norms"})
        penalty["lambda"] = options["lam"]
        document["penalty"] = penalty
        document["lambda"] = options["lam"]
    if options.get("convention"):
        document["convention"] = options["convention"]
    if options.get("seed") is not None:
        for section in seed_sections:
            document[section] = {**(document.get(section) or {}), "seed": options["seed"]}
    if options.get("solver"):
        document["solver"] = options["solver"]
    return document


@contextmanager
def config_errors():
    """Turn structured validation errors into exit code 2."""
    try:
        yield
    except ValidationError as exc:
        raise CommandError(json.dumps(exc.detail, default=str), returncode=EXIT_CONFIG)


def validate(serializer_class, data):
    serializer = serializer_class(data=data)
    if not serializer.is_valid():
        raise CommandError(json.dumps(serializer.errors, default=str), returncode=EXIT_CONFIG)
    return serializer.validated_data


def output_dir(options):
    out = Path(options.get("out") or settings.FUSION["OUTPUT_DIR"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path, payload):
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, default=float)
    logger.info("wrote %s", path)
    return path
