from django.conf import settings
from rest_framework import serializers

from clustering.serializers import PathConfigSerializer
from datagen.serializers import BenchmarkSpecSerializer
from oracle.serializers import OracleConfigSerializer
from pdmm.serializers import PdmmConfigSerializer
from problem.serializers import ConventionSerializer, ProblemSerializer, StackField
from theory.serializers import SamplerSerializer

from .runner import ExperimentConfig, Family, default_grid

SOLVERS = ["oracle", "pdmm"]


class SolveRequestSerializer(ProblemSerializer):
    """A problem document plus solver settings."""
    solver = serializers.ChoiceField(choices=SOLVERS, default="oracle")
    oracle = OracleConfigSerializer(required=False)
    pdmm = PdmmConfigSerializer(required=False)


class CertifyRequestSerializer(ProblemSerializer):
    """
    A sum-of-norms problem and optionally a solution stack; without one the problem
    is solved first.
    """
    solution = StackField(required=False)
    tol_tie = serializers.FloatField(required=False, allow_null=True)
    oracle = OracleConfigSerializer(required=False)
    sampler = SamplerSerializer(required=False, allow_null=True)

    def validate(self, attrs):
        attrs = super().validate(attrs)
        if attrs["penalty"]["kind"] != "sum_of_norms":
            raise serializers.ValidationError({"penalty": "certificates need a sum_of_norms penalty"})
        tol = attrs.get("tol_tie")
        if tol is not None and tol <= 0:
            raise serializers.ValidationError({"tol_tie": "must be positive"})
        return attrs


class PathRequestSerializer(ProblemSerializer):
    path = PathConfigSerializer(required=False)

    def validate(self, attrs):
        attrs = super().validate(attrs)
        if attrs["penalty"]["kind"] != "sum_of_norms":
            raise serializers.ValidationError({"penalty": "solution paths need a sum_of_norms penalty"})
        return attrs


class ExperimentConfigSerializer(serializers.Serializer):
    """
    Benchmark experiment settings; grids, seeds and ``reg_c`` default to
    ``settings.FUSION["EXPERIMENT"]``.
    """
    benchmark = BenchmarkSpecSerializer(required=False)
    lambda_grid = serializers.ListField(child=serializers.FloatField(min_value=0.0), required=False, allow_empty=False)
    gamma_grid = serializers.ListField(child=serializers.FloatField(min_value=0.0), required=False, allow_empty=False)
    reg_c = serializers.FloatField(required=False, min_value=0.0)
    seeds = serializers.ListField(child=serializers.IntegerField(min_value=0), required=False, allow_empty=False)
    families = serializers.ListField(
        child=serializers.ChoiceField(choices=[f.value for f in Family]), required=False, allow_empty=False,
    )
    workers = serializers.IntegerField(required=False, min_value=1)
    distinct_tol = serializers.FloatField(required=False)
    convention = ConventionSerializer(required=False)
    oracle = OracleConfigSerializer(required=False)
    output_dir = serializers.CharField(required=False, allow_null=True)

    def create(self, validated_data):
        defaults = settings.FUSION["EXPERIMENT"]
        values = dict(validated_data)
        values["benchmark"] = BenchmarkSpecSerializer().create(values.get("benchmark") or {})
        values["oracle"] = OracleConfigSerializer().create(values.get("oracle") or {})
        values.setdefault("lambda_grid", default_grid())
        values.setdefault("gamma_grid", default_grid())
        values.setdefault("reg_c", defaults["reg_c"])
        values.setdefault("seeds", defaults["seeds"])
        values.setdefault("distinct_tol", defaults["distinct_tol"])
        values.setdefault("workers", settings.FUSION["WORKERS"])
        return ExperimentConfig(**values)


class PdmmTraceRequestSerializer(serializers.Serializer):
    """
    A problem document, or a benchmark with ``lambda`` and ``reg_c`` to build the
    squared hinge instance, plus protocol and oracle settings.
    """
    problem = ProblemSerializer(required=False)
    benchmark = BenchmarkSpecSerializer(required=False)
    reg_c = serializers.FloatField(required=False, min_value=0.0)
    pdmm = PdmmConfigSerializer(required=False)
    oracle = OracleConfigSerializer(required=False)
    convention = ConventionSerializer(required=False)

    def get_fields(self):
        fields = super().get_fields()
        fields["lambda"] = serializers.FloatField(required=False, min_value=0.0)
        return fields

    def validate(self, attrs):
        if "problem" in attrs and attrs["problem"]["penalty"]["kind"] != "sum_of_norms":
            raise serializers.ValidationError({"problem": "the protocol needs a sum_of_norms penalty"})
        return attrs
