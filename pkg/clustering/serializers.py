from django.conf import settings
from rest_framework import serializers

from oracle.serializers import OracleConfigSerializer
from pdmm.serializers import PdmmConfigSerializer

from .path import PathConfig, PathSolver


class PathConfigSerializer(serializers.Serializer):
    """
    Path settings; ``growth_c`` and ``max_steps`` default to ``settings.FUSION["PATH"]``.
    """
    lambda_init = serializers.FloatField(required=False, allow_null=True)
    growth_c = serializers.FloatField(required=False)
    max_steps = serializers.IntegerField(required=False, min_value=1)
    tie_tol = serializers.FloatField(required=False, allow_null=True)
    solver = serializers.ChoiceField(choices=[s.value for s in PathSolver], required=False)
    oracle = OracleConfigSerializer(required=False)
    pdmm = PdmmConfigSerializer(required=False)
    certify = serializers.BooleanField(required=False)

    def validate_growth_c(self, value):
        if value <= 1:
            raise serializers.ValidationError("growth_c must exceed 1")
        return value

    def validate_lambda_init(self, value):
        if value is not None and value <= 0:
            raise serializers.ValidationError("lambda_init must be positive")
        return value

    def validate_tie_tol(self, value):
        if value is not None and value <= 0:
            raise serializers.ValidationError("tie_tol must be positive")
        return value

    def create(self, validated_data):
        values = {**settings.FUSION["PATH"], **validated_data}
        values["oracle"] = OracleConfigSerializer().create(values.get("oracle") or {})
        values["pdmm"] = PdmmConfigSerializer().create(values.get("pdmm") or {})
        return PathConfig(**values)


class PathEntrySerializer(serializers.Serializer):
    def to_representation(self, instance):
        return instance.as_dict()


class SolutionPathSerializer(serializers.Serializer):
    def to_representation(self, instance):
        return {
            "entries": PathEntrySerializer(instance.entries, many=True).data,
            "lambdas": instance.lambdas,
            "cluster_counts": instance.cluster_counts,
        }
