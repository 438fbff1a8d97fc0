from django.conf import settings
from rest_framework import serializers

from .solvers import OracleConfig, OracleMethod, Schedule


def oracle_defaults():
    return settings.FUSION["ORACLE"]


class OracleConfigSerializer(serializers.Serializer):
    """
    Oracle settings. Missing keys fall back to ``settings.FUSION["ORACLE"]``.
    """
    method = serializers.ChoiceField(choices=[m.value for m in OracleMethod], required=False)
    schedule = serializers.ChoiceField(choices=[s.value for s in Schedule], required=False)
    max_iters = serializers.IntegerField(min_value=1, required=False)
    tol = serializers.FloatField(required=False)
    rho = serializers.FloatField(required=False)
    seed = serializers.IntegerField(min_value=0, required=False)
    inner_tol = serializers.FloatField(required=False)
    inner_max_iters = serializers.IntegerField(min_value=1, required=False)
    polish = serializers.BooleanField(required=False)

    def validate_tol(self, value):
        if value <= 0:
            raise serializers.ValidationError("tol must be positive")
        return value

    def validate_rho(self, value):
        if value <= 0:
            raise serializers.ValidationError("rho must be positive")
        return value

    def create(self, validated_data):
        values = {**oracle_defaults(), **validated_data}
        return OracleConfig(**values)


class OracleResultSerializer(serializers.Serializer):
    """{x, objective, kkt_residual, iters, converged}"""
    x = serializers.ListField(child=serializers.ListField(child=serializers.FloatField()))
    objective = serializers.FloatField()
    kkt_residual = serializers.FloatField()
    iters = serializers.IntegerField()
    converged = serializers.BooleanField()

    def to_representation(self, instance):
        if hasattr(instance, "as_dict"):
            instance = instance.as_dict()
        return super().to_representation(instance)
