import csv
import logging

from django.conf import settings
from rest_framework import serializers

from .protocol import CommonPoint, PdmmConfig, XSurrogate, Zeros, ZFreeze

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["t", "objective", "gap", "uplink_msgs_cum", "downlink_msgs_cum", "num_distinct_models"]


def pdmm_defaults():
    return settings.FUSION["PDMM"]


class InitSerializer(serializers.Serializer):
    """{"kind": "zeros"} or {"kind": "common_point", "point": [...]}"""
    kind = serializers.ChoiceField(choices=["zeros", "common_point"], default="zeros")
    point = serializers.ListField(child=serializers.FloatField(), required=False, allow_empty=False)

    def validate(self, attrs):
        if attrs["kind"] == "common_point" and "point" not in attrs:
            raise serializers.ValidationError({"point": "common_point needs a point"})
        return attrs

    def create(self, validated_data):
        if validated_data["kind"] == "common_point":
            return CommonPoint(tuple(validated_data["point"]))
        return Zeros()


class ZFreezeSerializer(serializers.Serializer):
    window = serializers.IntegerField(min_value=1)
    tol = serializers.FloatField()

    def validate_tol(self, value):
        if value <= 0:
            raise serializers.ValidationError("tol must be positive")
        return value


class PdmmConfigSerializer(serializers.Serializer):
    """
    Protocol settings. Missing keys fall back to ``settings.FUSION["PDMM"]``.
    """
    rho = serializers.FloatField(required=False)
    eta_x = serializers.FloatField(required=False, min_value=0.0)
    eta_z = serializers.FloatField(required=False, min_value=0.0)
    tau = serializers.FloatField(required=False)
    nu = serializers.FloatField(required=False, min_value=0.0)
    s_p = serializers.IntegerField(required=False, min_value=1)
    s_d = serializers.IntegerField(required=False, min_value=1)
    activation = serializers.FloatField(required=False)
    max_iters = serializers.IntegerField(required=False, min_value=0)
    inner_tol = serializers.FloatField(required=False)
    inner_max_iters = serializers.IntegerField(required=False, min_value=1)
    seed = serializers.IntegerField(required=False, min_value=0)
    init = InitSerializer(required=False)
    z_freeze = ZFreezeSerializer(required=False, allow_null=True)
    x_surrogate = serializers.ChoiceField(choices=[s.value for s in XSurrogate], required=False)

    def validate_rho(self, value):
        if value <= 0:
            raise serializers.ValidationError("rho must be positive")
        return value

    def validate_tau(self, value):
        if value <= 0:
            raise serializers.ValidationError("tau must be positive")
        return value

    def validate_activation(self, value):
        if not 0 < value <= 1:
            raise serializers.ValidationError("activation must lie in (0, 1]")
        return value

    def create(self, validated_data):
        values = {**pdmm_defaults(), **validated_data}
        init = values.pop("init", None)
        values["init"] = InitSerializer().create(init) if init else Zeros()
        freeze = values.pop("z_freeze", None)
        values["z_freeze"] = ZFreeze(freeze["window"], freeze["tol"]) if freeze else None
        return PdmmConfig(**values)


class CommLedgerSerializer(serializers.Serializer):
    uplink_msgs = serializers.IntegerField()
    downlink_msgs = serializers.IntegerField()
    uplink_floats = serializers.IntegerField()
    downlink_floats = serializers.IntegerField()
    aggregate_msgs = serializers.IntegerField()
    aggregate_floats = serializers.IntegerField()
    freeze_skips = serializers.IntegerField()

    def to_representation(self, instance):
        if hasattr(instance, "as_dict"):
            instance = instance.as_dict()
        return super().to_representation(instance)


def trace_rows(trace, f_star=None):
    for record in trace:
        yield {
            "t": record.t,
            "objective": repr(record.objective),
            "gap": repr(record.objective - f_star) if f_star is not None else "",
            "uplink_msgs_cum": record.uplink_msgs_cum,
            "downlink_msgs_cum": record.downlink_msgs_cum,
            "num_distinct_models": record.num_distinct_models,
        }


def write_trace_csv(path, trace, f_star=None):
    """Write a protocol trace; the gap column is empty without F*."""
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        writer.writerows(trace_rows(trace, f_star))
    logger.info("trace with %d rows written to %s", len(trace), path)
    return path
