import math

import numpy as np
from rest_framework import serializers

from .specs import AveragedLoss, Huber, Quadratic, SquaredHinge


def finite_float_list(**kwargs):
    return serializers.ListField(
        child=serializers.FloatField(allow_null=False),
        allow_empty=False,
        **kwargs,
    )


class DataPointSerializer(serializers.Serializer):
    """
    One labelled feature vector: {"x": [...], "label": +1 | -1}.
    """
    x = finite_float_list()
    label = serializers.ChoiceField(choices=[-1, 1])

    def validate_x(self, value):
        if not all(math.isfinite(v) for v in value):
            raise serializers.ValidationError("features must be finite")
        return value


class LossSpecSerializer(serializers.Serializer):
    """
    Serializer for local cost documents.

    {"kind": "quadratic", "anchor": [...], "scale": 1.0}
    {"kind": "squared_hinge", "points": [{"x": [...], "label": 1}, ...], "reg_c": 0.001}
    {"kind": "huber", "anchor": [...], "delta": 1.0}

    ``save()`` returns the immutable LossSpec; ``to_representation`` accepts one.
    """
    kind = serializers.ChoiceField(choices=["quadratic", "squared_hinge", "huber"])
    anchor = finite_float_list(required=False)
    scale = serializers.FloatField(required=False, default=1.0, min_value=0.0)
    delta = serializers.FloatField(required=False, default=1.0, min_value=0.0)
    points = DataPointSerializer(many=True, required=False)
    reg_c = serializers.FloatField(required=False, default=0.0, min_value=0.0)

    def validate(self, attrs):
        kind = attrs["kind"]
        if kind in ("quadratic", "huber") and not attrs.get("anchor"):
            raise serializers.ValidationError({"anchor": f"{kind} losses need an anchor"})
        if kind == "quadratic" and attrs["scale"] <= 0:
            raise serializers.ValidationError({"scale": "scale must be positive"})
        if kind == "huber" and attrs["delta"] <= 0:
            raise serializers.ValidationError({"delta": "delta must be positive"})
        if kind == "squared_hinge":
            points = attrs.get("points") or []
            if not points:
                raise serializers.ValidationError({"points": "squared hinge losses need data points"})
            if len({len(p["x"]) for p in points}) != 1:
                raise serializers.ValidationError({"points": "all feature vectors must share a dimension"})
        return attrs

    def create(self, validated_data):
        return build_loss(validated_data)

    def to_representation(self, instance):
        if isinstance(instance, dict):
            return super().to_representation(instance)
        return loss_to_dict(instance)


def build_loss(data):
    kind = data["kind"]
    if kind == "quadratic":
        return Quadratic(anchor=data["anchor"], scale=data.get("scale", 1.0))
    if kind == "huber":
        return Huber(anchor=data["anchor"], delta=data.get("delta", 1.0))
    points = data["points"]
    return SquaredHinge(
        features=[p["x"] for p in points],
        labels=[p["label"] for p in points],
        reg_c=data.get("reg_c", 0.0),
    )


def loss_to_dict(loss):
    if isinstance(loss, Quadratic):
        return {"kind": loss.kind, "anchor": loss.anchor.tolist(), "scale": loss.scale}
    if isinstance(loss, Huber):
        return {"kind": loss.kind, "anchor": loss.anchor.tolist(), "delta": loss.delta}
    if isinstance(loss, SquaredHinge):
        return {
            "kind": loss.kind,
            "points": [
                {"x": x.tolist(), "label": int(label)}
                for x, label in zip(loss.features, loss.labels)
            ],
            "reg_c": loss.reg_c,
        }
    if isinstance(loss, AveragedLoss):
        return {"kind": loss.kind, "members": [loss_to_dict(m) for m in loss.members]}
    raise TypeError(f"cannot serialize {type(loss).__name__}")


def dataset_to_points(features, labels):
    return [{"x": np.asarray(x).tolist(), "label": int(label)} for x, label in zip(features, labels)]
