import numpy as np
from rest_framework import serializers

from losses.serializers import LossSpecSerializer, loss_to_dict

from .formulation import (
    CONVENTION_LABELS,
    ClusteredSumOfNorms,
    Convention,
    FederationProblem,
    GlobalConsensus,
    LocalOnly,
    LossScale,
    PairOrder,
    Partition,
    SquaredNorms,
    SumOfNorms,
)

PENALTY_KINDS = ["sum_of_norms", "squared_norms", "local", "consensus", "clustered_sum_of_norms"]


class ConventionSerializer(serializers.Serializer):
    """
    {"loss_scale": "mean" | "sum", "pair_order": "ordered" | "unordered"}
    """
    loss_scale = serializers.ChoiceField(choices=[s.value for s in LossScale], default="mean")
    pair_order = serializers.ChoiceField(choices=[p.value for p in PairOrder], default="ordered")

    def to_internal_value(self, data):
        if isinstance(data, str):
            if data not in CONVENTION_LABELS:
                raise serializers.ValidationError(f"expected one of {', '.join(CONVENTION_LABELS)}")
            scale, order = data.split("-")
            data = {"loss_scale": scale, "pair_order": order}
        values = super().to_internal_value(data)
        return Convention(LossScale(values["loss_scale"]), PairOrder(values["pair_order"]))

    def to_representation(self, instance):
        return {"loss_scale": instance.loss_scale.value, "pair_order": instance.pair_order.value}


class PartitionField(serializers.ListField):
    """A partition as a list of blocks of 0-based user indices."""
    child = serializers.ListField(child=serializers.IntegerField(min_value=0), allow_empty=False)

    def to_internal_value(self, data):
        blocks = super().to_internal_value(data)
        try:
            return Partition(tuple(tuple(block) for block in blocks))
        except serializers.ValidationError as exc:
            raise serializers.ValidationError(exc.detail)

    def to_representation(self, value):
        return [list(block) for block in value.blocks]


class PenaltySerializer(serializers.Serializer):
    """
    {"kind": "sum_of_norms", "lambda": 0.1}, {"kind": "squared_norms", "gamma": 1.0},
    {"kind": "local"}, {"kind": "consensus"},
    {"kind": "clustered_sum_of_norms", "lambda": 0.1, "partition": [[0, 1], [2]]}
    """
    kind = serializers.ChoiceField(choices=PENALTY_KINDS)
    gamma = serializers.FloatField(required=False, min_value=0.0)
    partition = PartitionField(required=False)

    def get_fields(self):
        fields = super().get_fields()
        fields["lambda"] = serializers.FloatField(required=False, min_value=0.0)
        return fields

    def validate(self, attrs):
        kind = attrs["kind"]
        if kind in ("sum_of_norms", "clustered_sum_of_norms") and "lambda" not in attrs:
            raise serializers.ValidationError({"lambda": f"{kind} needs lambda"})
        if kind == "squared_norms" and "gamma" not in attrs:
            raise serializers.ValidationError({"gamma": "squared_norms needs gamma"})
        if kind == "clustered_sum_of_norms" and "partition" not in attrs:
            raise serializers.ValidationError({"partition": "clustered penalties need a partition"})
        return attrs

    def create(self, validated_data):
        return build_penalty(validated_data)

    def to_representation(self, instance):
        if isinstance(instance, dict):
            return super().to_representation(instance)
        return penalty_to_dict(instance)


def build_penalty(data):
    kind = data["kind"]
    if kind == "sum_of_norms":
        return SumOfNorms(data["lambda"])
    if kind == "squared_norms":
        return SquaredNorms(data["gamma"])
    if kind == "local":
        return LocalOnly()
    if kind == "consensus":
        return GlobalConsensus()
    return ClusteredSumOfNorms(data["lambda"], data["partition"])


def penalty_to_dict(penalty):
    out = {"kind": penalty.kind}
    if hasattr(penalty, "lam"):
        out["lambda"] = penalty.lam
    if hasattr(penalty, "gamma"):
        out["gamma"] = penalty.gamma
    if hasattr(penalty, "partition"):
        out["partition"] = [list(block) for block in penalty.partition.blocks]
    return out


class ProblemSerializer(serializers.Serializer):
    """
    Problem files: {"losses": [...], "penalty": {...}, "convention": {...}}.

    ``save()`` returns a FederationProblem.
    """
    losses = LossSpecSerializer(many=True, allow_empty=False)
    penalty = PenaltySerializer()
    convention = ConventionSerializer(required=False)

    def validate(self, attrs):
        dims = set()
        for loss in attrs["losses"]:
            if loss["kind"] == "squared_hinge":
                dims.add(len(loss["points"][0]["x"]) + 1)
            else:
                dims.add(len(loss["anchor"]))
        if len(dims) != 1:
            raise serializers.ValidationError({"losses": f"losses disagree on dimension: {sorted(dims)}"})
        attrs["dim_d"] = dims.pop()

        penalty = attrs["penalty"]
        n = len(attrs["losses"])
        if penalty["kind"] == "clustered_sum_of_norms" and penalty["partition"].n_users != n:
            raise serializers.ValidationError({"partition": f"partition must cover {n} users"})
        return attrs

    def create(self, validated_data):
        loss_serializer = LossSpecSerializer()
        losses = [loss_serializer.create(item) for item in validated_data["losses"]]
        return FederationProblem(
            losses=losses,
            dim_d=validated_data["dim_d"],
            penalty=build_penalty(validated_data["penalty"]),
            convention=validated_data.get("convention") or Convention(),
        )

    def to_representation(self, instance):
        return {
            "losses": [loss_to_dict(loss) for loss in instance.losses],
            "penalty": penalty_to_dict(instance.penalty),
            "convention": ConventionSerializer().to_representation(instance.convention),
        }


class StackField(serializers.ListField):
    """Stacks as JSON arrays of arrays."""
    child = serializers.ListField(child=serializers.FloatField(), allow_empty=False)

    def to_internal_value(self, data):
        rows = super().to_internal_value(data)
        if len({len(r) for r in rows}) > 1:
            raise serializers.ValidationError("all models must share a dimension")
        return np.array(rows, dtype=float)

    def to_representation(self, value):
        return np.asarray(value, dtype=float).tolist()
