from rest_framework import serializers

from .ellipses import BenchmarkSpec, EllipseSpec, default_benchmark_spec


class EllipseSpecSerializer(serializers.Serializer):
    center = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2)
    semi_axes = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2)
    rotation = serializers.FloatField(default=0.0)
    label = serializers.ChoiceField(choices=[1, -1])

    def validate_semi_axes(self, value):
        if min(value) <= 0:
            raise serializers.ValidationError("semi-axes must be positive")
        return value

    def create(self, validated_data):
        return EllipseSpec(
            tuple(validated_data["center"]),
            tuple(validated_data["semi_axes"]),
            validated_data["rotation"],
            validated_data["label"],
        )


class ClusterSerializer(serializers.Serializer):
    positive = EllipseSpecSerializer()
    negative = EllipseSpecSerializer()


class BenchmarkSpecSerializer(serializers.Serializer):
    """
    Benchmark geometry and sizes. Without ``clusters`` the default three-cluster
    geometry is used.
    """
    clusters = ClusterSerializer(many=True, required=False)
    points_per_class = serializers.IntegerField(min_value=1, default=100)
    users_per_cluster = serializers.IntegerField(min_value=1, default=20)
    points_per_user = serializers.IntegerField(min_value=1, default=10)
    sample_fraction = serializers.FloatField(required=False, allow_null=True)
    test_points_per_class = serializers.IntegerField(min_value=1, default=100)
    seed = serializers.IntegerField(min_value=0, default=0)

    def validate_sample_fraction(self, value):
        if value is not None and not 0 < value <= 1:
            raise serializers.ValidationError("sample_fraction must lie in (0, 1]")
        return value

    def create(self, validated_data):
        values = dict(validated_data)
        clusters = values.pop("clusters", None)
        if not clusters:
            return default_benchmark_spec(**values)
        ellipse = EllipseSpecSerializer()
        pairs = tuple((ellipse.create(c["positive"]), ellipse.create(c["negative"])) for c in clusters)
        return BenchmarkSpec(clusters=pairs, **values)

    def to_representation(self, instance):
        def ellipse(e):
            return {"center": list(e.center), "semi_axes": list(e.semi_axes), "rotation": e.rotation, "label": e.label}

        return {
            "clusters": [{"positive": ellipse(p), "negative": ellipse(n)} for p, n in instance.clusters],
            "points_per_class": instance.points_per_class,
            "users_per_cluster": instance.users_per_cluster,
            "points_per_user": instance.points_per_user,
            "sample_fraction": instance.sample_fraction,
            "test_points_per_class": instance.test_points_per_class,
            "seed": instance.seed,
        }


def dataset_to_dict(dataset):
    return {"features": dataset.features.tolist(), "labels": dataset.labels.astype(int).tolist()}


def benchmark_to_dict(benchmark):
    return {
        "true_partition": [list(b) for b in benchmark.true_partition.blocks],
        "cluster_train": [dataset_to_dict(d) for d in benchmark.cluster_train],
        "user_datasets": [dataset_to_dict(d) for d in benchmark.user_datasets],
        "cluster_test": [dataset_to_dict(d) for d in benchmark.cluster_test],
    }
