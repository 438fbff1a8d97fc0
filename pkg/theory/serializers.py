from django.conf import settings
from rest_framework import serializers


class SamplerSerializer(serializers.Serializer):
    """Sublevel sampling options for the conservative bounds."""
    n_samples = serializers.IntegerField(min_value=1, required=False)
    batch_size = serializers.IntegerField(min_value=1, required=False)
    seed = serializers.IntegerField(min_value=0, default=0)
    upper_value = serializers.FloatField(required=False, allow_null=True)

    def create(self, validated_data):
        return {**settings.FUSION["SUBLEVEL"], "upper_value": None, **validated_data}


class RecoveryCertificateSerializer(serializers.Serializer):
    def to_representation(self, instance):
        return instance.as_dict()


class HeterogeneityProfileSerializer(serializers.Serializer):
    def to_representation(self, instance):
        return instance.as_dict()
