"""
Structured errors shared by every app.

All errors are DRF ``ValidationError`` subclasses so they carry a machine readable
``detail`` dictionary and surface as HTTP 400 through the REST views.
"""
from rest_framework import status
from rest_framework.exceptions import ValidationError


class FusionError(ValidationError):
    """Base class for structured domain errors."""

    status_code = status.HTTP_400_BAD_REQUEST
    default_code = "invalid"
    field = "error"

    def __init__(self, message, code=None):
        super().__init__({self.field: [message]}, code=code or self.default_code)
        self.message = message

    def __str__(self):
        return self.message


class DimensionMismatch(FusionError):
    """
    Raised when a vector or stack does not have the dimension a consumer expects.

    Attributes:
        expected (int): the declared dimension.
        got (int): the dimension that was supplied.
        what (str): the object whose dimension was checked.
    """

    field = "dimension"
    default_code = "dimension_mismatch"

    def __init__(self, expected, got, what="vector"):
        self.expected = expected
        self.got = got
        self.what = what
        super().__init__(f"{what}: expected {expected}, got {got}")


class PartitionError(FusionError):
    field = "partition"
    default_code = "invalid_partition"


class ConfigError(FusionError):
    field = "config"
    default_code = "invalid_config"


class EmptySampleError(FusionError):
    field = "sampler"
    default_code = "empty_sampler"
