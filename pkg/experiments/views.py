import logging

from rest_framework import status
from rest_framework.permissions import AllowAny
from rest_framework.response import Response
from rest_framework.views import APIView

from drf_spectacular.utils import OpenApiResponse, extend_schema

from theory.serializers import RecoveryCertificateSerializer

from . import services
from .serializers import CertifyRequestSerializer, PathRequestSerializer, SolveRequestSerializer

logger = logging.getLogger(__name__)


class SolveAPIView(APIView):
    """
    API view solving one federation problem.

    - POST: problem document plus solver settings; returns the solution stack.
    """
    permission_classes = [AllowAny]

    @extend_schema(
        request=SolveRequestSerializer,
        responses={
            200: OpenApiResponse(description="x, objective, kkt_residual, iters, converged (and ledger for pdmm)"),
            400: OpenApiResponse(description="Invalid problem document or solver settings"),
        },
        summary="Solve a problem",
        description="Solves the problem with the serial reference oracle or the randomized protocol simulator.",
    )
    def post(self, request, format=None):
        serializer = SolveRequestSerializer(data=request.data)
        serializer.is_valid(raise_exception=True)
        result = services.solve(serializer.validated_data)
        if not result["converged"]:
            logger.warning("solve request finished without convergence after %d iterations", result["iters"])
        return Response(result, status=status.HTTP_200_OK)


class CertifyAPIView(APIView):
    """
    API view running the a-posteriori recovery check.

    - POST: sum-of-norms problem and optional solution; returns the certificate.
    """
    permission_classes = [AllowAny]

    @extend_schema(
        request=CertifyRequestSerializer,
        responses={
            200: RecoveryCertificateSerializer,
            400: OpenApiResponse(description="Invalid document, or a penalty other than sum_of_norms"),
        },
        summary="Certify cluster recovery",
        description="Extracts the partition of the solution and checks lambda against both recovery thresholds.",
    )
    def post(self, request, format=None):
        serializer = CertifyRequestSerializer(data=request.data)
        serializer.is_valid(raise_exception=True)
        certificate = services.certify(serializer.validated_data)
        logger.info("certificate: K=%d recovered=%s", certificate.partition.K, certificate.recovered)
        return Response(RecoveryCertificateSerializer(certificate).data, status=status.HTTP_200_OK)


class PathAPIView(APIView):
    """
    API view computing a warm-started solution path.
    """
    permission_classes = [AllowAny]

    @extend_schema(
        request=PathRequestSerializer,
        responses={
            200: OpenApiResponse(description="entries, lambdas and cluster_counts of the path"),
            400: OpenApiResponse(description="Invalid document or path settings"),
        },
        summary="Compute a solution path",
        description="Solves over a geometric lambda grid until all users share one model.",
    )
    def post(self, request, format=None):
        serializer = PathRequestSerializer(data=request.data)
        serializer.is_valid(raise_exception=True)
        _, data = services.path(serializer.validated_data)
        return Response(data, status=status.HTTP_200_OK)
