from django.urls import path

from .views import CertifyAPIView, PathAPIView, SolveAPIView

urlpatterns = [
    # reference or protocol solve of one problem
    path("solve/", SolveAPIView.as_view(), name="solve"),

    # recovery certificate of a solution
    path("certify/", CertifyAPIView.as_view(), name="certify"),

    # solution path over lambda
    path("path/", PathAPIView.as_view(), name="path"),
]
