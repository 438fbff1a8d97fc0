from django.apps import AppConfig


class OracleAppConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "oracle"
    verbose_name = "Reference solvers"
