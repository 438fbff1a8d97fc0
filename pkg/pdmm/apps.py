from django.apps import AppConfig


class PdmmAppConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "pdmm"
    verbose_name = "Federated protocol simulation"
